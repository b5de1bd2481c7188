//! Teacher training, the distillation loop and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{Distance, LossParts, Objective, StudentInput, Term, TermKind};
use super::model::{Architecture, Model};
use crate::augment::{
    augpro_fgsm, augpro_mix, fgsm_perturb, knn_replace, mix_pairs, mixup_label, mixup_sequences, FgsmConfig,
    KnnConfig, MixupConfig, Pairing, SoftLabel,
};
use crate::data::{BatchSampler, Dataset};
use crate::embedding::{EmbeddingOwner, SeqEmbeddings, TokenBatch};
use crate::error::{ensure, Error, Result};
use crate::io::{read_json, write_json};
use crate::rng::{substream, Rng, Stream};

/// One augmentation in a distillation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugSpec {
    None,
    Mixup(MixupConfig),
    Fgsm(FgsmConfig),
    AugproMix(MixupConfig),
    AugproFgsm(FgsmConfig),
    Knn(KnnConfig),
}

impl AugSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AugSpec::None => "none",
            AugSpec::Mixup(_) => "mixup",
            AugSpec::Fgsm(_) => "fgsm",
            AugSpec::AugproMix(_) => "augpro-mix",
            AugSpec::AugproFgsm(_) => "augpro-fgsm",
            AugSpec::Knn(_) => "knn",
        }
    }

    /// Builds a spec from its name with the given operator settings.
    pub fn from_name(name: &str, mix: MixupConfig, fgsm: FgsmConfig, knn: KnnConfig) -> Result<Self> {
        Ok(match name {
            "none" => AugSpec::None,
            "mixup" => AugSpec::Mixup(mix),
            "fgsm" => AugSpec::Fgsm(fgsm),
            "augpro-mix" => AugSpec::AugproMix(mix),
            "augpro-fgsm" => AugSpec::AugproFgsm(fgsm),
            "knn" => AugSpec::Knn(knn),
            other => return Err(Error::validation(format!("unknown augmentation {other:?}"))),
        })
    }

    fn validate(&self) -> Result<()> {
        match self {
            AugSpec::None => Ok(()),
            AugSpec::Mixup(c) | AugSpec::AugproMix(c) => c.validate(),
            AugSpec::Fgsm(c) | AugSpec::AugproFgsm(c) => c.validate(),
            AugSpec::Knn(c) => {
                ensure!(c.k >= 1, "knn k must be >= 1");
                ensure!(c.portion > 0.0 && c.portion <= 1.0, "knn portion must lie in (0, 1]");
                Ok(())
            }
        }
    }
}

/// Which loss the FGSM direction is the gradient of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FgsmLoss {
    /// Label cross-entropy plus distance to the teacher.
    #[default]
    Kd,
    /// Label cross-entropy only.
    Ce,
    /// Distance to the teacher only.
    Distance,
}

/// How the losses of several recipe entries are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Mean,
}

/// Table that perturbed student embeddings are projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionTable {
    #[default]
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: Architecture,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::new(16, vec![64, 64]),
            steps: 1500,
            batch_size: 32,
            lr: 0.5,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be > 0");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub student: Architecture,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub recipe: Vec<AugSpec>,
    pub seed: u64,
    /// Include the label cross-entropy terms. Off for unlabeled transfer
    /// sets, where only the teacher supervises.
    #[serde(default = "yes")]
    pub hard_labels: bool,
    #[serde(default)]
    pub fgsm_loss: FgsmLoss,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default)]
    pub fgsm_projection: ProjectionTable,
}

fn yes() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student: Architecture::new(16, vec![8]),
            steps: 1500,
            batch_size: 32,
            lr: 0.5,
            distance: Distance::CrossEntropy,
            recipe: Vec::new(),
            seed: 0,
            hard_labels: true,
            fgsm_loss: FgsmLoss::Kd,
            combine: Combine::Sum,
            fgsm_projection: ProjectionTable::Student,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be > 0");
        for spec in &self.recipe {
            spec.validate()?;
        }
        ensure!(
            self.hard_labels || self.fgsm_loss != FgsmLoss::Ce || !self.uses_fgsm(),
            "fgsm loss 'ce' needs hard labels"
        );
        Ok(())
    }

    fn uses_fgsm(&self) -> bool {
        self.recipe
            .iter()
            .any(|s| matches!(s, AugSpec::Fgsm(_) | AugSpec::AugproFgsm(_)))
    }

    fn aug_weight(&self) -> f64 {
        let n = self.recipe.iter().filter(|s| **s != AugSpec::None).count();
        match self.combine {
            Combine::Mean if n > 0 => 1.0 / n as f64,
            _ => 1.0,
        }
    }
}

/// Hex SHA-256 of a config's JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub role: String,
    pub seed: u64,
    pub config_hash: String,
    pub vocab_size: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub model: Model,
}

impl TrainedModel {
    fn new(role: &str, seed: u64, config_hash: String, model: Model) -> Self {
        Self {
            meta: ModelMeta {
                role: role.to_string(),
                seed,
                config_hash,
                vocab_size: model.vocab_size(),
                num_classes: model.num_classes(),
            },
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.meta.vocab_size == self.model.vocab_size() && self.meta.num_classes == self.model.num_classes(),
            "model metadata disagrees with its parameters"
        );
        ensure!(
            self.model.table.dim() == self.model.net.input_dim(),
            "embedding width does not match the network"
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: TrainedModel = read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

fn one_hots(labels: &[usize], c: usize) -> Result<Vec<SoftLabel>> {
    labels.iter().map(|&y| SoftLabel::one_hot(y, c)).collect()
}

/// Trains a classifier from scratch on `data` with mean cross-entropy.
pub fn train_teacher(data: &Dataset, cfg: &TeacherConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "teacher training data is empty");
    let (z, c) = (data.meta.vocab_size, data.meta.num_classes);
    let mut model = Model::random(&cfg.arch, z, c, EmbeddingOwner::Teacher, &mut substream(cfg.seed, Stream::Init, 0))?;
    let sampler = BatchSampler::new(data, cfg.batch_size, cfg.seed)?;
    for step in 0..cfg.steps {
        let (batch, labels) = sampler.batch(step);
        let term = Term::new(
            TermKind::Kd,
            StudentInput::tokens(batch, cfg.arch.embed_dim),
            Some(one_hots(&labels, c)?),
            None,
        )?;
        let obj = Objective {
            distance: Distance::CrossEntropy,
            terms: vec![term],
        };
        let (_, grads, _) = obj.value_and_grad(&model)?;
        model.apply_sgd(&grads, cfg.lr)?;
    }
    Ok(TrainedModel::new("teacher", cfg.seed, config_hash(cfg)?, model))
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    ensure!(!data.is_empty(), "cannot evaluate on an empty dataset");
    let pred = model.predict(&data.token_batch()?)?;
    let hits = pred
        .iter()
        .zip(&data.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn concat(a: &TokenBatch, b: &TokenBatch) -> Result<TokenBatch> {
    let seqs: Vec<&[u32]> = a.sequences().chain(b.sequences()).collect();
    TokenBatch::from_sequences(&seqs)
}

/// The sequences a MixUp-style recipe entry pairs up: under shift-half the
/// step's batch is extended by `B` fresh draws so that `B` mixes come out.
fn mix_source(
    sampler: &BatchSampler,
    batch: &TokenBatch,
    labels: &[usize],
    pairing: Pairing,
    n: usize,
    rng: &mut Rng,
) -> Result<(TokenBatch, Vec<usize>)> {
    match pairing {
        Pairing::Shuffled => Ok((batch.clone(), labels.to_vec())),
        Pairing::ShiftHalf => {
            use rand::Rng as _;
            let idx: Vec<usize> = (0..batch.batch_size()).map(|_| rng.random_range(0..n)).collect();
            let (extra, extra_labels) = sampler.gather(&idx);
            let mut all = labels.to_vec();
            all.extend(extra_labels);
            Ok((concat(batch, &extra)?, all))
        }
    }
}

fn split_pairs(source: &TokenBatch, labels: &[usize], pairs: &[(usize, usize)]) -> Result<(TokenBatch, TokenBatch, Vec<usize>, Vec<usize>)> {
    let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    Ok((
        source.select(&ia)?,
        source.select(&ib)?,
        ia.iter().map(|&i| labels[i]).collect(),
        ib.iter().map(|&i| labels[i]).collect(),
    ))
}

/// Gradient of the configured FGSM loss w.r.t. the student's embeddings of
/// `batch`.
fn fgsm_direction(
    teacher: &Model,
    student: &Model,
    cfg: &DistillConfig,
    batch: &TokenBatch,
    labels: &[usize],
    teacher_logits: &crate::tensor::Matrix,
) -> Result<SeqEmbeddings> {
    let c = teacher.num_classes();
    let targets = match cfg.fgsm_loss {
        FgsmLoss::Kd if cfg.hard_labels => Some(one_hots(labels, c)?),
        FgsmLoss::Ce => Some(one_hots(labels, c)?),
        _ => None,
    };
    let teacher = match cfg.fgsm_loss {
        FgsmLoss::Ce => None,
        _ => Some(teacher_logits.clone()),
    };
    let term = Term::new(TermKind::Kd, StudentInput::tokens(batch.clone(), student.table.dim()), targets, teacher)?;
    let mut scratch = super::model::ModelGrads::zeros_like(student);
    Ok(term.backward(student, cfg.distance, &mut scratch)?.1)
}

/// Draws every augmentation for one step and returns the resulting
/// objective. The objective is a deterministic function of the student's
/// parameters; all sampling, signs and projections are fixed here.
pub fn build_objective(
    teacher: &Model,
    student: &Model,
    cfg: &DistillConfig,
    sampler: &BatchSampler,
    batch: &TokenBatch,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<Objective> {
    let c = teacher.num_classes();
    let hs = student.table.dim();
    let n = sampler.dataset_len();
    let teacher_logits = teacher.logits_tokens(batch)?;
    let kd = Term::new(
        TermKind::Kd,
        StudentInput::tokens(batch.clone(), hs),
        if cfg.hard_labels { Some(one_hots(labels, c)?) } else { None },
        Some(teacher_logits.clone()),
    )?;
    let mut terms = vec![kd];
    let weight = cfg.aug_weight();
    for spec in &cfg.recipe {
        let term = match spec {
            AugSpec::None => continue,
            AugSpec::Mixup(m) => {
                let (source, src_labels) = mix_source(sampler, batch, labels, m.pairing, n, rng)?;
                let pairs = mix_pairs(source.batch_size(), m.pairing, rng)?;
                let (a, b, la, lb) = split_pairs(&source, &src_labels, &pairs)?;
                let t_emb = mixup_sequences(&teacher.embed(&source)?, &pairs, m.lambda)?;
                let targets = if cfg.hard_labels {
                    Some(
                        la.iter()
                            .zip(&lb)
                            .map(|(&ya, &yb)| mixup_label(&SoftLabel::one_hot(ya, c)?, &SoftLabel::one_hot(yb, c)?, m.lambda))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                Term::new(TermKind::Aug, StudentInput::mix(a, b, m.lambda, hs)?, targets, Some(teacher.logits(&t_emb)?))?
            }
            AugSpec::AugproMix(m) => {
                let (source, _) = mix_source(sampler, batch, labels, m.pairing, n, rng)?;
                let tokens = augpro_mix(&source, m, &teacher.table, rng)?;
                let t = teacher.logits_tokens(&tokens)?;
                Term::new(TermKind::Aug, StudentInput::tokens(tokens, hs), None, Some(t))?
            }
            AugSpec::Fgsm(f) => {
                let e = student.embed(batch)?;
                let grad = fgsm_direction(teacher, student, cfg, batch, labels, &teacher_logits)?;
                let perturbed = fgsm_perturb(e.values(), grad.values(), f, rng)?;
                let mut delta = perturbed;
                delta.add_scaled(e.values(), -1.0)?;
                let offset = SeqEmbeddings::new(batch.batch_size(), batch.seq_len(), delta)?;
                Term::new(TermKind::Aug, StudentInput::shifted(batch.clone(), offset)?, None, Some(teacher_logits.clone()))?
            }
            AugSpec::AugproFgsm(f) => {
                let e = student.embed(batch)?;
                let grad = fgsm_direction(teacher, student, cfg, batch, labels, &teacher_logits)?;
                let table = match cfg.fgsm_projection {
                    ProjectionTable::Student => &student.table,
                    ProjectionTable::Teacher => &teacher.table,
                };
                let tokens = augpro_fgsm(&e, &grad, table, f, rng)?;
                let t = teacher.logits_tokens(&tokens)?;
                Term::new(TermKind::Aug, StudentInput::tokens(tokens, hs), None, Some(t))?
            }
            AugSpec::Knn(k) => {
                let tokens = knn_replace(batch, k.k, k.portion, &teacher.table, rng)?;
                let t = teacher.logits_tokens(&tokens)?;
                Term::new(TermKind::Aug, StudentInput::tokens(tokens, hs), None, Some(t))?
            }
        };
        terms.push(Term { weight, ..term });
    }
    Ok(Objective {
        distance: cfg.distance,
        terms,
    })
}

/// One row of the metrics trace. Loss columns are empty where they do not
/// apply (the augmentation loss on held-out data).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss_kd: Option<f64>,
    pub loss_aug: Option<f64>,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "step,split,loss_kd,loss_aug,accuracy";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.split, f(r.loss_kd), f(r.loss_aug), r.accuracy);
    }
    out
}

/// Mean KD loss of `model` over a whole dataset.
fn dataset_kd_loss(teacher: &Model, student: &Model, data: &Dataset, cfg: &DistillConfig) -> Result<f64> {
    let batch = data.token_batch()?;
    let c = teacher.num_classes();
    let term = Term::new(
        TermKind::Kd,
        StudentInput::tokens(batch.clone(), student.table.dim()),
        if cfg.hard_labels { Some(one_hots(&data.labels(), c)?) } else { None },
        Some(teacher.logits_tokens(&batch)?),
    )?;
    term.value(student, cfg.distance)
}

/// Distills `teacher` into a fresh student on `data`, following the recipe
/// in `cfg`. Rows for the `train` split carry the step's batch losses and
/// accuracy on `data`; rows for `test` (when `eval` is given) carry the
/// dataset-wide KD loss and accuracy on `eval`.
pub fn distill(
    teacher: &TrainedModel,
    data: &Dataset,
    cfg: &DistillConfig,
    eval: Option<&Dataset>,
) -> Result<(TrainedModel, Vec<MetricsRow>)> {
    cfg.validate()?;
    teacher.validate()?;
    ensure!(!data.is_empty(), "distillation data is empty");
    let t = &teacher.model;
    ensure!(
        data.meta.vocab_size == t.vocab_size() && data.meta.num_classes == t.num_classes(),
        "dataset (Z={}, C={}) does not match teacher (Z={}, C={})",
        data.meta.vocab_size,
        data.meta.num_classes,
        t.vocab_size(),
        t.num_classes()
    );
    if let Some(e) = eval {
        ensure!(
            e.meta.vocab_size == t.vocab_size() && e.meta.num_classes == t.num_classes(),
            "evaluation data does not match teacher"
        );
    }
    let mut student = Model::random(
        &cfg.student,
        t.vocab_size(),
        t.num_classes(),
        EmbeddingOwner::Student,
        &mut substream(cfg.seed, Stream::Init, 1),
    )?;
    let sampler = BatchSampler::new(data, cfg.batch_size, cfg.seed)?;
    let interval = (cfg.steps / 50).max(1);
    let mut rows = Vec::new();
    let mut last = LossParts::default();
    let record = |step: u64, student: &Model, last: LossParts, rows: &mut Vec<MetricsRow>| -> Result<()> {
        rows.push(MetricsRow {
            step,
            split: "train".into(),
            loss_kd: Some(last.kd),
            loss_aug: Some(last.aug),
            accuracy: evaluate(student, data)?,
        });
        if let Some(e) = eval {
            rows.push(MetricsRow {
                step,
                split: "test".into(),
                loss_kd: Some(dataset_kd_loss(t, student, e, cfg)?),
                loss_aug: None,
                accuracy: evaluate(student, e)?,
            });
        }
        Ok(())
    };
    if cfg.steps == 0 {
        let (batch, labels) = sampler.batch(0);
        let obj = build_objective(t, &student, cfg, &sampler, &batch, &labels, &mut substream(cfg.seed, Stream::Augmentation, 0))?;
        last = obj.value(&student)?;
    }
    for step in 0..cfg.steps {
        let (batch, labels) = sampler.batch(step);
        let mut rng = substream(cfg.seed, Stream::Augmentation, step);
        let obj = build_objective(t, &student, cfg, &sampler, &batch, &labels, &mut rng)?;
        let (parts, grads, _) = obj.value_and_grad(&student)?;
        student.apply_sgd(&grads, cfg.lr)?;
        last = parts;
        let done = step + 1;
        if done % interval == 0 && done != cfg.steps {
            record(done, &student, last, &mut rows)?;
        }
    }
    record(cfg.steps, &student, last, &mut rows)?;
    Ok((TrainedModel::new("student", cfg.seed, config_hash(cfg)?, student), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::SignMode;
    use crate::data::{gen_keyword_task, DatasetMeta, Example, KeywordTaskConfig};
    use crate::tensor::check_gradient;

    fn task(seed: u64) -> (Dataset, Dataset, Dataset) {
        gen_keyword_task(&KeywordTaskConfig {
            seed,
            vocab_size: 40,
            seq_len: 6,
            num_classes: 2,
            keywords_per_class: 2,
            n_train: 64,
            n_unlabeled: 64,
            n_test: 64,
        })
        .unwrap()
    }

    fn small_teacher_cfg() -> TeacherConfig {
        TeacherConfig {
            arch: Architecture::new(6, vec![12]),
            steps: 300,
            batch_size: 16,
            lr: 0.5,
            seed: 3,
        }
    }

    fn small_distill_cfg(recipe: Vec<AugSpec>) -> DistillConfig {
        DistillConfig {
            student: Architecture::new(6, vec![4]),
            steps: 40,
            batch_size: 8,
            lr: 0.3,
            recipe,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let (train, _, _) = task(1);
        let cfg = TeacherConfig { steps: 0, ..small_teacher_cfg() };
        let t = train_teacher(&train, &cfg).unwrap();
        let init = Model::random(&cfg.arch, 40, 2, EmbeddingOwner::Teacher, &mut substream(cfg.seed, Stream::Init, 0)).unwrap();
        assert_eq!(t.model, init);
    }

    #[test]
    fn teacher_learns_separable_two_token_task() {
        // Token 0 ⇒ class 0, token 1 ⇒ class 1.
        let meta = DatasetMeta {
            vocab_size: 2,
            seq_len: 1,
            num_classes: 2,
            seed: None,
            generator: "fixture".into(),
        };
        let examples = (0..20)
            .map(|i| Example {
                tokens: vec![(i % 2) as u32],
                label: i % 2,
            })
            .collect();
        let data = Dataset::new(meta, examples).unwrap();
        let cfg = TeacherConfig {
            batch_size: 4,
            ..small_teacher_cfg()
        };
        let t = train_teacher(&data, &cfg).unwrap();
        assert!(evaluate(&t.model, &data).unwrap() >= 0.99);
        assert_eq!(train_teacher(&data, &cfg).unwrap(), t);
    }

    #[test]
    fn empty_data_rejected() {
        let (train, _, _) = task(1);
        let empty = Dataset::new(train.meta.clone(), vec![]).unwrap();
        assert!(train_teacher(&empty, &small_teacher_cfg()).is_err());
    }

    #[test]
    fn evaluate_constant_predictor() {
        let (train, _, _) = task(2);
        let mut t = train_teacher(&train, &TeacherConfig { steps: 0, ..small_teacher_cfg() }).unwrap();
        // Zero the last layer and bias class 0.
        let last = t.model.net.param_slices_mut().len() - 1;
        for (i, s) in t.model.net.param_slices_mut().into_iter().enumerate() {
            if i + 1 >= last {
                s.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        t.model.net.param_slices_mut()[last][0] = 1.0;
        let zeros = Dataset::new(
            train.meta.clone(),
            train.examples.iter().map(|e| Example { tokens: e.tokens.clone(), label: 0 }).collect(),
        )
        .unwrap();
        assert_eq!(evaluate(&t.model, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn recipe_none_equals_vanilla_kd() {
        let (train, unl, test) = task(3);
        let teacher = train_teacher(&train, &small_teacher_cfg()).unwrap();
        let (a, ra) = distill(&teacher, &unl, &small_distill_cfg(vec![]), Some(&test)).unwrap();
        let (b, rb) = distill(&teacher, &unl, &small_distill_cfg(vec![AugSpec::None]), Some(&test)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(ra, rb);
        assert!(ra.iter().all(|r| r.loss_aug.is_none_or(|v| v == 0.0)));
    }

    #[test]
    fn zero_steps_distill_returns_student_init() {
        let (train, unl, _) = task(4);
        let teacher = train_teacher(&train, &small_teacher_cfg()).unwrap();
        let cfg = DistillConfig { steps: 0, ..small_distill_cfg(vec![]) };
        let (s, rows) = distill(&teacher, &unl, &cfg, None).unwrap();
        let init = Model::random(&cfg.student, 40, 2, EmbeddingOwner::Student, &mut substream(cfg.seed, Stream::Init, 1)).unwrap();
        assert_eq!(s.model, init);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
    }

    fn all_recipes() -> Vec<AugSpec> {
        let mix = MixupConfig::default();
        let fgsm = FgsmConfig { epsilon: 0.05, sign_mode: SignMode::Ascent };
        vec![
            AugSpec::Mixup(mix),
            AugSpec::Fgsm(fgsm),
            AugSpec::AugproMix(mix),
            AugSpec::AugproFgsm(fgsm),
            AugSpec::Knn(KnnConfig { k: 3, portion: 0.5 }),
        ]
    }

    #[test]
    fn trace_is_deterministic_and_finite() {
        let (train, unl, test) = task(5);
        let teacher = train_teacher(&train, &small_teacher_cfg()).unwrap();
        let cfg = small_distill_cfg(all_recipes());
        let (a, ra) = distill(&teacher, &unl, &cfg, Some(&test)).unwrap();
        let (b, rb) = distill(&teacher, &unl, &cfg, Some(&test)).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_csv(&ra), metrics_csv(&rb));
        assert!(ra.iter().all(|r| r.loss_kd.unwrap().is_finite()));
        // 40 steps: interval 1 → 40 steps, each with a train and test row.
        assert_eq!(ra.len(), 80);
        assert!(metrics_csv(&ra).starts_with("step,split,loss_kd,loss_aug,accuracy\n1,train,"));
    }

    #[test]
    fn combined_recipe_sums_losses() {
        let (train, unl, _) = task(6);
        let teacher = train_teacher(&train, &small_teacher_cfg()).unwrap();
        let fgsm = FgsmConfig::default();
        let mut cfg = small_distill_cfg(vec![AugSpec::AugproMix(MixupConfig::default()), AugSpec::AugproFgsm(fgsm)]);
        let sampler = BatchSampler::new(&unl, cfg.batch_size, cfg.seed).unwrap();
        let student = Model::random(&cfg.student, 40, 2, EmbeddingOwner::Student, &mut substream(1, Stream::Init, 1)).unwrap();
        let (batch, labels) = sampler.batch(0);
        let sum = build_objective(&teacher.model, &student, &cfg, &sampler, &batch, &labels, &mut substream(1, Stream::Augmentation, 0)).unwrap();
        cfg.combine = Combine::Mean;
        let mean = build_objective(&teacher.model, &student, &cfg, &sampler, &batch, &labels, &mut substream(1, Stream::Augmentation, 0)).unwrap();
        let (s, m) = (sum.value(&student).unwrap(), mean.value(&student).unwrap());
        assert_eq!(sum.terms.len(), 3);
        assert!((s.aug - 2.0 * m.aug).abs() < 1e-12);
        assert_eq!(s.kd, m.kd);
    }

    #[test]
    fn miniature_objective_gradient_matches_finite_differences() {
        let meta = DatasetMeta {
            vocab_size: 12,
            seq_len: 4,
            num_classes: 3,
            seed: None,
            generator: "fixture".into(),
        };
        let examples = (0..6)
            .map(|i| Example {
                tokens: (0..4).map(|j| ((i * 5 + j * 3) % 12) as u32).collect(),
                label: i % 3,
            })
            .collect();
        let data = Dataset::new(meta, examples).unwrap();
        let teacher = train_teacher(&data, &TeacherConfig { arch: Architecture::new(4, vec![5]), steps: 20, batch_size: 2, lr: 0.5, seed: 1 }).unwrap();
        for d in [Distance::CrossEntropy, Distance::Mse] {
            let cfg = DistillConfig {
                student: Architecture::new(4, vec![3]),
                batch_size: 2,
                distance: d,
                recipe: all_recipes(),
                ..Default::default()
            };
            let student = Model::random(&cfg.student, 12, 3, EmbeddingOwner::Student, &mut substream(2, Stream::Init, 1)).unwrap();
            let sampler = BatchSampler::new(&data, 2, 0).unwrap();
            let (batch, labels) = sampler.batch(0);
            let obj = build_objective(&teacher.model, &student, &cfg, &sampler, &batch, &labels, &mut substream(0, Stream::Augmentation, 0)).unwrap();
            let (_, grads, input_grads) = obj.value_and_grad(&student).unwrap();
            let mut probe = student.clone();
            let err = check_gradient(
                |p| {
                    probe.set_params(p).unwrap();
                    obj.value(&probe).unwrap().total()
                },
                &student.params(),
                &grads.flatten(),
                1e-5,
            );
            assert!(err < 1e-5, "{d:?} params: {err}");
            for (i, g) in input_grads.iter().enumerate() {
                let mut o = obj.clone();
                let err = check_gradient(
                    |x| {
                        o.terms[i].input.offset_mut().values_mut().as_mut_slice().copy_from_slice(x);
                        o.value(&student).unwrap().total()
                    },
                    obj.terms[i].input.offset().values().as_slice(),
                    g.values().as_slice(),
                    1e-5,
                );
                assert!(err < 1e-5, "{d:?} term {i} inputs: {err}");
            }
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = small_distill_cfg(all_recipes());
        let s = serde_json::to_string(&cfg).unwrap();
        let back: DistillConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<DistillConfig>(v).is_err());
        assert!(!config_hash(&cfg).unwrap().is_empty());
    }

    #[test]
    fn ce_fgsm_loss_requires_labels() {
        let cfg = DistillConfig {
            hard_labels: false,
            fgsm_loss: FgsmLoss::Ce,
            ..small_distill_cfg(vec![AugSpec::Fgsm(FgsmConfig::default())])
        };
        assert!(cfg.validate().is_err());
    }
}
