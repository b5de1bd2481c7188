//! Distillation losses and the combined training objective.
//!
//! Every loss the training loop needs is a sum of [`Term`]s. A term feeds
//! the student embeddings that are an affine function of the student table
//! (token lookups, mixes of lookups, lookups plus a fixed perturbation) and
//! scores the resulting logits against a hard/soft label, against frozen
//! teacher logits, or both. That single form gives one backward pass for all
//! augmentation recipes and makes the gradient checkable with everything
//! random held fixed.

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelGrads};
use crate::augment::SoftLabel;
use crate::embedding::{SeqEmbeddings, TokenBatch};
use crate::error::{ensure, Error, Result};
use crate::tensor::{cross_entropy, cross_entropy_label, mse, mse_grad, softmax, Matrix};

/// Distance between student and teacher outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// Cross-entropy of the student against the teacher softmax.
    #[default]
    #[serde(alias = "ce")]
    CrossEntropy,
    /// Mean squared error between logit vectors.
    Mse,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" => Ok(Distance::CrossEntropy),
            "mse" => Ok(Distance::Mse),
            other => Err(Error::validation(format!("unknown distance {other:?}"))),
        }
    }
}

/// `d(student, teacher)` and its gradient w.r.t. the student logits.
pub fn distance(student: &[f64], teacher: &[f64], d: Distance) -> Result<(f64, Vec<f64>)> {
    ensure!(
        student.len() == teacher.len(),
        "class count mismatch: {} vs {}",
        student.len(),
        teacher.len()
    );
    match d {
        Distance::CrossEntropy => cross_entropy(student, &softmax(teacher)),
        Distance::Mse => Ok((mse(student, teacher)?, mse_grad(student, teacher)?)),
    }
}

/// `CE(student, label) + d(student, teacher)` for one example.
pub fn kd_loss(student: &[f64], teacher: &[f64], hard_label: usize, d: Distance) -> Result<f64> {
    let (ce, _) = cross_entropy_label(student, hard_label)?;
    Ok(ce + distance(student, teacher, d)?.0)
}

/// Student embeddings `Σ wᵢ·table[tokensᵢ] + offset`.
#[derive(Debug, Clone)]
pub struct StudentInput {
    parts: Vec<(TokenBatch, f64)>,
    offset: SeqEmbeddings,
}

impl StudentInput {
    pub fn tokens(batch: TokenBatch, dim: usize) -> Self {
        let offset = SeqEmbeddings::zeros(batch.batch_size(), batch.seq_len(), dim);
        Self {
            parts: vec![(batch, 1.0)],
            offset,
        }
    }

    /// `λ·table[a] + (1-λ)·table[b]`.
    pub fn mix(a: TokenBatch, b: TokenBatch, lambda: f64, dim: usize) -> Result<Self> {
        ensure!(
            a.batch_size() == b.batch_size() && a.seq_len() == b.seq_len(),
            "mixed batches differ in shape"
        );
        let offset = SeqEmbeddings::zeros(a.batch_size(), a.seq_len(), dim);
        Ok(Self {
            parts: vec![(a, lambda), (b, 1.0 - lambda)],
            offset,
        })
    }

    /// `table[batch] + offset`.
    pub fn shifted(batch: TokenBatch, offset: SeqEmbeddings) -> Result<Self> {
        ensure!(
            offset.batch_size() == batch.batch_size() && offset.seq_len() == batch.seq_len(),
            "offset does not match batch"
        );
        Ok(Self {
            parts: vec![(batch, 1.0)],
            offset,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.offset.batch_size()
    }

    pub fn offset(&self) -> &SeqEmbeddings {
        &self.offset
    }

    pub fn offset_mut(&mut self) -> &mut SeqEmbeddings {
        &mut self.offset
    }

    pub fn embeddings(&self, model: &Model) -> Result<SeqEmbeddings> {
        let mut out = self.offset.clone();
        for (batch, w) in &self.parts {
            out.values_mut().add_scaled(model.embed(batch)?.values(), *w)?;
        }
        Ok(out)
    }

    fn scatter(&self, grads: &mut ModelGrads, demb: &SeqEmbeddings) -> Result<()> {
        for (batch, w) in &self.parts {
            grads.scatter(batch, demb, *w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Kd,
    Aug,
}

/// One summand of the objective: `weight · mean_rows[CE(s, target) + d(s, t)]`,
/// either part optional.
#[derive(Debug, Clone)]
pub struct Term {
    pub kind: TermKind,
    pub weight: f64,
    pub input: StudentInput,
    pub targets: Option<Vec<SoftLabel>>,
    pub teacher_logits: Option<Matrix>,
}

impl Term {
    pub fn new(
        kind: TermKind,
        input: StudentInput,
        targets: Option<Vec<SoftLabel>>,
        teacher_logits: Option<Matrix>,
    ) -> Result<Self> {
        let m = input.batch_size();
        ensure!(m >= 1, "empty loss term");
        ensure!(
            targets.is_some() || teacher_logits.is_some(),
            "loss term scores nothing"
        );
        if let Some(t) = &targets {
            ensure!(t.len() == m, "{} targets for {m} rows", t.len());
        }
        if let Some(t) = &teacher_logits {
            ensure!(t.rows() == m, "{} teacher rows for {m} rows", t.rows());
        }
        Ok(Self {
            kind,
            weight: 1.0,
            input,
            targets,
            teacher_logits,
        })
    }

    /// Mean loss over rows and its gradient w.r.t. the logits (already
    /// divided by the row count, not yet by `weight`).
    fn score(&self, logits: &Matrix, d: Distance) -> Result<(f64, Matrix)> {
        let m = logits.rows();
        let inv = 1.0 / m as f64;
        let mut total = 0.0;
        let mut grad = Matrix::zeros(m, logits.cols());
        for r in 0..m {
            let row = logits.row(r);
            let g = grad.row_mut(r);
            if let Some(targets) = &self.targets {
                let (l, dl) = cross_entropy(row, targets[r].probs())?;
                total += l;
                g.iter_mut().zip(dl).for_each(|(a, b)| *a += b * inv);
            }
            if let Some(t) = &self.teacher_logits {
                let (l, dl) = distance(row, t.row(r), d)?;
                total += l;
                g.iter_mut().zip(dl).for_each(|(a, b)| *a += b * inv);
            }
        }
        Ok((total * inv, grad))
    }

    pub fn value(&self, student: &Model, d: Distance) -> Result<f64> {
        let logits = student.logits(&self.input.embeddings(student)?)?;
        Ok(self.score(&logits, d)?.0)
    }

    /// Unweighted value, gradient w.r.t. the student embeddings, and the
    /// weighted parameter gradient accumulated into `grads`.
    pub fn backward(
        &self,
        student: &Model,
        d: Distance,
        grads: &mut ModelGrads,
    ) -> Result<(f64, SeqEmbeddings)> {
        let (logits, cache) = student.forward(&self.input.embeddings(student)?)?;
        let (value, mut dlogits) = self.score(&logits, d)?;
        dlogits.scale(self.weight);
        let (net_grads, demb) = student.backward(&cache, &dlogits)?;
        grads.net.add_scaled(&net_grads, 1.0)?;
        self.input.scatter(grads, &demb)?;
        Ok((value, demb))
    }
}

/// Loss split the way the metrics trace reports it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub kd: f64,
    pub aug: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.kd + self.aug
    }
}

/// `Σ weight · term`, with every stochastic choice already made.
#[derive(Debug, Clone)]
pub struct Objective {
    pub distance: Distance,
    pub terms: Vec<Term>,
}

impl Objective {
    pub fn value(&self, student: &Model) -> Result<LossParts> {
        let mut parts = LossParts::default();
        for t in &self.terms {
            let v = t.weight * t.value(student, self.distance)?;
            match t.kind {
                TermKind::Kd => parts.kd += v,
                TermKind::Aug => parts.aug += v,
            }
        }
        Ok(parts)
    }

    /// Value, parameter gradient, and each term's embedding-input gradient
    /// (weighted, i.e. the gradient of the total w.r.t. that term's offset).
    pub fn value_and_grad(&self, student: &Model) -> Result<(LossParts, ModelGrads, Vec<SeqEmbeddings>)> {
        let mut grads = ModelGrads::zeros_like(student);
        let mut parts = LossParts::default();
        let mut input_grads = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let (v, demb) = t.backward(student, self.distance, &mut grads)?;
            match t.kind {
                TermKind::Kd => parts.kd += t.weight * v,
                TermKind::Aug => parts.aug += t.weight * v,
            }
            input_grads.push(demb);
        }
        ensure!(
            parts.total().is_finite(),
            "objective is not finite: {parts:?}"
        );
        Ok((parts, grads, input_grads))
    }
}

fn mean_over_rows(
    student_logits: &Matrix,
    teacher_logits: Option<&Matrix>,
    targets: Option<&[SoftLabel]>,
    d: Distance,
) -> Result<f64> {
    let m = student_logits.rows();
    ensure!(m >= 1, "no rows to score");
    let mut total = 0.0;
    for r in 0..m {
        let s = student_logits.row(r);
        if let Some(t) = targets {
            total += cross_entropy(s, t[r].probs())?.0;
        }
        if let Some(t) = teacher_logits {
            total += distance(s, t.row(r), d)?.0;
        }
    }
    Ok(total / m as f64)
}

/// Mean over `M` mixed examples of `CE(g(e^g), y_mix) + d(g(e^g), f(e^f))`.
pub fn aug_loss_mixup(
    mixed_student_emb: &SeqEmbeddings,
    mixed_teacher_emb: &SeqEmbeddings,
    mixed_labels: &[SoftLabel],
    teacher: &Model,
    student: &Model,
    d: Distance,
) -> Result<f64> {
    ensure!(
        mixed_labels.len() == mixed_student_emb.batch_size()
            && mixed_teacher_emb.batch_size() == mixed_student_emb.batch_size(),
        "mixed batch sizes disagree"
    );
    let s = student.logits(mixed_student_emb)?;
    let t = teacher.logits(mixed_teacher_emb)?;
    mean_over_rows(&s, Some(&t), Some(mixed_labels), d)
}

/// Mean over the augmented tokens of `d(g(x), f(x))`; no label term.
pub fn aug_loss_augpro(aug_tokens: &TokenBatch, teacher: &Model, student: &Model, d: Distance) -> Result<f64> {
    let s = student.logits_tokens(aug_tokens)?;
    let t = teacher.logits_tokens(aug_tokens)?;
    mean_over_rows(&s, Some(&t), None, d)
}

/// Mean of `d(g(perturbed student emb), f(clean teacher emb))`.
pub fn aug_loss_fgsm(
    perturbed_student_emb: &SeqEmbeddings,
    clean_teacher_emb: &SeqEmbeddings,
    teacher: &Model,
    student: &Model,
    d: Distance,
) -> Result<f64> {
    ensure!(
        perturbed_student_emb.batch_size() == clean_teacher_emb.batch_size(),
        "student and teacher batch sizes disagree"
    );
    let s = student.logits(perturbed_student_emb)?;
    let t = teacher.logits(clean_teacher_emb)?;
    mean_over_rows(&s, Some(&t), None, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::model::Architecture;
    use crate::embedding::EmbeddingOwner;
    use crate::rng::seeded;
    use crate::tensor::entropy;

    #[test]
    fn kd_loss_examples() {
        let z = [0.3, -1.2, 2.0];
        let ce = cross_entropy_label(&z, 2).unwrap().0;
        assert!((kd_loss(&z, &z, 2, Distance::Mse).unwrap() - ce).abs() < 1e-15);
        let u = [0.0, 0.0];
        assert!((kd_loss(&u, &u, 0, Distance::Mse).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kd_loss(&u, &u, 2, Distance::Mse).is_err());
        assert!(kd_loss(&u, &z, 0, Distance::Mse).is_err());
    }

    #[test]
    fn kd_loss_matches_straight_line_recomputation() {
        let s: [f64; 4] = [0.5, -0.25, 1.75, 0.0];
        let t: [f64; 4] = [-1.0, 0.5, 0.25, 2.0];
        let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        let ce_label = lse(&s) - s[1];
        let pt: Vec<f64> = t.iter().map(|x| x.exp() / t.iter().map(|y| y.exp()).sum::<f64>()).collect();
        let ce_soft: f64 = pt.iter().zip(&s).map(|(p, x)| -p * (x - lse(&s))).sum();
        let mse: f64 = s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
        let got_ce = kd_loss(&s, &t, 1, Distance::CrossEntropy).unwrap();
        let got_mse = kd_loss(&s, &t, 1, Distance::Mse).unwrap();
        assert!((got_ce - (ce_label + ce_soft)).abs() < 1e-12);
        assert!((got_mse - (ce_label + mse)).abs() < 1e-12);
    }

    fn pair(seed: u64) -> (Model, Model) {
        let arch = Architecture::new(4, vec![5]);
        let t = Model::random(&arch, 12, 3, EmbeddingOwner::Teacher, &mut seeded(seed)).unwrap();
        let s = Model::random(&arch, 12, 3, EmbeddingOwner::Student, &mut seeded(seed + 1)).unwrap();
        (t, s)
    }

    fn tokens(seed: u64, b: usize) -> TokenBatch {
        use rand::Rng;
        let mut rng = seeded(seed);
        TokenBatch::new(b, 3, (0..b * 3).map(|_| rng.random_range(0..12)).collect()).unwrap()
    }

    #[test]
    fn augpro_loss_of_identical_models() {
        let (t, _) = pair(1);
        let x = tokens(2, 4);
        assert_eq!(aug_loss_augpro(&x, &t, &t, Distance::Mse).unwrap(), 0.0);
        let logits = t.logits_tokens(&x).unwrap();
        let h: f64 = (0..4).map(|r| entropy(&softmax(logits.row(r)))).sum::<f64>() / 4.0;
        assert!((aug_loss_augpro(&x, &t, &t, Distance::CrossEntropy).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn mixup_loss_with_self_consistent_label_is_entropy() {
        let (t, _) = pair(3);
        let x = tokens(4, 1);
        let e = t.embed(&x).unwrap();
        let p = softmax(t.logits(&e).unwrap().row(0));
        let y = SoftLabel::new(p.clone()).unwrap();
        let got = aug_loss_mixup(&e, &e, &[y], &t, &t, Distance::Mse).unwrap();
        assert!((got - entropy(&p)).abs() < 1e-12);
    }

    #[test]
    fn mixup_loss_with_unit_lambda_is_kd_loss() {
        let (t, s) = pair(5);
        let a = tokens(6, 2);
        let b = tokens(7, 2);
        let mix = |m: &Model| {
            let (ea, eb) = (m.embed(&a).unwrap(), m.embed(&b).unwrap());
            crate::augment::mixup_sequences(
                &SeqEmbeddings::from_sequences(&[ea.sequence(0), ea.sequence(1), eb.sequence(0), eb.sequence(1)]).unwrap(),
                &[(0, 2), (1, 3)],
                1.0,
            )
            .unwrap()
        };
        let labels = [1usize, 2];
        let y: Vec<SoftLabel> = labels.iter().map(|&c| SoftLabel::one_hot(c, 3).unwrap()).collect();
        let got = aug_loss_mixup(&mix(&s), &mix(&t), &y, &t, &s, Distance::CrossEntropy).unwrap();
        let sl = s.logits_tokens(&a).unwrap();
        let tl = t.logits_tokens(&a).unwrap();
        let want = (0..2)
            .map(|r| kd_loss(sl.row(r), tl.row(r), labels[r], Distance::CrossEntropy).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fgsm_loss_of_identical_models_without_perturbation() {
        let (t, _) = pair(8);
        let e = t.embed(&tokens(9, 3)).unwrap();
        assert_eq!(aug_loss_fgsm(&e, &e, &t, &t, Distance::Mse).unwrap(), 0.0);
    }

    #[test]
    fn objective_value_matches_term_functions() {
        let (t, s) = pair(10);
        let x = tokens(11, 4);
        let aug = tokens(12, 4);
        let labels: Vec<SoftLabel> = [0, 1, 2, 0].iter().map(|&c| SoftLabel::one_hot(c, 3).unwrap()).collect();
        let kd = Term::new(
            TermKind::Kd,
            StudentInput::tokens(x.clone(), 4),
            Some(labels.clone()),
            Some(t.logits_tokens(&x).unwrap()),
        )
        .unwrap();
        let augt = Term::new(TermKind::Aug, StudentInput::tokens(aug.clone(), 4), None, Some(t.logits_tokens(&aug).unwrap())).unwrap();
        let obj = Objective {
            distance: Distance::CrossEntropy,
            terms: vec![kd, augt],
        };
        let parts = obj.value(&s).unwrap();
        let sl = s.logits_tokens(&x).unwrap();
        let tl = t.logits_tokens(&x).unwrap();
        let want_kd = (0..4)
            .map(|r| kd_loss(sl.row(r), tl.row(r), [0, 1, 2, 0][r], Distance::CrossEntropy).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((parts.kd - want_kd).abs() < 1e-12);
        assert!((parts.aug - aug_loss_augpro(&aug, &t, &s, Distance::CrossEntropy).unwrap()).abs() < 1e-12);
        let (p2, _, _) = obj.value_and_grad(&s).unwrap();
        assert_eq!(parts, p2);
    }

    #[test]
    fn term_rejects_mismatched_rows() {
        let x = tokens(1, 2);
        assert!(Term::new(TermKind::Kd, StudentInput::tokens(x.clone(), 4), None, None).is_err());
        assert!(Term::new(TermKind::Kd, StudentInput::tokens(x, 4), None, Some(Matrix::zeros(3, 3))).is_err());
    }
}
