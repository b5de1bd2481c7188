//! Command line front end.
//!
//! Every subcommand takes its settings from defaults, then an optional
//! `--config` JSON file (unknown keys are rejected), then flags. Outputs are
//! written atomically; without an output path they go to stdout.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::augment::{FgsmConfig, KnnConfig, MixupConfig, Pairing, SignMode};
use crate::bench::{bench_csv, bench_projection, BenchConfig};
use crate::data::{gen_keyword_task, load_with_sidecar};
use crate::distill::{
    distill, evaluate, metrics_csv, train_teacher, AugSpec, Combine, Distance, DistillConfig, FgsmLoss,
    ProjectionTable, TeacherConfig, TrainedModel,
};
use crate::diversity::{simulate, HypercubeConfig, Variant};
use crate::error::{ensure, Error, Result};
use crate::experiment::{run_experiment, sweep_epsilon, ExperimentConfig};
use crate::io::{read_json, write_atomic, write_json};
use crate::svm::run_boundary_demo;
use crate::tensor::Activation;

#[derive(Debug, Parser)]
#[command(name = "augpro", version, about = "Augmentation with projection for knowledge distillation")]
pub struct Cli {
    /// Worker threads for projection, simulation trials and experiments.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded keyword task (train, unlabeled and test splits).
    GenData(GenDataArgs),
    /// Train a teacher classifier on a labeled dataset.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a teacher into a fresh student with an augmentation recipe.
    Distill(DistillArgs),
    /// Monte Carlo estimates of the hypercube diversity ratio and error gap.
    SimDiversity(SimArgs),
    /// Exact four-point SVM example of MixUp's boundary shift.
    SvmDemo(SvmArgs),
    /// Time cosine projection across vocabulary sizes.
    BenchProjection(BenchArgs),
    /// Select ε for FGSM-based recipes on held-out seeds.
    SweepEpsilon(SweepArgs),
    /// Run several recipes over the seeds of an experiment config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for train/unlabeled/test JSONL files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub keywords_per_class: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Hidden widths, comma separated (empty for none).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// Labeled JSONL dataset (with its metadata sidecar).
    #[arg(long)]
    pub data: PathBuf,
    /// Model output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out dataset to report accuracy on.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Transfer set (JSONL with sidecar).
    #[arg(long)]
    pub data: PathBuf,
    /// Student model output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV output path (stdout if omitted).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Held-out dataset for the `test` rows of the trace.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Augmentation: none, mixup, fgsm, augpro-mix, augpro-fgsm, knn (repeatable).
    #[arg(long = "aug")]
    pub aug: Vec<String>,
    #[arg(long)]
    pub sign: Option<SignMode>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub pairing: Option<Pairing>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long)]
    pub knn_portion: Option<f64>,
    /// Distance to the teacher: ce or mse.
    #[arg(long = "d")]
    pub distance: Option<Distance>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Drop the label cross-entropy terms (teacher-only supervision).
    #[arg(long)]
    pub no_hard_labels: bool,
    /// Loss whose gradient sets the FGSM direction: kd, ce or distance.
    #[arg(long, value_enum)]
    pub fgsm_loss: Option<FgsmLoss>,
    /// Combine several augmentation losses by sum or mean.
    #[arg(long, value_enum)]
    pub combine: Option<Combine>,
    /// Table perturbed student embeddings are projected onto.
    #[arg(long, value_enum)]
    pub fgsm_projection: Option<ProjectionTable>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct SvmArgs {
    /// Format printed to stdout.
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub vocab_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment config (defaults to the built-in keyword-task protocol).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recipe swept, e.g. augpro-fgsm.
    #[arg(long, default_value = "augpro-fgsm")]
    pub recipe: String,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Sweep report (JSON) output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the experiment config with the selected ε here.
    #[arg(long)]
    pub write_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recipes, comma separated; `kd` is plain distillation and parts are
    /// joined with `+`.
    #[arg(long, value_delimiter = ',', default_value = "kd,augpro-mix+augpro-fgsm,augpro-fgsm,augpro-fgsm-r")]
    pub recipes: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overlays `over` onto `base`, recursing into objects.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with the JSON file at `path`, if any.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(defaults) };
    let file: Value = read_json(path)?;
    ensure!(file.is_object(), "{}: config must be a JSON object", path.display());
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, file);
    serde_json::from_value(v).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json_text<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

impl ArchArgs {
    fn apply(&self, arch: &mut crate::distill::Architecture) {
        set(&mut arch.embed_dim, self.embed_dim);
        set(&mut arch.hidden, self.hidden.clone());
        set(&mut arch.activation, self.activation);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be >= 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Distill(a) => cmd_distill(a),
        Command::SimDiversity(a) => sim_diversity(a),
        Command::SvmDemo(a) => svm_demo(a),
        Command::BenchProjection(a) => cmd_bench(a),
        Command::SweepEpsilon(a) => cmd_sweep(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = layered(ExperimentConfig::default().task, a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.vocab_size, a.vocab_size);
    set(&mut cfg.seq_len, a.seq_len);
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.keywords_per_class, a.keywords_per_class);
    set(&mut cfg.n_train, a.n_train);
    set(&mut cfg.n_unlabeled, a.n_unlabeled);
    set(&mut cfg.n_test, a.n_test);
    let (train, unlabeled, test) = gen_keyword_task(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    train.save_jsonl(&a.out.join("train.jsonl"))?;
    unlabeled.save_jsonl(&a.out.join("unlabeled.jsonl"))?;
    test.save_jsonl(&a.out.join("test.jsonl"))?;
    Ok(())
}

fn cmd_train_teacher(a: TrainTeacherArgs) -> Result<()> {
    let mut cfg: TeacherConfig = layered(TeacherConfig::default(), a.config.as_deref())?;
    a.arch.apply(&mut cfg.arch);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.batch_size, a.batch);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.seed, a.seed);
    let data = load_with_sidecar(&a.data)?;
    let model = train_teacher(&data, &cfg)?;
    model.save(&a.out)?;
    let mut summary = serde_json::json!({ "train_accuracy": evaluate(&model.model, &data)? });
    if let Some(p) = &a.eval {
        summary["eval_accuracy"] = evaluate(&model.model, &load_with_sidecar(p)?)?.into();
    }
    print!("{}", json_text(&summary)?);
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let mut cfg: DistillConfig = layered(DistillConfig::default(), a.config.as_deref())?;
    a.arch.apply(&mut cfg.student);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.batch_size, a.batch);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.distance, a.distance);
    set(&mut cfg.fgsm_loss, a.fgsm_loss);
    set(&mut cfg.combine, a.combine);
    set(&mut cfg.fgsm_projection, a.fgsm_projection);
    if a.no_hard_labels {
        cfg.hard_labels = false;
    }
    if !a.aug.is_empty() {
        let mix = MixupConfig::default();
        let fgsm = FgsmConfig::default();
        let knn = KnnConfig::default();
        cfg.recipe = a
            .aug
            .iter()
            .map(|name| AugSpec::from_name(name, mix, fgsm, knn))
            .collect::<Result<_>>()?;
    }
    // Operator flags override whatever the recipe entries carry.
    for spec in &mut cfg.recipe {
        match spec {
            AugSpec::Mixup(m) | AugSpec::AugproMix(m) => {
                set(&mut m.lambda, a.lambda);
                set(&mut m.pairing, a.pairing);
            }
            AugSpec::Fgsm(f) | AugSpec::AugproFgsm(f) => {
                set(&mut f.epsilon, a.epsilon);
                set(&mut f.sign_mode, a.sign);
            }
            AugSpec::Knn(k) => {
                set(&mut k.k, a.knn_k);
                set(&mut k.portion, a.knn_portion);
            }
            AugSpec::None => {}
        }
    }
    let teacher = TrainedModel::load(&a.teacher)?;
    let data = load_with_sidecar(&a.data)?;
    let eval = a.eval.as_deref().map(load_with_sidecar).transpose()?;
    let (student, rows) = distill(&teacher, &data, &cfg, eval.as_ref())?;
    student.save(&a.out)?;
    emit(a.metrics.as_deref(), &metrics_csv(&rows))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfig {
    variant: Variant,
    n: usize,
    trials: usize,
    seed: u64,
}

fn sim_diversity(a: SimArgs) -> Result<()> {
    let defaults = SimConfig {
        variant: Variant::Mix,
        n: 256,
        trials: 2000,
        seed: 0,
    };
    let mut cfg = layered(defaults, a.config.as_deref())?;
    set(&mut cfg.variant, a.variant);
    set(&mut cfg.n, a.n);
    set(&mut cfg.trials, a.trials);
    set(&mut cfg.seed, a.seed);
    let report = simulate(
        &HypercubeConfig {
            n: cfg.n,
            trials: cfg.trials,
            seed: cfg.seed,
        },
        cfg.variant,
    )?;
    emit(a.out.as_deref(), &json_text(&report)?)
}

fn svm_demo(a: SvmArgs) -> Result<()> {
    let demo = run_boundary_demo()?;
    if let Some(p) = &a.out {
        write_json(p, &demo)?;
    }
    match a.format {
        Format::Text => print!("{}", demo.to_text()),
        Format::Json => print!("{}", json_text(&demo)?),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = layered(BenchConfig::default(), a.config.as_deref())?;
    set(&mut cfg.vocab_sizes, a.vocab_sizes);
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.seq_len, a.seq_len);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.reps, a.reps);
    set(&mut cfg.seed, a.seed);
    let rows = bench_projection(&cfg)?;
    emit(a.out.as_deref(), &bench_csv(&rows))?;
    ensure!(
        rows.iter().all(|r| r.spot_check),
        "projection disagreed with the naive oracle"
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = layered(ExperimentConfig::default(), a.config.as_deref())?;
    set(&mut cfg.epsilon_grid, a.grid);
    let report = sweep_epsilon(&cfg, &a.recipe)?;
    if let Some(p) = &a.write_config {
        write_json(
            p,
            &ExperimentConfig {
                epsilon: report.selected_epsilon,
                ..cfg
            },
        )?;
    }
    emit(a.out.as_deref(), &json_text(&report)?)
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = layered(ExperimentConfig::default(), a.config.as_deref())?;
    let recipes: Vec<&str> = a.recipes.iter().map(String::as_str).collect();
    let report = run_experiment(&cfg, &recipes)?;
    emit(a.out.as_deref(), &json_text(&report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_recurses_into_objects() {
        let mut base = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, serde_json::json!({"b": {"c": 5}, "e": [1]}));
        assert_eq!(base, serde_json::json!({"a": 1, "b": {"c": 5, "d": 3}, "e": [1]}));
    }

    #[test]
    fn layered_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 7, "student": {"hidden": [3]}}"#).unwrap();
        let cfg: DistillConfig = layered(DistillConfig::default(), Some(&p)).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.student.hidden, vec![3]);
        assert_eq!(cfg.student.embed_dim, 16);
        std::fs::write(&p, r#"{"stepz": 7}"#).unwrap();
        let err = layered(DistillConfig::default(), Some(&p)).unwrap_err();
        assert!(err.is_user_error());
    }

    #[test]
    fn cli_parses_repeatable_aug() {
        let cli = Cli::try_parse_from([
            "augpro", "distill", "--teacher", "t", "--data", "d", "--out", "o", "--aug", "augpro-mix", "--aug",
            "augpro-fgsm", "--sign", "descent", "--d", "mse",
        ])
        .unwrap();
        let Command::Distill(a) = cli.command else { panic!() };
        assert_eq!(a.aug, vec!["augpro-mix", "augpro-fgsm"]);
        assert_eq!(a.sign, Some(SignMode::Descent));
        assert_eq!(a.distance, Some(Distance::Mse));
    }
}
