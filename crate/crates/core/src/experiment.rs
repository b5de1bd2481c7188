//! Seeded keyword-task distillation experiments: a teacher trained on a
//! small labeled split is distilled into a small student on a larger
//! unlabeled split, under several augmentation recipes, over several seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{FgsmConfig, KnnConfig, MixupConfig, SignMode};
use crate::data::{gen_keyword_task, KeywordTaskConfig};
use crate::distill::{distill, evaluate, train_teacher, AugSpec, DistillConfig, TeacherConfig};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task shape; `seed` is replaced by each experiment seed.
    pub task: KeywordTaskConfig,
    /// Teacher settings; `seed` is replaced by each experiment seed.
    pub teacher: TeacherConfig,
    /// Student settings; `seed` and `recipe` are replaced per run.
    pub student: DistillConfig,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub epsilon: f64,
    /// Candidate ε values for the sweep.
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    /// Seeds the sweep selects ε on; kept apart from `seeds`.
    #[serde(default)]
    pub sweep_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    /// The keyword-task protocol: Z=200, L=16, C=4 with two keywords per
    /// class; 128 labeled, 2000 unlabeled, 2000 test examples; a 16/64×2
    /// teacher and a 16/8 student distilled without labels.
    fn default() -> Self {
        Self {
            task: KeywordTaskConfig {
                seed: 0,
                vocab_size: 200,
                seq_len: 16,
                num_classes: 4,
                keywords_per_class: 2,
                n_train: 128,
                n_unlabeled: 2000,
                n_test: 2000,
            },
            teacher: TeacherConfig::default(),
            student: DistillConfig {
                hard_labels: false,
                ..Default::default()
            },
            seeds: (0..5).collect(),
            lambda: 0.5,
            epsilon: crate::augment::DEFAULT_EPSILON,
            epsilon_grid: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            sweep_seeds: (100..105).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        ensure!(!self.seeds.is_empty(), "need at least one seed");
        self.mixup().validate()?;
        self.fgsm(SignMode::Ascent).validate()?;
        Ok(())
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            lambda: self.lambda,
            ..Default::default()
        }
    }

    pub fn fgsm(&self, sign_mode: SignMode) -> FgsmConfig {
        FgsmConfig {
            epsilon: self.epsilon,
            sign_mode,
        }
    }

    /// Parses a recipe name list such as `augpro-mix+augpro-fgsm`; `kd` is
    /// the empty recipe and `augpro-fgsm-r`/`-d` select the sign modes.
    pub fn recipe(&self, name: &str) -> Result<Vec<AugSpec>> {
        if name == "kd" {
            return Ok(Vec::new());
        }
        name.split('+')
            .map(|part| {
                let (base, sign) = match part {
                    "augpro-fgsm-r" => ("augpro-fgsm", SignMode::Random),
                    "augpro-fgsm-d" => ("augpro-fgsm", SignMode::Descent),
                    "fgsm-r" => ("fgsm", SignMode::Random),
                    "fgsm-d" => ("fgsm", SignMode::Descent),
                    other => (other, SignMode::Ascent),
                };
                AugSpec::from_name(base, self.mixup(), self.fgsm(sign), KnnConfig::default())
            })
            .collect()
    }
}

/// Final test accuracy of every seed under one recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub recipe: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ArmResult {
    fn new(recipe: String, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            recipe,
            accuracies,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub teacher_accuracies: Vec<f64>,
    pub arms: Vec<ArmResult>,
}

impl ExperimentReport {
    pub fn arm(&self, recipe: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.recipe == recipe)
    }
}

/// Runs every recipe on every seed. Seeds run in parallel; each run is
/// seeded on its own, so results do not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig, recipes: &[&str]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let specs = recipes.iter().map(|r| cfg.recipe(r)).collect::<Result<Vec<_>>>()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(f64, Vec<f64>)> {
            let task = KeywordTaskConfig { seed, ..cfg.task.clone() };
            let (train, unlabeled, test) = gen_keyword_task(&task)?;
            let teacher = train_teacher(&train, &TeacherConfig { seed, ..cfg.teacher.clone() })?;
            let teacher_acc = evaluate(&teacher.model, &test)?;
            let accs = specs
                .iter()
                .map(|recipe| {
                    let dcfg = DistillConfig {
                        seed,
                        recipe: recipe.clone(),
                        ..cfg.student.clone()
                    };
                    let (student, _) = distill(&teacher, &unlabeled, &dcfg, None)?;
                    evaluate(&student.model, &test)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((teacher_acc, accs))
        })
        .collect::<Result<Vec<_>>>()?;
    let arms = recipes
        .iter()
        .enumerate()
        .map(|(i, r)| ArmResult::new(r.to_string(), per_seed.iter().map(|(_, a)| a[i]).collect()))
        .collect();
    Ok(ExperimentReport {
        teacher_accuracies: per_seed.iter().map(|(t, _)| *t).collect(),
        arms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub recipe: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    /// Highest mean accuracy; the smallest ε wins ties.
    pub selected_epsilon: f64,
}

/// Runs `recipe` for every ε in the grid on the sweep seeds and selects the
/// ε with the best mean test accuracy.
pub fn sweep_epsilon(cfg: &ExperimentConfig, recipe: &str) -> Result<SweepReport> {
    ensure!(!cfg.epsilon_grid.is_empty(), "epsilon grid is empty");
    ensure!(!cfg.sweep_seeds.is_empty(), "no sweep seeds");
    let mut grid = cfg.epsilon_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = grid
        .iter()
        .map(|&epsilon| {
            let run = ExperimentConfig {
                epsilon,
                seeds: cfg.sweep_seeds.clone(),
                ..cfg.clone()
            };
            let arm = run_experiment(&run, &[recipe])?.arms.remove(0);
            Ok(SweepPoint {
                epsilon,
                mean: arm.mean,
                std: arm.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .fold(&points[0], |b, p| if p.mean > b.mean { p } else { b });
    Ok(SweepReport {
        recipe: recipe.to_string(),
        seeds: cfg.sweep_seeds.clone(),
        selected_epsilon: best.epsilon,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Architecture;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = KeywordTaskConfig {
            vocab_size: 30,
            seq_len: 5,
            num_classes: 2,
            keywords_per_class: 1,
            n_train: 16,
            n_unlabeled: 32,
            n_test: 32,
            ..cfg.task
        };
        cfg.teacher.arch = Architecture::new(4, vec![6]);
        cfg.teacher.steps = 30;
        cfg.teacher.batch_size = 8;
        cfg.student.student = Architecture::new(4, vec![3]);
        cfg.student.steps = 10;
        cfg.student.batch_size = 8;
        cfg.seeds = vec![1, 2];
        cfg.sweep_seeds = vec![7];
        cfg.epsilon_grid = vec![0.1, 0.01, 0.1];
        cfg
    }

    #[test]
    fn recipe_names() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.recipe("kd").unwrap().is_empty());
        let r = cfg.recipe("augpro-mix+augpro-fgsm-r").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1], AugSpec::AugproFgsm(cfg.fgsm(SignMode::Random)));
        assert!(cfg.recipe("nope").is_err());
    }

    #[test]
    fn experiment_is_deterministic_across_thread_counts() {
        let cfg = tiny();
        let recipes = ["kd", "augpro-mix+augpro-fgsm"];
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| run_experiment(&cfg, &recipes).unwrap());
        let b = run_experiment(&cfg, &recipes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.arms.len(), 2);
        assert_eq!(a.arms[0].accuracies.len(), 2);
    }

    #[test]
    fn sweep_dedups_grid_and_selects_a_grid_value() {
        let r = sweep_epsilon(&tiny(), "augpro-fgsm").unwrap();
        assert_eq!(r.points.iter().map(|p| p.epsilon).collect::<Vec<_>>(), vec![0.01, 0.1]);
        assert!(r.points.iter().any(|p| p.epsilon == r.selected_epsilon));
    }
}
