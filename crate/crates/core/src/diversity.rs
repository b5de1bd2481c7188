//! Monte Carlo estimates of how much MixUp- and FGSM-style augmentation
//! grows the number of distinct training points on the hypercube
//! `{-1, +1}^(2·log2 n)`, and the generalization-error gap that growth
//! implies for a memorizing learner.
//!
//! Points are bit-vectors: bit `j` set means coordinate `j` is `+1`.

use std::collections::HashSet;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{substream, Rng, Stream};

pub type Point = u64;

/// Standard deviation of the coordinate noise in the FGSM construction
/// (variance 4).
pub const FGSM_NOISE_STD: f64 = 2.0;

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercubeConfig {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
}

impl HypercubeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n >= 2 && self.n.is_power_of_two(),
            "n must be a power of two >= 2, got {}",
            self.n
        );
        ensure!(self.dim() <= 64, "n = {} is too large for 64-bit points", self.n);
        ensure!(self.trials >= 1, "trials must be >= 1");
        Ok(())
    }

    /// `2·log2(n)`, so the universe has exactly `n²` points.
    pub fn dim(&self) -> u32 {
        2 * self.n.trailing_zeros()
    }
}

fn mask(dim: u32) -> Point {
    if dim >= 64 {
        !0
    } else {
        (1 << dim) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mix,
    Fgsm,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix" => Ok(Variant::Mix),
            "fgsm" => Ok(Variant::Fgsm),
            other => Err(Error::validation(format!("unknown variant {other:?}"))),
        }
    }
}

/// `n` i.i.d. uniform points, duplicates kept.
pub fn sample_training_set(cfg: &HypercubeConfig, rng: &mut Rng) -> Vec<Point> {
    let m = mask(cfg.dim());
    (0..cfg.n).map(|_| rng.random::<u64>() & m).collect()
}

/// One point per consecutive pair: coordinates where the pair agrees are
/// copied, the rest drawn uniformly.
pub fn construct_mix_aug(points: &[Point], dim: u32, rng: &mut Rng) -> Result<Vec<Point>> {
    ensure!(points.len().is_multiple_of(2), "mix construction needs an even number of points");
    let m = mask(dim);
    Ok(points
        .chunks_exact(2)
        .map(|p| {
            let agree = !(p[0] ^ p[1]) & m;
            (p[0] & agree) | (rng.random::<u64>() & !agree & m)
        })
        .collect())
}

/// `w(j) = sign(x(j) + g)` with `g ~ N(0, 4)` per coordinate; `sign(0) = +1`.
pub fn construct_fgsm_aug(points: &[Point], dim: u32, rng: &mut Rng) -> Vec<Point> {
    let normal = Normal::new(0.0, FGSM_NOISE_STD).expect("valid normal");
    points
        .iter()
        .map(|&p| {
            let mut w = 0;
            for j in 0..dim {
                let x = if p >> j & 1 == 1 { 1.0 } else { -1.0 };
                if x + normal.sample(rng) >= 0.0 {
                    w |= 1 << j;
                }
            }
            w
        })
        .collect()
}

pub fn distinct_count(points: &[Point]) -> usize {
    points.iter().collect::<HashSet<_>>().len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialResult {
    pub distinct_train: usize,
    pub distinct_aug: usize,
}

/// One trial; its generator depends only on `(seed, trial)`.
pub fn run_trial(cfg: &HypercubeConfig, variant: Variant, trial: u64) -> TrialResult {
    let mut rng = substream(cfg.seed, Stream::Simulation, trial);
    let mut points = sample_training_set(cfg, &mut rng);
    let distinct_train = distinct_count(&points);
    let aug = match variant {
        Variant::Mix => construct_mix_aug(&points, cfg.dim(), &mut rng).expect("n is even"),
        Variant::Fgsm => construct_fgsm_aug(&points, cfg.dim(), &mut rng),
    };
    points.extend(aug);
    TrialResult {
        distinct_train,
        distinct_aug: distinct_count(&points),
    }
}

pub fn run_trials(cfg: &HypercubeConfig, variant: Variant) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    Ok((0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, variant, t))
        .collect())
}

/// Sample mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci95: [f64; 2],
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let half = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            Z95 * (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            ci95: [mean - half, mean + half],
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci95[0] <= x && x <= self.ci95[1]
    }
}

/// `n²(1 - (1 - 1/n²)^n)`: expected number of distinct points among `n`
/// uniform draws from `n²`.
pub fn exact_expected_train(n: usize) -> f64 {
    let n = n as f64;
    let n2 = n * n;
    -n2 * (n * (-1.0 / n2).ln_1p()).exp_m1()
}

/// Error of the memorizing learner that has seen `expected_distinct` points
/// on average: `1/2 - E/(2n²)`.
pub fn memorizer_error(n: usize, expected_distinct: f64) -> f64 {
    let n = n as f64;
    0.5 - expected_distinct / (2.0 * n * n)
}

/// `(error_train - error_aug)` divided by its limiting scale: `1/(4n)` for
/// mix, `1/(2n)` for fgsm.
fn normalized_gap(n: usize, variant: Variant, t: &TrialResult) -> f64 {
    let diff = (t.distinct_aug - t.distinct_train) as f64;
    let n = n as f64;
    // error gap = diff/(2n²); times 4n or 2n.
    match variant {
        Variant::Mix => 2.0 * diff / n,
        Variant::Fgsm => diff / n,
    }
}

pub fn estimate_ratio(cfg: &HypercubeConfig, variant: Variant) -> Result<Estimate> {
    Ok(simulate(cfg, variant)?.ratio())
}

pub fn estimate_error_gap(cfg: &HypercubeConfig, variant: Variant) -> Result<Estimate> {
    Ok(simulate(cfg, variant)?.gap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub variant: Variant,
    pub n: usize,
    pub trials: usize,
    pub mean_ratio: f64,
    pub ratio_ci95: [f64; 2],
    pub normalized_gap: f64,
    pub gap_ci95: [f64; 2],
    #[serde(rename = "exact_E_train")]
    pub exact_e_train: f64,
    pub mean_train: f64,
    pub train_ci95: [f64; 2],
}

impl SimulationReport {
    pub fn ratio(&self) -> Estimate {
        Estimate {
            mean: self.mean_ratio,
            ci95: self.ratio_ci95,
        }
    }

    pub fn gap(&self) -> Estimate {
        Estimate {
            mean: self.normalized_gap,
            ci95: self.gap_ci95,
        }
    }

    pub fn train(&self) -> Estimate {
        Estimate {
            mean: self.mean_train,
            ci95: self.train_ci95,
        }
    }
}

/// Runs all trials once and summarizes ratio, gap and training-set size.
pub fn simulate(cfg: &HypercubeConfig, variant: Variant) -> Result<SimulationReport> {
    let results = run_trials(cfg, variant)?;
    let ratios: Vec<f64> = results
        .iter()
        .map(|t| t.distinct_aug as f64 / t.distinct_train as f64)
        .collect();
    let gaps: Vec<f64> = results.iter().map(|t| normalized_gap(cfg.n, variant, t)).collect();
    let train: Vec<f64> = results.iter().map(|t| t.distinct_train as f64).collect();
    let (r, g, e) = (
        Estimate::from_samples(&ratios),
        Estimate::from_samples(&gaps),
        Estimate::from_samples(&train),
    );
    Ok(SimulationReport {
        variant,
        n: cfg.n,
        trials: cfg.trials,
        mean_ratio: r.mean,
        ratio_ci95: r.ci95,
        normalized_gap: g.mean,
        gap_ci95: g.ci95,
        exact_e_train: exact_expected_train(cfg.n),
        mean_train: e.mean,
        train_ci95: e.ci95,
    })
}
