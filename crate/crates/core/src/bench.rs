//! Wall-clock scaling of cosine projection with vocabulary size.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{project_naive, project_to_tokens, EmbeddingOwner, EmbeddingTable, SeqEmbeddings};
use crate::error::{ensure, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub vocab_sizes: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vocab_sizes: vec![1024, 2048, 4096, 8192],
            batch: 8,
            seq_len: 16,
            dim: 32,
            reps: 9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub vocab_size: usize,
    pub median_seconds: f64,
    /// Median time relative to the previous row's.
    pub ratio: Option<f64>,
    /// Whether the timed projection agreed with the naive oracle.
    pub spot_check: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times [`project_to_tokens`] `reps` times per vocabulary size after one
/// warm-up run, and checks the first result against [`project_naive`].
pub fn bench_projection(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(!cfg.vocab_sizes.is_empty(), "no vocabulary sizes given");
    ensure!(cfg.reps >= 1, "reps must be >= 1");
    ensure!(cfg.batch >= 1 && cfg.seq_len >= 1 && cfg.dim >= 1, "batch, seq_len and dim must be >= 1");
    let mut rows: Vec<BenchRow> = Vec::with_capacity(cfg.vocab_sizes.len());
    for (i, &z) in cfg.vocab_sizes.iter().enumerate() {
        let mut rng = substream(cfg.seed, Stream::Data, i as u64);
        let table = EmbeddingTable::random(z, cfg.dim, EmbeddingOwner::Teacher, &mut rng)?;
        let n = cfg.batch * cfg.seq_len;
        let data = (0..n * cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reps = SeqEmbeddings::new(cfg.batch, cfg.seq_len, Matrix::from_vec(n, cfg.dim, data)?)?;
        let first = project_to_tokens(&reps, &table)?;
        let spot_check = first == project_naive(&reps, &table)?;
        let times = (0..cfg.reps)
            .map(|_| {
                let t = Instant::now();
                let out = project_to_tokens(&reps, &table)?;
                let dt = t.elapsed().as_secs_f64();
                std::hint::black_box(out);
                Ok(dt)
            })
            .collect::<Result<Vec<_>>>()?;
        let median_seconds = median(times);
        let ratio = rows.last().map(|p| median_seconds / p.median_seconds);
        rows.push(BenchRow {
            vocab_size: z,
            median_seconds,
            ratio,
            spot_check,
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "vocab_size,median_seconds,ratio_to_previous,spot_check";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.vocab_size,
            r.median_seconds,
            r.ratio.map(|v| v.to_string()).unwrap_or_default(),
            if r.spot_check { "ok" } else { "mismatch" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_size_and_spot_check_passes() {
        let cfg = BenchConfig {
            vocab_sizes: vec![64, 128],
            batch: 2,
            seq_len: 3,
            dim: 4,
            reps: 3,
            seed: 1,
        };
        let rows = bench_projection(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.spot_check));
        assert!(rows[0].ratio.is_none() && rows[1].ratio.is_some());
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(BENCH_HEADER));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
