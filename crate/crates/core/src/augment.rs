//! Augmentation operators: embedding-level MixUp and FGSM, their
//! projected (token-level) counterparts, and KNN token replacement.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, knn_neighbors, project_with, EmbeddingTable, SeqEmbeddings, Similarity, TokenBatch};
use crate::error::{ensure, Error, Result};
use crate::tensor::{validate_distribution, Matrix};

/// How sequences in a batch are paired for MixUp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Sequence `i` with `i + B/2`, giving `B/2` mixes.
    #[default]
    ShiftHalf,
    /// Sequence `i` with `π(i)` for a uniform permutation `π`, giving `B` mixes.
    Shuffled,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift-half" => Ok(Pairing::ShiftHalf),
            "shuffled" => Ok(Pairing::Shuffled),
            other => Err(Error::validation(format!("unknown pairing {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub lambda: f64,
    #[serde(default)]
    pub pairing: Pairing,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            pairing: Pairing::ShiftHalf,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda),
            "lambda must lie in [0, 1], got {}",
            self.lambda
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignMode {
    /// `+ε·sign(∇)`: the usual FGSM step.
    #[default]
    Ascent,
    /// `-ε·sign(∇)`.
    Descent,
    /// `+ε·s` with `s` uniform on {-1, +1}, ignoring the gradient.
    Random,
}

impl std::str::FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascent" => Ok(SignMode::Ascent),
            "descent" => Ok(SignMode::Descent),
            "random" => Ok(SignMode::Random),
            other => Err(Error::validation(format!("unknown sign mode {other:?}"))),
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgsmConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub sign_mode: SignMode,
}

impl Default for FgsmConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            sign_mode: SignMode::Ascent,
        }
    }
}

impl FgsmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epsilon > 0.0 && self.epsilon.is_finite(),
            "epsilon must be > 0, got {}",
            self.epsilon
        );
        Ok(())
    }
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        validate_distribution(&p)?;
        Ok(Self(p))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        ensure!(class < num_classes, "class {class} out of range");
        let mut p = vec![0.0; num_classes];
        p[class] = 1.0;
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// `λ·e1 + (1-λ)·e2`, elementwise.
pub fn mixup_embed(e1: &Matrix, e2: &Matrix, lambda: f64) -> Result<Matrix> {
    ensure!(
        e1.shape() == e2.shape(),
        "mixup shape mismatch: {:?} vs {:?}",
        e1.shape(),
        e2.shape()
    );
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    let data = e1
        .as_slice()
        .iter()
        .zip(e2.as_slice())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Matrix::from_vec(e1.rows(), e1.cols(), data)
}

pub fn mixup_label(y1: &SoftLabel, y2: &SoftLabel, lambda: f64) -> Result<SoftLabel> {
    ensure!(y1.0.len() == y2.0.len(), "label class counts differ");
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    SoftLabel::new(
        y1.0.iter()
            .zip(&y2.0)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    )
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One FGSM step on `e` given the loss gradient `grad`. `sign(0) = 0`, so
/// zero-gradient coordinates stay put in the ascent and descent modes.
pub fn fgsm_perturb<R: Rng + ?Sized>(
    e: &Matrix,
    grad: &Matrix,
    cfg: &FgsmConfig,
    rng: &mut R,
) -> Result<Matrix> {
    cfg.validate()?;
    ensure!(
        e.shape() == grad.shape(),
        "fgsm shape mismatch: {:?} vs {:?}",
        e.shape(),
        grad.shape()
    );
    let eps = cfg.epsilon;
    let data = match cfg.sign_mode {
        SignMode::Ascent => e
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(x, g)| x + eps * sign(*g))
            .collect(),
        SignMode::Descent => e
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(x, g)| x - eps * sign(*g))
            .collect(),
        SignMode::Random => e
            .as_slice()
            .iter()
            .map(|x| if rng.random::<bool>() { x + eps } else { x - eps })
            .collect(),
    };
    Matrix::from_vec(e.rows(), e.cols(), data)
}

/// Index pairs `(first, second)` for mixing within a batch of `batch_size`.
pub fn mix_pairs<R: Rng + ?Sized>(
    batch_size: usize,
    pairing: Pairing,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    ensure!(batch_size >= 1, "empty batch");
    match pairing {
        Pairing::ShiftHalf => {
            ensure!(
                batch_size.is_multiple_of(2),
                "shift-half pairing needs an even batch, got {batch_size}"
            );
            let half = batch_size / 2;
            Ok((0..half).map(|i| (i, i + half)).collect())
        }
        Pairing::Shuffled => {
            let mut perm: Vec<usize> = (0..batch_size).collect();
            perm.shuffle(rng);
            Ok(perm.into_iter().enumerate().collect())
        }
    }
}

/// Mixes whole sequences: output `j` is `λ·seq(pairs[j].0) + (1-λ)·seq(pairs[j].1)`.
pub fn mixup_sequences(
    emb: &SeqEmbeddings,
    pairs: &[(usize, usize)],
    lambda: f64,
) -> Result<SeqEmbeddings> {
    ensure!(!pairs.is_empty(), "no pairs to mix");
    let blocks = pairs
        .iter()
        .map(|&(a, b)| {
            ensure!(
                a < emb.batch_size() && b < emb.batch_size(),
                "pair index out of range"
            );
            mixup_embed(&emb.sequence(a), &emb.sequence(b), lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    SeqEmbeddings::from_sequences(&blocks)
}

/// MixUp in `table`'s embedding space followed by projection back onto
/// `table`. Returns tokens only: projection need not preserve the label.
pub fn augpro_mix<R: Rng + ?Sized>(
    batch: &TokenBatch,
    cfg: &MixupConfig,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<TokenBatch> {
    augpro_mix_with(batch, cfg, table, Similarity::Cosine, rng)
}

pub fn augpro_mix_with<R: Rng + ?Sized>(
    batch: &TokenBatch,
    cfg: &MixupConfig,
    table: &EmbeddingTable,
    sim: Similarity,
    rng: &mut R,
) -> Result<TokenBatch> {
    cfg.validate()?;
    let pairs = mix_pairs(batch.batch_size(), cfg.pairing, rng)?;
    let emb = embed(table, batch)?;
    let mixed = mixup_sequences(&emb, &pairs, cfg.lambda)?;
    project_with(&mixed, table, sim)
}

/// FGSM on `embeddings` (with loss gradient `grad`) followed by projection
/// onto `table`. Returns tokens only.
pub fn augpro_fgsm<R: Rng + ?Sized>(
    embeddings: &SeqEmbeddings,
    grad: &SeqEmbeddings,
    table: &EmbeddingTable,
    cfg: &FgsmConfig,
    rng: &mut R,
) -> Result<TokenBatch> {
    augpro_fgsm_with(embeddings, grad, table, cfg, Similarity::Cosine, rng)
}

pub fn augpro_fgsm_with<R: Rng + ?Sized>(
    embeddings: &SeqEmbeddings,
    grad: &SeqEmbeddings,
    table: &EmbeddingTable,
    cfg: &FgsmConfig,
    sim: Similarity,
    rng: &mut R,
) -> Result<TokenBatch> {
    let perturbed = fgsm_perturb(embeddings.values(), grad.values(), cfg, rng)?;
    let reps = SeqEmbeddings::new(embeddings.batch_size(), embeddings.seq_len(), perturbed)?;
    project_with(&reps, table, sim)
}

pub const DEFAULT_KNN_K: usize = 15;
pub const DEFAULT_KNN_PORTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub portion: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_KNN_K,
            portion: DEFAULT_KNN_PORTION,
        }
    }
}

/// Replaces `round(portion·L)` uniformly chosen positions of every sequence
/// with a uniform draw from that token's `k` nearest neighbours.
pub fn knn_replace<R: Rng + ?Sized>(
    batch: &TokenBatch,
    k: usize,
    portion: f64,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<TokenBatch> {
    ensure!(
        portion > 0.0 && portion <= 1.0,
        "portion must lie in (0, 1], got {portion}"
    );
    let z = table.vocab_size();
    ensure!(k >= 1 && k < z, "k must satisfy 1 <= k < {z}, got {k}");
    batch.validate(z)?;
    let l = batch.seq_len();
    let count = (portion * l as f64).round() as usize;
    let mut neighbours: HashMap<u32, Vec<u32>> = HashMap::new();
    let mut tokens = batch.tokens().to_vec();
    for seq in tokens.chunks_mut(l) {
        for pos in index::sample(rng, l, count) {
            let tok = seq[pos];
            let nn = match neighbours.get(&tok) {
                Some(nn) => nn,
                None => neighbours.entry(tok).or_insert(knn_neighbors(table, tok, k)?),
            };
            seq[pos] = nn[rng.random_range(0..nn.len())];
        }
    }
    TokenBatch::new(batch.batch_size(), l, tokens)
}
