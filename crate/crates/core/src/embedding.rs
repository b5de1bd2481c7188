//! Vocabulary, embedding tables and projection of continuous
//! representations back onto tokens.
//!
//! Projection maps every query vector to the vocabulary entry whose
//! embedding row scores highest under the chosen [`Similarity`]. All
//! projection paths (naive, blocked, parallel) score each (query, token)
//! pair with the same arithmetic and break ties towards the lowest token id,
//! so they return identical batches.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{dot, norm, Matrix};

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.1;

/// Rows with norm below this are redrawn during initialisation.
pub const MIN_ROW_NORM: f64 = 1e-6;

/// Dense token ids `0..size` with optional display strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    names: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        ensure!(size >= 2, "vocabulary needs at least 2 tokens, got {size}");
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut v = Self::new(names.len())?;
        v.names = Some(names);
        Ok(v)
    }

    /// One display string per line; line number (from 0) is the token id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_names(text.lines().map(str::to_owned).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn display(&self, id: u32) -> String {
        match &self.names {
            Some(names) => names[id as usize].clone(),
            None => format!("<{id}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingOwner {
    Teacher,
    Student,
}

/// `Z × H` token embedding matrix. No row is all-zero, so cosine similarity
/// against every row is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct EmbeddingTable {
    owner: EmbeddingOwner,
    table: Matrix,
}

impl EmbeddingTable {
    pub fn new(table: Matrix, owner: EmbeddingOwner) -> Result<Self> {
        ensure!(table.rows() >= 2, "embedding table needs at least 2 rows");
        ensure!(table.cols() >= 1, "embedding dimension must be >= 1");
        ensure!(table.is_finite(), "embedding entries must be finite");
        for r in 0..table.rows() {
            ensure!(norm(table.row(r)) > 0.0, "embedding row {r} is all zero");
        }
        Ok(Self { owner, table })
    }

    /// Independent uniform(-0.1, 0.1) entries; rows with norm below
    /// [`MIN_ROW_NORM`] are redrawn.
    pub fn random<R: Rng + ?Sized>(
        vocab_size: usize,
        dim: usize,
        owner: EmbeddingOwner,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(vocab_size >= 2, "vocabulary needs at least 2 tokens");
        ensure!(dim >= 1, "embedding dimension must be >= 1");
        let dist = Uniform::new(-INIT_SCALE, INIT_SCALE).expect("finite bounds");
        let mut table = Matrix::zeros(vocab_size, dim);
        for r in 0..vocab_size {
            loop {
                for v in table.row_mut(r) {
                    *v = dist.sample(rng);
                }
                if norm(table.row(r)) >= MIN_ROW_NORM {
                    break;
                }
            }
        }
        Self::new(table, owner)
    }

    pub fn owner(&self) -> EmbeddingOwner {
        self.owner
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.table
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.table.row(id as usize)
    }

    /// Mutable parameter access for training.
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.table
    }

    fn row_norms(&self) -> Vec<f64> {
        (0..self.vocab_size()).map(|r| norm(self.table.row(r))).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    version: u32,
    owner: EmbeddingOwner,
    dims: Vec<usize>,
    table: Matrix,
}

impl From<EmbeddingTable> for TableFile {
    fn from(t: EmbeddingTable) -> Self {
        TableFile {
            version: TABLE_FORMAT_VERSION,
            owner: t.owner,
            dims: vec![t.table.rows(), t.table.cols()],
            table: t.table,
        }
    }
}

impl TryFrom<TableFile> for EmbeddingTable {
    type Error = Error;

    fn try_from(f: TableFile) -> Result<Self> {
        ensure!(
            f.version == TABLE_FORMAT_VERSION,
            "unsupported embedding format version {}",
            f.version
        );
        let (rows, cols) = f.table.shape();
        ensure!(
            f.dims == [rows, cols],
            "declared dims {:?} do not match table {rows}x{cols}",
            f.dims
        );
        let table = Matrix::from_vec(rows, cols, f.table.into_vec())?;
        EmbeddingTable::new(table, f.owner)
    }
}

/// `B × L` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenBatch {
    batch: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        ensure!(seq_len >= 1, "sequence length must be >= 1");
        ensure!(
            tokens.len() == batch * seq_len,
            "token count {} != {}x{}",
            tokens.len(),
            batch,
            seq_len
        );
        Ok(Self {
            batch,
            seq_len,
            tokens,
        })
    }

    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        ensure!(!seqs.is_empty(), "empty token batch");
        let seq_len = seqs[0].as_ref().len();
        ensure!(
            seqs.iter().all(|s| s.as_ref().len() == seq_len),
            "ragged sequences in token batch"
        );
        Self::new(
            seqs.len(),
            seq_len,
            seqs.iter().flat_map(|s| s.as_ref().iter().copied()).collect(),
        )
    }

    /// Checks that every id is below `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some((pos, &id)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= vocab_size)
        {
            return Err(Error::validation(format!(
                "token id {id} at position {pos} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.seq_len)
    }

    /// Batch made of the given sequence indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<TokenBatch> {
        ensure!(
            indices.iter().all(|&i| i < self.batch),
            "sequence index out of range"
        );
        let tokens = indices
            .iter()
            .flat_map(|&i| self.sequence(i).iter().copied())
            .collect();
        TokenBatch::new(indices.len(), self.seq_len, tokens)
    }
}

/// Per-token representations of a batch: `B × L × H`, stored as a
/// `(B·L) × H` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqEmbeddings {
    batch: usize,
    seq_len: usize,
    values: Matrix,
}

impl SeqEmbeddings {
    pub fn new(batch: usize, seq_len: usize, values: Matrix) -> Result<Self> {
        ensure!(seq_len >= 1, "sequence length must be >= 1");
        ensure!(
            values.rows() == batch * seq_len,
            "representation rows {} != {}x{}",
            values.rows(),
            batch,
            seq_len
        );
        Ok(Self {
            batch,
            seq_len,
            values,
        })
    }

    pub fn zeros(batch: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            batch,
            seq_len,
            values: Matrix::zeros(batch * seq_len, dim),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// The `L × H` block of sequence `i`.
    pub fn sequence(&self, i: usize) -> Matrix {
        let h = self.dim();
        let start = i * self.seq_len * h;
        let data = self.values.as_slice()[start..start + self.seq_len * h].to_vec();
        Matrix::from_vec(self.seq_len, h, data).expect("sub-block of a finite matrix")
    }

    pub fn from_sequences(blocks: &[Matrix]) -> Result<Self> {
        ensure!(!blocks.is_empty(), "no sequences");
        let (l, h) = blocks[0].shape();
        ensure!(
            blocks.iter().all(|b| b.shape() == (l, h)),
            "sequence blocks differ in shape"
        );
        let data = blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect();
        Self::new(blocks.len(), l, Matrix::from_vec(blocks.len() * l, h, data)?)
    }

    /// Mean over the `L` positions of each sequence: `B × H`.
    pub fn mean_pool(&self) -> Matrix {
        let h = self.dim();
        let mut out = Matrix::zeros(self.batch, h);
        let inv = 1.0 / self.seq_len as f64;
        for b in 0..self.batch {
            let dst = out.row_mut(b);
            for l in 0..self.seq_len {
                for (d, v) in dst.iter_mut().zip(self.values.row(b * self.seq_len + l)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        out
    }

    /// Spreads a pooled gradient back over positions (each gets `1/L`).
    pub fn unpool_grad(pooled: &Matrix, seq_len: usize) -> SeqEmbeddings {
        let (batch, h) = pooled.shape();
        let inv = 1.0 / seq_len as f64;
        let mut values = Matrix::zeros(batch * seq_len, h);
        for b in 0..batch {
            for l in 0..seq_len {
                for (d, v) in values.row_mut(b * seq_len + l).iter_mut().zip(pooled.row(b)) {
                    *d = v * inv;
                }
            }
        }
        SeqEmbeddings {
            batch,
            seq_len,
            values,
        }
    }
}

/// Looks up every token of `batch` in `table`.
pub fn embed(table: &EmbeddingTable, batch: &TokenBatch) -> Result<SeqEmbeddings> {
    batch.validate(table.vocab_size())?;
    let h = table.dim();
    let mut data = Vec::with_capacity(batch.tokens().len() * h);
    for &id in batch.tokens() {
        data.extend_from_slice(table.row(id));
    }
    SeqEmbeddings::new(
        batch.batch_size(),
        batch.seq_len(),
        Matrix::from_vec(batch.tokens().len(), h, data)?,
    )
}

/// Scoring rule used to pick the nearest token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Raw inner product against unnormalised rows.
    Dot,
}

#[inline]
fn score(sim: Similarity, q: &[f64], q_norm: f64, row: &[f64], row_norm: f64) -> f64 {
    match sim {
        Similarity::Cosine => {
            if q_norm == 0.0 || row_norm == 0.0 {
                f64::NEG_INFINITY
            } else {
                dot(q, row) / (q_norm * row_norm)
            }
        }
        Similarity::Dot => dot(q, row),
    }
}

/// `u·v / (‖u‖‖v‖)`; `-∞` when either vector has zero norm, so such a pair
/// is never selected by an argmax.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_similarity length mismatch");
    score(Similarity::Cosine, u, norm(u), v, norm(v))
}

fn validate_reps(reps: &SeqEmbeddings, table: &EmbeddingTable) -> Result<()> {
    ensure!(
        reps.dim() == table.dim(),
        "representation width {} != embedding width {}",
        reps.dim(),
        table.dim()
    );
    ensure!(reps.values().is_finite(), "representations must be finite");
    Ok(())
}

fn best_token(sim: Similarity, q: &[f64], table: &EmbeddingTable, norms: &[f64]) -> u32 {
    let q_norm = norm(q);
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (w, &row_norm) in norms.iter().enumerate() {
        let s = score(sim, q, q_norm, table.row(w as u32), row_norm);
        if s > best.0 {
            best = (s, w as u32);
        }
    }
    best.1
}

/// Cosine projection, parallel over query positions.
pub fn project_to_tokens(reps: &SeqEmbeddings, table: &EmbeddingTable) -> Result<TokenBatch> {
    project_with(reps, table, Similarity::Cosine)
}

/// Projection under `sim`, parallel over the `B·L` query positions. Output
/// order is positional, so the result does not depend on scheduling.
pub fn project_with(
    reps: &SeqEmbeddings,
    table: &EmbeddingTable,
    sim: Similarity,
) -> Result<TokenBatch> {
    validate_reps(reps, table)?;
    let norms = table.row_norms();
    let tokens: Vec<u32> = (0..reps.values().rows())
        .into_par_iter()
        .map(|r| best_token(sim, reps.values().row(r), table, &norms))
        .collect();
    TokenBatch::new(reps.batch_size(), reps.seq_len(), tokens)
}

/// Sequential projection that sweeps the vocabulary in tiles of `block`
/// rows, updating a running best per query. Returns exactly what
/// [`project_with`] returns.
pub fn project_blocked(
    reps: &SeqEmbeddings,
    table: &EmbeddingTable,
    block: usize,
    sim: Similarity,
) -> Result<TokenBatch> {
    ensure!(block >= 1, "block size must be >= 1");
    validate_reps(reps, table)?;
    let norms = table.row_norms();
    let queries = reps.values();
    let q_norms: Vec<f64> = (0..queries.rows()).map(|r| norm(queries.row(r))).collect();
    let mut best = vec![(f64::NEG_INFINITY, 0u32); queries.rows()];
    let z = table.vocab_size();
    for start in (0..z).step_by(block) {
        let end = (start + block).min(z);
        for (r, slot) in best.iter_mut().enumerate() {
            let q = queries.row(r);
            for w in start..end {
                let s = score(sim, q, q_norms[r], table.row(w as u32), norms[w]);
                if s > slot.0 {
                    *slot = (s, w as u32);
                }
            }
        }
    }
    TokenBatch::new(
        reps.batch_size(),
        reps.seq_len(),
        best.into_iter().map(|(_, w)| w).collect(),
    )
}

/// Reference projection: a plain double loop over positions and tokens
/// using [`cosine_similarity`], first maximum wins.
pub fn project_naive(reps: &SeqEmbeddings, table: &EmbeddingTable) -> Result<TokenBatch> {
    validate_reps(reps, table)?;
    let mut tokens = Vec::with_capacity(reps.values().rows());
    for r in 0..reps.values().rows() {
        let q = reps.values().row(r);
        let mut best = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for w in 0..table.vocab_size() as u32 {
            let s = cosine_similarity(q, table.row(w));
            if s > best_score {
                best_score = s;
                best = w;
            }
        }
        tokens.push(best);
    }
    TokenBatch::new(reps.batch_size(), reps.seq_len(), tokens)
}

/// The `k` tokens most cosine-similar to `token_id` (excluding itself),
/// most similar first, ties towards the lowest id.
pub fn knn_neighbors(table: &EmbeddingTable, token_id: u32, k: usize) -> Result<Vec<u32>> {
    let z = table.vocab_size();
    ensure!((token_id as usize) < z, "token id {token_id} out of range");
    ensure!(k >= 1 && k < z, "k must satisfy 1 <= k < {z}, got {k}");
    let q = table.row(token_id);
    let mut scored: Vec<(f64, u32)> = (0..z as u32)
        .filter(|&w| w != token_id)
        .map(|w| (cosine_similarity(q, table.row(w)), w))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, w)| w).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::new(Matrix::from_rows(rows).unwrap(), EmbeddingOwner::Teacher).unwrap()
    }

    #[test]
    fn vocabulary_needs_two_tokens() {
        assert!(Vocabulary::new(1).is_err());
        assert_eq!(Vocabulary::new(5).unwrap().size(), 5);
    }

    #[test]
    fn table_rejects_zero_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(EmbeddingTable::new(m, EmbeddingOwner::Student).is_err());
    }

    #[test]
    fn random_table_has_no_zero_rows_and_stays_in_range() {
        let t = EmbeddingTable::random(300, 4, EmbeddingOwner::Student, &mut seeded(1)).unwrap();
        for r in 0..300 {
            assert!(norm(t.row(r)) >= MIN_ROW_NORM);
            assert!(t.row(r).iter().all(|v| v.abs() <= INIT_SCALE));
        }
    }

    #[test]
    fn embed_looks_up_rows() {
        let t = table(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.5]]);
        let b = TokenBatch::new(1, 3, vec![0, 2, 2]).unwrap();
        let e = embed(&t, &b).unwrap();
        assert_eq!(e.values().row(0), &[1.0, 2.0]);
        assert_eq!(e.values().row(1), e.values().row(2));
        assert!(embed(&t, &TokenBatch::new(1, 1, vec![3]).unwrap()).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[0.3, -2.0], &[-0.3, 2.0]) + 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn exact_row_projects_to_its_token() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let reps = embed(&t, &TokenBatch::new(1, 3, vec![2, 0, 1]).unwrap()).unwrap();
        let out = project_to_tokens(&reps, &t).unwrap();
        assert_eq!(out.tokens(), &[2, 0, 1]);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        // Rows 1 and 2 are parallel, so they tie for every query.
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]]);
        let reps = SeqEmbeddings::new(1, 1, Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(project_to_tokens(&reps, &t).unwrap().tokens(), &[1]);
        assert_eq!(project_blocked(&reps, &t, 1, Similarity::Cosine).unwrap().tokens(), &[1]);
        // Under raw dot product the longer row wins.
        assert_eq!(project_with(&reps, &t, Similarity::Dot).unwrap().tokens(), &[2]);
    }

    #[test]
    fn zero_query_maps_to_token_zero() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let reps = SeqEmbeddings::zeros(1, 1, 2);
        assert_eq!(project_to_tokens(&reps, &t).unwrap().tokens(), &[0]);
    }

    #[test]
    fn projection_rejects_width_mismatch_and_nonfinite() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let reps = SeqEmbeddings::zeros(1, 1, 3);
        assert!(project_to_tokens(&reps, &t).is_err());
        assert!(project_blocked(&reps, &t, 0, Similarity::Cosine).is_err());
    }

    #[test]
    fn knn_on_constructed_fixture() {
        let t = table(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.05, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(knn_neighbors(&t, 0, 1).unwrap(), vec![2]);
        let all = knn_neighbors(&t, 1, 3).unwrap();
        assert!(!all.contains(&1));
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 2, 3]);
        assert!(knn_neighbors(&t, 0, 0).is_err());
        assert!(knn_neighbors(&t, 0, 4).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let t = EmbeddingTable::random(10, 3, EmbeddingOwner::Teacher, &mut seeded(4)).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<EmbeddingTable>(&json).unwrap(), t);
    }

    #[test]
    fn pooling_and_unpooling() {
        let e = SeqEmbeddings::new(
            1,
            2,
            Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(e.mean_pool().row(0), &[2.0, 4.0]);
        let g = SeqEmbeddings::unpool_grad(&Matrix::from_rows(&[vec![2.0, -4.0]]).unwrap(), 2);
        assert_eq!(g.values().row(1), &[1.0, -2.0]);
    }
}
