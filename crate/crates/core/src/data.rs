//! Synthetic keyword classification task, JSONL datasets and batch sampling.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TokenBatch;
use crate::error::{ensure, Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Validates every example against `meta`.
    pub fn new(meta: DatasetMeta, examples: Vec<Example>) -> Result<Self> {
        ensure!(meta.vocab_size >= 2, "vocabulary must have >= 2 tokens");
        ensure!(meta.num_classes >= 1, "need at least one class");
        for (i, ex) in examples.iter().enumerate() {
            check_example(ex, &meta).map_err(|m| Error::validation(format!("example {i}: {m}")))?;
        }
        Ok(Self { meta, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// All examples as one token batch.
    pub fn token_batch(&self) -> Result<TokenBatch> {
        ensure!(!self.is_empty(), "dataset is empty");
        TokenBatch::from_sequences(
            &self.examples.iter().map(|e| e.tokens.as_slice()).collect::<Vec<_>>(),
        )
    }

    /// Writes one JSON object per line plus the `.meta.json` sidecar.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.push(b'\n');
        }
        write_atomic(path, &out)?;
        write_json(&sidecar_path(path), &self.meta)
    }
}

fn check_example(ex: &Example, meta: &DatasetMeta) -> std::result::Result<(), String> {
    if ex.tokens.len() != meta.seq_len {
        return Err(format!(
            "sequence length {} != {}",
            ex.tokens.len(),
            meta.seq_len
        ));
    }
    if let Some(&bad) = ex.tokens.iter().find(|&&t| t as usize >= meta.vocab_size) {
        return Err(format!(
            "token id {bad} out of range for vocabulary of {}",
            meta.vocab_size
        ));
    }
    if ex.label >= meta.num_classes {
        return Err(format!(
            "label {} out of range for {} classes",
            ex.label, meta.num_classes
        ));
    }
    Ok(())
}

/// `data/train.jsonl` → `data/train.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Reads a JSONL dataset. The first line fixes the sequence length; token
/// ids must be below `vocab_size` and labels below `num_classes`. Errors
/// name the offending 1-based line.
pub fn load_jsonl(path: &Path, vocab_size: usize, num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut examples = Vec::new();
    let mut meta = DatasetMeta {
        vocab_size,
        num_classes,
        seq_len: 0,
        seed: None,
        generator: "jsonl".into(),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(raw).map_err(|e| parse_err(line, format!("malformed line: {e}")))?;
        if examples.is_empty() {
            if ex.tokens.is_empty() {
                return Err(parse_err(line, "empty token sequence".into()));
            }
            meta.seq_len = ex.tokens.len();
        }
        check_example(&ex, &meta).map_err(|m| parse_err(line, m))?;
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::validation(format!(
            "{}: dataset is empty",
            path.display()
        )));
    }
    Dataset::new(meta, examples)
}

/// Loads a dataset using its `.meta.json` sidecar for vocabulary size and
/// class count.
pub fn load_with_sidecar(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&sidecar_path(path))?;
    let mut ds = load_jsonl(path, meta.vocab_size, meta.num_classes)?;
    ensure!(
        ds.meta.seq_len == meta.seq_len,
        "{}: sequence length {} disagrees with sidecar {}",
        path.display(),
        ds.meta.seq_len,
        meta.seq_len
    );
    ds.meta = meta;
    Ok(ds)
}

/// Parameters of the keyword task.
///
/// Token ids `0..C·k` are keywords (class `c` owns `c·k..(c+1)·k`); the
/// rest form the filler pool. Each example is `L` filler tokens with one
/// keyword of its class planted at a uniform position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordTaskConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub n_train: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl KeywordTaskConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "need at least 2 classes");
        ensure!(
            self.vocab_size > 2 * self.num_classes,
            "vocabulary {} must exceed 2x the class count {}",
            self.vocab_size,
            self.num_classes
        );
        ensure!(self.keywords_per_class >= 1, "keywords_per_class must be >= 1");
        ensure!(
            self.num_classes * self.keywords_per_class < self.vocab_size,
            "keywords ({}) leave no filler tokens in a vocabulary of {}",
            self.num_classes * self.keywords_per_class,
            self.vocab_size
        );
        ensure!(self.seq_len >= 1, "sequence length must be >= 1");
        Ok(())
    }

    pub fn keyword_class(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (t < self.num_classes * self.keywords_per_class).then(|| t / self.keywords_per_class)
    }

    /// Labels an example by scanning for its keyword.
    pub fn oracle_label(&self, tokens: &[u32]) -> Option<usize> {
        tokens.iter().find_map(|&t| self.keyword_class(t))
    }
}

/// Generates train, unlabeled and test splits. No token sequence appears
/// twice across or within the splits.
pub fn gen_keyword_task(cfg: &KeywordTaskConfig) -> Result<(Dataset, Dataset, Dataset)> {
    cfg.validate()?;
    let n_keywords = cfg.num_classes * cfg.keywords_per_class;
    let pool = (cfg.vocab_size - n_keywords) as u32;
    let mut rng = substream(cfg.seed, Stream::Data, 0);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let total = cfg.n_train + cfg.n_unlabeled + cfg.n_test;
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        ensure!(
            attempts <= 100 * total.max(1),
            "could not draw {total} distinct examples from this task"
        );
        let label = rng.random_range(0..cfg.num_classes);
        let mut tokens: Vec<u32> = (0..cfg.seq_len)
            .map(|_| n_keywords as u32 + rng.random_range(0..pool))
            .collect();
        let keyword = label * cfg.keywords_per_class + rng.random_range(0..cfg.keywords_per_class);
        let pos = rng.random_range(0..cfg.seq_len);
        tokens[pos] = keyword as u32;
        if seen.insert(tokens.clone()) {
            all.push(Example { tokens, label });
        }
    }
    let meta = |split: &str| DatasetMeta {
        vocab_size: cfg.vocab_size,
        seq_len: cfg.seq_len,
        num_classes: cfg.num_classes,
        seed: Some(cfg.seed),
        generator: format!("keyword-task/{split}/k{}", cfg.keywords_per_class),
    };
    let test = all.split_off(cfg.n_train + cfg.n_unlabeled);
    let unlabeled = all.split_off(cfg.n_train);
    Ok((
        Dataset::new(meta("train"), all)?,
        Dataset::new(meta("unlabeled"), unlabeled)?,
        Dataset::new(meta("test"), test)?,
    ))
}

/// Uniform sampling with replacement; the batch for step `t` depends only
/// on `(seed, t)`.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        ensure!(!dataset.is_empty(), "cannot sample from an empty dataset");
        ensure!(batch_size >= 1, "batch size must be >= 1");
        ensure!(
            batch_size <= dataset.len(),
            "batch size {batch_size} exceeds dataset size {}",
            dataset.len()
        );
        Ok(Self {
            dataset,
            batch_size,
            seed,
        })
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let mut rng = substream(self.seed, Stream::Batches, step);
        (0..self.batch_size)
            .map(|_| rng.random_range(0..self.dataset.len()))
            .collect()
    }

    pub fn dataset_len(&self) -> usize {
        self.dataset.len()
    }

    pub fn batch(&self, step: u64) -> (TokenBatch, Vec<usize>) {
        self.gather(&self.indices(step))
    }

    pub fn gather(&self, idx: &[usize]) -> (TokenBatch, Vec<usize>) {
        let seqs: Vec<&[u32]> = idx
            .iter()
            .map(|&i| self.dataset.examples[i].tokens.as_slice())
            .collect();
        let labels = idx.iter().map(|&i| self.dataset.examples[i].label).collect();
        (
            TokenBatch::from_sequences(&seqs).expect("dataset has uniform length"),
            labels,
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenBatch, Vec<usize>)> + '_ {
        (0u64..).map(move |t| self.batch(t))
    }
}

/// Convenience wrapper: an endless, seeded stream of `(batch, labels)`.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = (TokenBatch, Vec<usize>)> + '_> {
    let sampler = BatchSampler::new(dataset, batch_size, seed)?;
    Ok((0u64..).map(move |t| sampler.batch(t)))
}
