//! Token classifier: embedding table, mean pooling, dense net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, EmbeddingOwner, EmbeddingTable, SeqEmbeddings, TokenBatch};
use crate::error::{ensure, Result};
use crate::tensor::{backward, forward, Activation, ClassifierNet, ForwardCache, Matrix, NetGrads};

/// Shape of a classifier: embedding width, hidden widths, hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Architecture {
    pub fn new(embed_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            embed_dim,
            hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.embed_dim >= 1, "embedding width must be >= 1");
        ensure!(
            self.hidden.iter().all(|&w| w >= 1),
            "hidden widths must be >= 1"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub table: EmbeddingTable,
    pub net: ClassifierNet,
}

/// What [`Model::backward`] needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    net: ForwardCache,
    seq_len: usize,
}

impl Model {
    pub fn new(table: EmbeddingTable, net: ClassifierNet) -> Result<Self> {
        ensure!(
            table.dim() == net.input_dim(),
            "embedding width {} != network input width {}",
            table.dim(),
            net.input_dim()
        );
        Ok(Self { table, net })
    }

    pub fn random<R: Rng + ?Sized>(
        arch: &Architecture,
        vocab_size: usize,
        num_classes: usize,
        owner: EmbeddingOwner,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        ensure!(num_classes >= 2, "need at least two classes");
        let table = EmbeddingTable::random(vocab_size, arch.embed_dim, owner, rng)?;
        let mut dims = vec![arch.embed_dim];
        dims.extend(&arch.hidden);
        dims.push(num_classes);
        let net = ClassifierNet::new(&dims, arch.activation, rng)?;
        Self::new(table, net)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.vocab_size()
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn num_params(&self) -> usize {
        self.table.matrix().as_slice().len() + self.net.num_params()
    }

    pub fn embed(&self, batch: &TokenBatch) -> Result<SeqEmbeddings> {
        embed(&self.table, batch)
    }

    pub fn forward(&self, emb: &SeqEmbeddings) -> Result<(Matrix, ModelCache)> {
        let (logits, net) = forward(&self.net, &emb.mean_pool())?;
        Ok((
            logits,
            ModelCache {
                net,
                seq_len: emb.seq_len(),
            },
        ))
    }

    pub fn logits(&self, emb: &SeqEmbeddings) -> Result<Matrix> {
        Ok(self.forward(emb)?.0)
    }

    pub fn logits_tokens(&self, batch: &TokenBatch) -> Result<Matrix> {
        self.logits(&self.embed(batch)?)
    }

    /// Net gradients and the gradient w.r.t. the per-position embeddings.
    pub fn backward(&self, cache: &ModelCache, dlogits: &Matrix) -> Result<(NetGrads, SeqEmbeddings)> {
        let (grads, dpooled) = backward(&self.net, &cache.net, dlogits)?;
        Ok((grads, SeqEmbeddings::unpool_grad(&dpooled, cache.seq_len)))
    }

    /// Argmax class per sequence; ties go to the lowest class.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let logits = self.logits_tokens(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn apply_sgd(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        ensure!(lr > 0.0, "learning rate must be > 0");
        ensure!(
            grads.table.shape() == self.table.matrix().shape(),
            "table gradient shape mismatch"
        );
        self.table.matrix_mut().add_scaled(&grads.table, -lr)?;
        self.net.apply_sgd(&grads.net, lr)
    }

    /// All parameters, table first, in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.table.matrix().as_slice().to_vec();
        for s in self.net.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(flat.len() == self.num_params(), "parameter count mismatch");
        let (head, mut rest) = flat.split_at(self.table.matrix().as_slice().len());
        self.table.matrix_mut().as_mut_slice().copy_from_slice(head);
        for s in self.net.param_slices_mut() {
            let (a, b) = rest.split_at(s.len());
            s.copy_from_slice(a);
            rest = b;
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub table: Matrix,
    pub net: NetGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            table: Matrix::zeros(model.vocab_size(), model.table.dim()),
            net: NetGrads::zeros_like(&model.net),
        }
    }

    /// Adds `weight · demb` to the rows of the tokens that produced it.
    pub fn scatter(&mut self, batch: &TokenBatch, demb: &SeqEmbeddings, weight: f64) -> Result<()> {
        ensure!(
            demb.values().rows() == batch.tokens().len() && demb.dim() == self.table.cols(),
            "embedding gradient does not match batch"
        );
        for (r, &tok) in batch.tokens().iter().enumerate() {
            let src = demb.values().row(r);
            for (d, v) in self.table.row_mut(tok as usize).iter_mut().zip(src) {
                *d += weight * v;
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, factor: f64) -> Result<()> {
        self.table.add_scaled(&other.table, factor)?;
        self.net.add_scaled(&other.net, factor)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.table.as_slice().to_vec();
        out.extend(self.net.flatten());
        out
    }
}
