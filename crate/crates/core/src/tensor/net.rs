//! Feed-forward classifier with hand-derived backward pass.
//!
//! Each layer computes `z = x Wᵀ + b`, `y = act(z)`, with `W` stored as
//! `(out, in)`. The final layer is always linear and produces logits.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{ensure, Error, Result};

pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::validation(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub activation: Activation,
    /// Shape `(out, in)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        ensure!(
            bias.len() == weight.rows(),
            "bias length {} != layer width {}",
            bias.len(),
            weight.rows()
        );
        ensure!(
            bias.iter().all(|b| b.is_finite()),
            "bias entries must be finite"
        );
        Ok(Self {
            activation,
            weight,
            bias,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Stack of dense layers ending in a linear logit layer.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "NetFile", into = "NetFile")]
pub struct ClassifierNet {
    layers: Vec<DenseLayer>,
    /// Changes on every parameter mutation; caches remember the value they
    /// were produced under so stale caches are rejected.
    generation: u64,
}

impl Clone for ClassifierNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            generation: next_generation(),
        }
    }
}

impl PartialEq for ClassifierNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl ClassifierNet {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        ensure!(!layers.is_empty(), "network needs at least one layer");
        for pair in layers.windows(2) {
            ensure!(
                pair[0].out_dim() == pair[1].in_dim(),
                "layer widths do not chain: {} -> {}",
                pair[0].out_dim(),
                pair[1].in_dim()
            );
        }
        Ok(Self {
            layers,
            generation: next_generation(),
        })
    }

    /// Xavier-uniform weights and zero biases. `dims` lists every width from
    /// input to logits, e.g. `[16, 64, 64, 4]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        ensure!(dims.len() >= 2, "need at least input and output widths");
        ensure!(dims.iter().all(|&d| d > 0), "layer widths must be > 0");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let activation = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                hidden
            };
            layers.push(DenseLayer::new(
                Matrix::from_vec(fan_out, fan_in, data)?,
                vec![0.0; fan_out],
                activation,
            )?);
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Widths from input to logits.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Mutable views of every parameter block, in the order matched by
    /// [`NetGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation = next_generation();
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn apply_sgd(&mut self, grads: &NetGrads, lr: f64) -> Result<()> {
        let grads = grads.slices();
        let params = self.param_slices_mut();
        ensure!(
            params.len() == grads.len(),
            "gradient block count mismatch"
        );
        for (p, g) in params.into_iter().zip(grads) {
            super::sgd_step(p, g, lr)?;
        }
        Ok(())
    }
}

/// Activations retained by [`forward`] for the matching [`backward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    generation: u64,
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &ClassifierNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn add_scaled(&mut self, other: &NetGrads, factor: f64) -> Result<()> {
        ensure!(
            self.layers.len() == other.layers.len(),
            "gradient layer count mismatch"
        );
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, factor)?;
            ensure!(a.bias.len() == b.bias.len(), "bias gradient mismatch");
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Runs the net on a batch of input rows, returning logits and the cache
/// needed by [`backward`].
pub fn forward(net: &ClassifierNet, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
    ensure!(
        input.cols() == net.input_dim(),
        "input width {} != network input width {}",
        input.cols(),
        net.input_dim()
    );
    let batch = input.rows();
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let x = post.last().unwrap_or(input);
        let mut z = x.matmul_transposed(&layer.weight)?;
        let mut y = Matrix::zeros(batch, layer.out_dim());
        for r in 0..batch {
            let zr = z.row_mut(r);
            for (zv, b) in zr.iter_mut().zip(&layer.bias) {
                *zv += b;
            }
            for (yv, zv) in y.row_mut(r).iter_mut().zip(zr.iter()) {
                *yv = layer.activation.apply(*zv);
            }
        }
        pre.push(z);
        post.push(y);
    }
    let logits = post.last().expect("non-empty").clone();
    ensure!(logits.is_finite(), "forward produced non-finite logits");
    Ok((
        logits,
        ForwardCache {
            input: input.clone(),
            pre,
            post,
            generation: net.generation,
        },
    ))
}

/// Back-propagates `dlogits` (gradient of a scalar loss w.r.t. the logits)
/// and returns parameter gradients plus the gradient w.r.t. the input rows.
pub fn backward(
    net: &ClassifierNet,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<(NetGrads, Matrix)> {
    ensure!(
        cache.generation == net.generation,
        "forward cache is stale: network parameters changed since forward()"
    );
    ensure!(
        cache.pre.len() == net.layers.len()
            && cache.input.cols() == net.input_dim()
            && cache
                .pre
                .iter()
                .zip(&net.layers)
                .all(|(z, l)| z.cols() == l.out_dim()),
        "forward cache does not match network shape"
    );
    let batch = cache.input.rows();
    ensure!(
        dlogits.shape() == (batch, net.num_classes()),
        "dlogits shape {:?} != ({}, {})",
        dlogits.shape(),
        batch,
        net.num_classes()
    );

    let mut grads = NetGrads::zeros_like(net);
    let mut upstream = dlogits.clone();
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let z = &cache.pre[idx];
        let y = &cache.post[idx];
        let x = if idx == 0 {
            &cache.input
        } else {
            &cache.post[idx - 1]
        };
        let mut dz = upstream;
        for r in 0..batch {
            for c in 0..layer.out_dim() {
                let d = layer.activation.derivative(z.get(r, c), y.get(r, c));
                dz.set(r, c, dz.get(r, c) * d);
            }
        }
        let lg = &mut grads.layers[idx];
        lg.weight = dz.transpose().matmul(x)?;
        for r in 0..batch {
            for (b, v) in lg.bias.iter_mut().zip(dz.row(r)) {
                *b += v;
            }
        }
        upstream = dz.matmul(&layer.weight)?;
    }
    Ok((grads, upstream))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    version: u32,
    dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

impl From<ClassifierNet> for NetFile {
    fn from(net: ClassifierNet) -> Self {
        NetFile {
            version: NET_FORMAT_VERSION,
            dims: net.dims(),
            layers: net.layers,
        }
    }
}

impl TryFrom<NetFile> for ClassifierNet {
    type Error = Error;

    fn try_from(file: NetFile) -> Result<Self> {
        ensure!(
            file.version == NET_FORMAT_VERSION,
            "unsupported network format version {}",
            file.version
        );
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let (rows, cols) = l.weight.shape();
                let weight = Matrix::from_vec(rows, cols, l.weight.into_vec())?;
                DenseLayer::new(weight, l.bias, l.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = ClassifierNet::from_layers(layers)?;
        ensure!(
            net.dims() == file.dims,
            "declared dims {:?} do not match layers {:?}",
            file.dims,
            net.dims()
        );
        Ok(net)
    }
}
