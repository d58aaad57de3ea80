//! Parameter storage, layers and the Adam optimizer on top of candle tensors.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named learnable tensors.
///
/// Initial values depend only on `(seed, name)`, so the order in which modules
/// are constructed never changes the weights. Cloning is cheap and clones share
/// storage; a clone with tracking disabled hands out detached tensors, which is
/// how inference avoids building an autograd graph.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    track: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .field("track", &self.track)
            .finish()
    }
}

pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
}

pub(crate) fn mix_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
            track: true,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// A view sharing storage whose tensors are detached from autograd.
    pub fn frozen(&self) -> ParamStore {
        ParamStore {
            track: false,
            ..self.clone()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Returns the named parameter, creating it when absent.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.view(v));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::Value(format!("bad init std {std}: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name));
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = self.view(&var);
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn view(&self, v: &Var) -> Tensor {
        if self.track {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        }
    }

    /// Overwrites a parameter in place; shape and dtype must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, v) in &self.vars {
            ensure_finite(v.as_tensor(), name)?;
        }
        Ok(())
    }
}

/// Prefix helper for hierarchical parameter names.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            stage: stage.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = store.get(
            &join(name, "weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Fan {
                fan_in: c_in * kernel * kernel,
                gain: 1.0,
            },
        )?;
        let bias = store.get(&join(name, "bias"), &[c_out], Init::Zeros)?;
        Ok(Conv2d {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Per-channel 3×3 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = store.get(
            &join(name, "weight"),
            &[channels, 1, 3, 3],
            Init::Fan { fan_in: 9, gain: 1.0 },
        )?;
        let bias = store.get(&join(name, "bias"), &[channels], Init::Zeros)?;
        Ok(DepthwiseConv3 { weight, bias })
    }
}

impl Module for DepthwiseConv3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // Nine shifted views instead of a grouped convolution: candle splits
        // grouped convolutions into one kernel call per channel.
        let (_, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = self.weight.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
                let term = padded.narrow(2, dy, h)?.narrow(3, dx, w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
        acc.expect("nine taps")
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.get(
            &join(name, "weight"),
            &[d_out, d_in],
            Init::Fan {
                fan_in: d_in,
                gain: 1.0,
            },
        )?;
        let bias = store.get(&join(name, "bias"), &[d_out], Init::Zeros)?;
        Ok(Linear { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.get(&join(name, "gamma"), &[dim], Init::Ones)?,
            beta: store.get(&join(name, "beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

/// `sqrt(max(x, 0))` whose derivative is zero wherever the input is not
/// positive, so gradient magnitudes of flat regions stay differentiable.
pub fn safe_sqrt(x: &Tensor) -> candle_core::Result<Tensor> {
    let positive = x.gt(0.0)?;
    let guarded = positive.where_cond(x, &x.ones_like()?)?.sqrt()?;
    positive.where_cond(&guarded, &x.zeros_like()?)
}

/// Adam with bias correction; moments are keyed by parameter name so they can
/// be written to and restored from checkpoints.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(&mut self, state: AdamState) {
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
