//! Noise-prediction U-Net and the hierarchical feature aggregation head.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    gaussian, noise_rng, q_sample, sample_chain, ChainOptions, NoisePredictor, NoiseSchedule, Prediction,
};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, join, sigmoid, Conv2d, Linear, ParamStore};

pub const SAMPLE_CHANNELS: usize = crate::datamodel::CONDITIONED_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Width of the raw sinusoid; the MLP widens it fourfold.
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 5,
            base_width: 32,
            max_width: 256,
            time_embed_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }

    /// Spatial sides must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::Config(format!("invalid U-Net shape {self:?}")));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfahConfig {
    /// Decoder levels fed to the head, 0 being full resolution.
    pub taps: Vec<usize>,
    pub hidden: usize,
}

impl Default for HfahConfig {
    fn default() -> Self {
        HfahConfig {
            taps: vec![0, 1, 2],
            hidden: 32,
        }
    }
}

impl HfahConfig {
    pub fn validate(&self, unet: &UNetConfig) -> Result<()> {
        let distinct: BTreeSet<_> = self.taps.iter().collect();
        if distinct.len() < 2 || distinct.len() != self.taps.len() {
            return Err(Error::Config(format!(
                "HFAH needs at least two distinct tap levels, got {:?}",
                self.taps
            )));
        }
        if let Some(l) = self.taps.iter().find(|&&l| l >= unet.depth) {
            return Err(Error::Config(format!("tap level {l} exceeds U-Net depth {}", unet.depth)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("HFAH hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Raw sinusoid `[sin(t·f_i)…, cos(t·f_i)…]` with `f_i = 10000^(−i/half)`.
pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

/// Sinusoid followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(TimeEmbedding {
            fc1: Linear::new(store, &join(name, "fc1"), dim, 4 * dim)?,
            fc2: Linear::new(store, &join(name, "fc2"), 4 * dim, 4 * dim)?,
            dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        4 * self.dim
    }

    /// `(B, 4·dim)` embedding of one timestep per batch element.
    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let raw: Vec<f64> = ts.iter().flat_map(|&t| sinusoid(t as f64, self.dim)).collect();
        let raw = Tensor::from_vec(raw, (ts.len(), self.dim), device)?.to_dtype(dtype)?;
        Ok(self.fc2.forward(&self.fc1.forward(&raw)?.silu()?)?)
    }
}

/// Two 3×3 convolutions with an additive time projection and a residual.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub time: Linear,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(store, &join(name, "conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(store, &join(name, "time"), t_dim, c_out)?,
            conv2: Conv2d::new(store, &join(name, "conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(store, &join(name, "skip"), c_in, c_out, 1, 1)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.conv2.forward(&h.broadcast_add(&t)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
///
/// Built from broadcasts so that gradients accumulate correctly when the
/// input also feeds other nodes.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b * c, h, 1, w, 1))?
        .broadcast_as((b * c, h, factor, w, factor))?
        .contiguous()?
        .reshape((b, c, h * factor, w * factor))?)
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub time: TimeEmbedding,
    pub conv_in: Conv2d,
    pub encoder: Vec<ResBlock>,
    pub down: Vec<Conv2d>,
    /// Indexed by level; `decoder[0]` is full resolution.
    pub decoder: Vec<ResBlock>,
    pub head: Conv2d,
    cfg: UNetConfig,
    taps: Vec<usize>,
}

/// Noise prediction plus decoder features of one forward pass.
#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub eps: Tensor,
    /// Tapped decoder features, upsampled to input resolution, in tap order.
    pub features: Vec<Tensor>,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig, taps: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let t_dim = 4 * cfg.time_embed_dim;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            let c_in = if l == 0 { cfg.width(0) } else { cfg.width(l - 1) };
            encoder.push(ResBlock::new(store, &join(name, &format!("enc{l}")), c_in, cfg.width(l), t_dim)?);
            if l + 1 < cfg.depth {
                down.push(Conv2d::new(store, &join(name, &format!("down{l}")), cfg.width(l), cfg.width(l), 3, 2)?);
            }
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.depth {
            let below = if l + 1 < cfg.depth { cfg.width(l + 1) } else { cfg.width(l) };
            decoder.push(ResBlock::new(
                store,
                &join(name, &format!("dec{l}")),
                below + cfg.width(l),
                cfg.width(l),
                t_dim,
            )?);
        }
        Ok(UNet {
            time: TimeEmbedding::new(store, &join(name, "time"), cfg.time_embed_dim)?,
            conv_in: Conv2d::new(store, &join(name, "conv_in"), SAMPLE_CHANNELS, cfg.width(0), 3, 1)?,
            encoder,
            down,
            decoder,
            head: Conv2d::new(store, &join(name, "head"), cfg.width(0), SAMPLE_CHANNELS, 3, 1)?,
            cfg: *cfg,
            taps: taps.to_vec(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Tap channel widths in tap order.
    pub fn tap_widths(&self) -> Vec<usize> {
        self.taps.iter().map(|&l| self.cfg.width(l)).collect()
    }

    /// `x`: `(B, 5, H, W)`, one timestep per batch element.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<UNetOutput> {
        let (b, c, h, w) = x.dims4()?;
        let m = self.cfg.multiple();
        if c != SAMPLE_CHANNELS || ts.len() != b {
            return Err(Error::Dimension(format!(
                "denoiser input {:?} with {} timesteps",
                x.dims(),
                ts.len()
            )));
        }
        if h % m != 0 || w % m != 0 || h < m || w < m {
            return Err(Error::Dimension(format!(
                "denoiser input {h}x{w} is not divisible by {m}"
            )));
        }
        let temb = self.time.forward(ts, x.dtype(), x.device())?;
        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (l, block) in self.encoder.iter().enumerate() {
            hcur = block.forward(&hcur, &temb)?;
            skips.push(hcur.clone());
            if let Some(d) = self.down.get(l) {
                hcur = d.forward(&hcur)?;
            }
        }
        ensure_finite(&hcur, "denoiser encoder")?;
        let mut levels: Vec<Option<Tensor>> = vec![None; self.cfg.depth];
        for l in (0..self.cfg.depth).rev() {
            if l + 1 < self.cfg.depth {
                hcur = upsample_nearest(&hcur, 2)?;
            }
            hcur = self.decoder[l].forward(&Tensor::cat(&[&hcur, &skips[l]], 1)?, &temb)?;
            levels[l] = Some(hcur.clone());
        }
        let eps = self.head.forward(&hcur.silu()?)?;
        ensure_finite(&eps, "denoiser head")?;
        let features = self
            .taps
            .iter()
            .map(|&l| upsample_nearest(levels[l].as_ref().expect("every level decoded"), 1 << l))
            .collect::<Result<_>>()?;
        Ok(UNetOutput { eps, features })
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Prediction> {
        let b = x_t.dim(0)?;
        let out = self.forward(x_t, &vec![t; b])?;
        Ok(Prediction {
            eps: out.eps,
            features: out.features,
        })
    }
}

/// Channel-pooled spatial attention for one tap.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn map(&self, f: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::cat(&[&f.mean_keepdim(1)?, &f.max_keepdim(1)?], 1)?;
        Ok(sigmoid(&self.conv.forward(&pooled)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Hfah {
    pub attention: Vec<SpatialAttention>,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Hfah {
    pub fn new(store: &mut ParamStore, name: &str, tap_widths: &[usize], hidden: usize) -> Result<Self> {
        Ok(Hfah {
            attention: (0..tap_widths.len())
                .map(|i| {
                    Ok(SpatialAttention {
                        conv: Conv2d::new(store, &join(name, &format!("attn{i}")), 2, 1, 3, 1)?,
                    })
                })
                .collect::<Result<_>>()?,
            conv1: Conv2d::new(store, &join(name, "conv1"), tap_widths.iter().sum(), hidden, 3, 1)?,
            conv2: Conv2d::new(store, &join(name, "conv2"), hidden, 3, 3, 1)?,
        })
    }

    /// Weighted taps → `(B, 3, H, W)` in `[0, 1]`.
    pub fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        if features.len() != self.attention.len() {
            return Err(Error::Config(format!(
                "HFAH expects {} feature maps, got {}",
                self.attention.len(),
                features.len()
            )));
        }
        let weighted = features
            .iter()
            .zip(&self.attention)
            .map(|(f, a)| Ok(f.broadcast_mul(&a.map(f)?)?))
            .collect::<Result<Vec<_>>>()?;
        let h = self.conv1.forward(&Tensor::cat(&weighted, 1)?)?.silu()?;
        let out = ((self.conv2.forward(&h)?.tanh()? + 1.0)? * 0.5)?;
        ensure_finite(&out, "aggregation head")?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub unet: UNetConfig,
    pub hfah: HfahConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            unet: UNetConfig::default(),
            hfah: HfahConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.hfah.validate(&self.unet)
    }
}

/// U-Net and aggregation head sharing one parameter namespace.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub unet: UNet,
    pub hfah: Hfah,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(store, "stage2.unet", &cfg.unet, &cfg.hfah.taps)?;
        let hfah = Hfah::new(store, "stage2.hfah", &unet.tap_widths(), cfg.hfah.hidden)?;
        Ok(Denoiser { unet, hfah })
    }
}

/// Maps reference timesteps, defined for a 1000-step schedule, onto `sched`.
pub fn feature_timesteps(reference: &[usize], sched: &NoiseSchedule) -> BTreeSet<usize> {
    reference.iter().map(|&t| sched.rescale(t)).collect()
}

fn average(acc: &mut Option<Vec<Tensor>>, features: Vec<Tensor>) -> Result<()> {
    *acc = Some(match acc.take() {
        None => features,
        Some(prev) => prev
            .iter()
            .zip(&features)
            .map(|(a, b)| Ok((a + b)?))
            .collect::<Result<_>>()?,
    });
    Ok(())
}

/// Noise the condition to every timestep in the set, run the U-Net, average
/// the tapped features over timesteps and decode them with the head.
pub fn fused_from_timesteps(
    condition: &Tensor,
    timesteps: &BTreeSet<usize>,
    model: &Denoiser,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    if timesteps.is_empty() {
        return Err(Error::Config("feature timestep set is empty".into()));
    }
    let b = condition.dim(0)?;
    let mut acc = None;
    for &t in timesteps {
        let mut rng = noise_rng(seed, &format!("features/t{t}"));
        let eps = gaussian(condition.shape(), &mut rng, condition.dtype(), condition.device())?;
        let x = q_sample(condition, t, &eps, sched)?;
        average(&mut acc, model.unet.forward(&x, &vec![t; b])?.features)?;
    }
    let n = timesteps.len() as f64;
    let features: Vec<Tensor> = acc
        .expect("non-empty set")
        .into_iter()
        .map(|f| f / n)
        .collect::<candle_core::Result<_>>()?;
    model.hfah.forward(&features)
}

/// Run the reverse chain from `t_start` and decode the features recorded at
/// the requested timesteps (or at `t = 1` when none fall in range).
pub fn fused_from_chain(
    condition: &Tensor,
    t_start: usize,
    timesteps: &BTreeSet<usize>,
    model: &Denoiser,
    sched: &NoiseSchedule,
    seed: u64,
    posterior_noise: bool,
) -> Result<Tensor> {
    let mut record: BTreeSet<usize> = timesteps.iter().copied().filter(|&t| t >= 1 && t <= t_start).collect();
    if record.is_empty() {
        record.insert(1);
    }
    let out = sample_chain(
        condition,
        t_start,
        &model.unet,
        sched,
        seed,
        &ChainOptions {
            posterior_noise,
            record,
        },
    )?;
    let n = out.trace.len() as f64;
    let mut acc = None;
    for features in out.trace.into_values() {
        average(&mut acc, features)?;
    }
    let features: Vec<Tensor> = acc
        .expect("at least one recorded step")
        .into_iter()
        .map(|f| f / n)
        .collect::<candle_core::Result<_>>()?;
    model.hfah.forward(&features)
}
