//! Stage-I fusion network.
//!
//! Infrared features pass through a stack of multi-scale enhancement modules,
//! visible features through windowed transformer blocks. Two cross-attention
//! paths let each stream query the other before a small convolutional head
//! maps the concatenated streams to a three-channel image in `[0, 1]`.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FusedImage, FusionStage, ImagePair};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, join, sigmoid, softmax_last, Conv2d, DepthwiseConv3, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsfemConfig {
    pub channels: usize,
    pub repeats: usize,
}

impl Default for MsfemConfig {
    fn default() -> Self {
        MsfemConfig {
            channels: 16,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TbConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub repeats: usize,
    pub window: usize,
}

impl Default for TbConfig {
    fn default() -> Self {
        TbConfig {
            embed_dim: 16,
            heads: 4,
            mlp_ratio: 2.0,
            repeats: 3,
            window: 8,
        }
    }
}

impl TbConfig {
    fn hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub msfem: MsfemConfig,
    pub tb: TbConfig,
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let (m, t) = (&self.msfem, &self.tb);
        if m.channels == 0 || m.repeats == 0 || t.repeats == 0 {
            return Err(Error::Config("stage-I channels and repeats must be at least 1".into()));
        }
        if t.heads == 0 || t.embed_dim % t.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                t.embed_dim, t.heads
            )));
        }
        if t.embed_dim != m.channels {
            return Err(Error::Config(format!(
                "infrared channels {} and visible embed_dim {} must agree",
                m.channels, t.embed_dim
            )));
        }
        if t.window == 0 || !(t.mlp_ratio > 0.0) {
            return Err(Error::Config("window and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-scale feature enhancement module.
#[derive(Debug, Clone)]
pub struct Msfem {
    pub branches: [Conv2d; 4],
    pub dw1: DepthwiseConv3,
    pub pw: Conv2d,
    pub dw2: DepthwiseConv3,
    pub fuse: Conv2d,
    name: String,
}

impl Msfem {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let b = |store: &mut ParamStore, k: usize| Conv2d::new(store, &join(name, &format!("conv{k}")), c, c, k, 1);
        Ok(Msfem {
            branches: [b(store, 1)?, b(store, 3)?, b(store, 5)?, b(store, 7)?],
            dw1: DepthwiseConv3::new(store, &join(name, "dw1"), 3 * c)?,
            pw: Conv2d::new(store, &join(name, "pw"), 3 * c, c, 1, 1)?,
            dw2: DepthwiseConv3::new(store, &join(name, "dw2"), c)?,
            fuse: Conv2d::new(store, &join(name, "fuse"), 2 * c, c, 1, 1)?,
            name: name.to_string(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let stage = |s: &str| format!("{}.{s}", self.name);
        let f: Vec<Tensor> = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<candle_core::Result<_>>()?;
        let ms = Tensor::cat(&[&f[1], &f[2], &f[3]], 1)?;
        ensure_finite(&ms, &stage("branches"))?;
        let enh = self.dw2.forward(&self.pw.forward(&self.dw1.forward(&ms)?)?)?;
        ensure_finite(&enh, &stage("enhance"))?;
        let cat = Tensor::cat(&[&enh, &f[0]], 1)?;
        let out = (x + sigmoid(&self.fuse.forward(&cat)?)?)?;
        ensure_finite(&out, &stage("output"))?;
        Ok(out)
    }
}

/// `(B, C, H, W)` → `(B·nW, window², C)`.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % window != 0 || w % window != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} feature map is not a multiple of window {window}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    Ok(x.reshape((b * c * nh, window, nw, window))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, nh * nw, window * window))?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * nh * nw, window * window, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(t: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, c) = t.dims3()?;
    let (nh, nw) = (h / window, w / window);
    Ok(t.reshape((b, nh * nw, window * window, c))?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .reshape((b * c * nh, nw, window, window))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// Multi-head attention projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &join(name, "q"), dim, dim)?,
            k: Linear::new(store, &join(name, "k"), dim, dim)?,
            v: Linear::new(store, &join(name, "v"), dim, dim)?,
            proj: Linear::new(store, &join(name, "proj"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        Ok(x.reshape((n, l, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention probabilities `(N, heads, Lq, Lk)`.
    pub fn probabilities(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys)?)?;
        let dh = q.dim(D::Minus1)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        Ok(softmax_last(&scores)?)
    }

    /// Projected attention output `(N, Lq, C)`.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let (n, l, c) = queries.dims3()?;
        let p = self.probabilities(queries, keys)?;
        let v = self.split_heads(&self.v.forward(keys)?)?;
        let o = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, l, c))?;
        Ok(self.proj.forward(&o)?)
    }
}

/// Pre-norm windowed transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    window: usize,
    name: String,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TbConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &join(name, "ln1"), c)?,
            attn: Attention::new(store, &join(name, "attn"), c, cfg.heads)?,
            ln2: LayerNorm::new(store, &join(name, "ln2"), c)?,
            fc1: Linear::new(store, &join(name, "fc1"), c, cfg.hidden())?,
            fc2: Linear::new(store, &join(name, "fc2"), cfg.hidden(), c)?,
            window: cfg.window,
            name: name.to_string(),
        })
    }

    /// Token-level block on `(N, L, C)`.
    pub fn forward_tokens(&self, t: &Tensor) -> Result<Tensor> {
        let n1 = self.ln1.forward(t)?;
        let t = (t + self.attn.forward(&n1, &n1)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&t)?)?.gelu_erf()?;
        Ok((&t + self.fc2.forward(&h)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let t = window_partition(x, self.window)?;
        let out = window_reverse(&self.forward_tokens(&t)?, self.window, b, h, w)?;
        ensure_finite(&out, &self.name)?;
        Ok(out)
    }

    /// Self-attention probabilities of every window, `(B·nW, heads, L, L)`.
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.ln1.forward(&window_partition(x, self.window)?)?;
        self.attn.probabilities(&t, &t)
    }
}

/// Bidirectional windowed cross-attention followed by the output head.
#[derive(Debug, Clone)]
pub struct CrossFuse {
    pub ln_ir: LayerNorm,
    pub ln_vis: LayerNorm,
    pub ir_from_vis: Attention,
    pub vis_from_ir: Attention,
    pub head1: Conv2d,
    pub head2: Conv2d,
    window: usize,
}

impl CrossFuse {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(CrossFuse {
            ln_ir: LayerNorm::new(store, &join(name, "ln_ir"), c)?,
            ln_vis: LayerNorm::new(store, &join(name, "ln_vis"), c)?,
            ir_from_vis: Attention::new(store, &join(name, "ir_from_vis"), c, heads)?,
            vis_from_ir: Attention::new(store, &join(name, "vis_from_ir"), c, heads)?,
            head1: Conv2d::new(store, &join(name, "head1"), 2 * c, c, 3, 1)?,
            head2: Conv2d::new(store, &join(name, "head2"), c, 3, 3, 1)?,
            window,
        })
    }

    /// The two attended streams, before concatenation.
    pub fn streams(&self, f_ir: &Tensor, f_vis: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_ir.dims() != f_vis.dims() {
            return Err(Error::Dimension(format!(
                "cross-fusion inputs {:?} vs {:?}",
                f_ir.dims(),
                f_vis.dims()
            )));
        }
        let (b, _, h, w) = f_ir.dims4()?;
        let ti = window_partition(f_ir, self.window)?;
        let tv = window_partition(f_vis, self.window)?;
        let (ni, nv) = (self.ln_ir.forward(&ti)?, self.ln_vis.forward(&tv)?);
        let ir = (&ti + self.ir_from_vis.forward(&ni, &nv)?)?;
        let vis = (&tv + self.vis_from_ir.forward(&nv, &ni)?)?;
        Ok((
            window_reverse(&ir, self.window, b, h, w)?,
            window_reverse(&vis, self.window, b, h, w)?,
        ))
    }

    pub fn forward(&self, f_ir: &Tensor, f_vis: &Tensor) -> Result<Tensor> {
        let (ir, vis) = self.streams(f_ir, f_vis)?;
        let h = self.head1.forward(&Tensor::cat(&[&ir, &vis], 1)?)?.gelu_erf()?;
        let out = sigmoid(&self.head2.forward(&h)?)?;
        ensure_finite(&out, "cross-fusion head")?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Net {
    pub ir_stem: Conv2d,
    pub vis_stem: Conv2d,
    pub msfem: Vec<Msfem>,
    pub tb: Vec<TransformerBlock>,
    pub cross: CrossFuse,
    cfg: Stage1Config,
}

impl Stage1Net {
    pub fn new(store: &mut ParamStore, cfg: &Stage1Config) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.msfem.channels;
        Ok(Stage1Net {
            ir_stem: Conv2d::new(store, "stage1.ir.stem", 1, c, 3, 1)?,
            vis_stem: Conv2d::new(store, "stage1.vis.stem", 3, c, 3, 1)?,
            msfem: (0..cfg.msfem.repeats)
                .map(|i| Msfem::new(store, &format!("stage1.ir.msfem{i}"), c))
                .collect::<Result<_>>()?,
            tb: (0..cfg.tb.repeats)
                .map(|i| TransformerBlock::new(store, &format!("stage1.vis.tb{i}"), &cfg.tb))
                .collect::<Result<_>>()?,
            cross: CrossFuse::new(store, "stage1.cross", c, cfg.tb.heads, cfg.tb.window)?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    pub fn ir_features(&self, ir: &Tensor) -> Result<Tensor> {
        let mut f = self.ir_stem.forward(ir)?;
        for m in &self.msfem {
            f = m.forward(&f)?;
        }
        Ok(f)
    }

    pub fn vis_features(&self, vis: &Tensor) -> Result<Tensor> {
        let mut f = self.vis_stem.forward(vis)?;
        for t in &self.tb {
            f = t.forward(&f)?;
        }
        Ok(f)
    }

    /// `(B,1,H,W)`, `(B,3,H,W)` → `(B,3,H,W)`; sides must be window multiples.
    pub fn forward(&self, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        let (bi, ci, hi, wi) = ir.dims4()?;
        let (bv, cv, hv, wv) = vis.dims4()?;
        if ci != 1 || cv != 3 || (bi, hi, wi) != (bv, hv, wv) {
            return Err(Error::Dimension(format!(
                "stage-I inputs {:?} and {:?}",
                ir.dims(),
                vis.dims()
            )));
        }
        self.cross.forward(&self.ir_features(ir)?, &self.vis_features(vis)?)
    }

    /// Fuse a whole pair, reflect-padding to the attention window and
    /// cropping back.
    pub fn fuse_pair(&self, pair: &ImagePair, dtype: DType) -> Result<FusedImage> {
        let dev = Device::Cpu;
        let (h, w) = pair.dims();
        let win = self.cfg.tb.window;
        let ir = pair.ir.reflect_pad_to_multiple(win)?.to_tensor(dtype, &dev)?;
        let vis = pair.vis.reflect_pad_to_multiple(win)?.to_tensor(dtype, &dev)?;
        let out = self.forward(&ir, &vis)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        FusedImage::from_tensor(&out.to_dtype(DType::F64)?, FusionStage::Preliminary)
    }
}

/// Parameter count of a configuration, from the layer shapes alone.
pub fn param_count(cfg: &Stage1Config) -> usize {
    let c = cfg.msfem.channels;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let lin = |i: usize, o: usize| i * o + o;
    let msfem = [1, 3, 5, 7].iter().map(|&k| conv(c, c, k)).sum::<usize>()
        + 3 * c * 10
        + conv(3 * c, c, 1)
        + c * 10
        + conv(2 * c, c, 1);
    let hidden = cfg.tb.hidden();
    let tb = 4 * c + 4 * lin(c, c) + lin(c, hidden) + lin(hidden, c);
    let cross = 4 * c + 8 * lin(c, c) + conv(2 * c, c, 3) + conv(c, 3, 3);
    conv(1, c, 3) + conv(3, c, 3) + cfg.msfem.repeats * msfem + cfg.tb.repeats * tb + cross
}
