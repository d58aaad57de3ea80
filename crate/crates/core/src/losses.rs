//! Training objectives for both stages.
//!
//! All tensor arguments are `(B, C, H, W)`. Every L1 term is mean-reduced over
//! batch, channels and pixels. Infrared inputs are single-channel and are
//! broadcast across the three colour channels wherever they meet a colour
//! image.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datamodel::{FusedImage, ImagePair, MaskPair};
use crate::error::{Error, Result};
use crate::nn::safe_sqrt;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-channel Sobel gradient magnitude with replicate padding.
pub fn grad_operator(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut taps = SOBEL_X.to_vec();
    taps.extend_from_slice(&SOBEL_Y);
    let kernel = Tensor::from_vec(taps, (2, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
    let planes = x.reshape((b * c, 1, h, w))?;
    let padded = candle_nn::ops::replication_pad2d(&planes, 1)?;
    let g = padded.conv2d(&kernel, 0, 1, 1, 1)?;
    let gx = g.narrow(1, 0, 1)?;
    let gy = g.narrow(1, 1, 1)?;
    let mag = safe_sqrt(&(gx.sqr()? + gy.sqr()?)?)?;
    Ok(mag.reshape((b, c, h, w))?)
}

fn check_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (ab, _, ah, aw) = a.dims4()?;
    let (bb, _, bh, bw) = b.dims4()?;
    if (ab, ah, aw) != (bb, bh, bw) {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn to_rgb(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    match c {
        3 => Ok(x.clone()),
        1 => Ok(x.broadcast_as((b, 3, h, w))?.contiguous()?),
        other => Err(Error::Dimension(format!(
            "expected 1 or 3 channels, got {other}"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Loss {
    pub total: Tensor,
    pub grad: Tensor,
    pub int: Tensor,
}

/// `mean|∇F₁ − ∇I_vis| + mean|F₁ − I_ir|`.
pub fn stage1_loss(f1: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Stage1Loss> {
    check_dims(f1, ir, "stage-I loss (infrared)")?;
    check_dims(f1, vis, "stage-I loss (visible)")?;
    let grad = (grad_operator(f1)? - grad_operator(vis)?)?.abs()?.mean_all()?;
    let int = f1.broadcast_sub(ir)?.abs()?.mean_all()?;
    let total = (&int + &grad)?;
    Ok(Stage1Loss { total, grad, int })
}

/// Pointwise `max(M_ir, M_vis)`.
pub fn joint_mask(m_ir: &Tensor, m_vis: &Tensor) -> Result<Tensor> {
    check_dims(m_ir, m_vis, "joint mask")?;
    Ok(m_ir.maximum(m_vis)?)
}

/// `mean|M·(I_f − max(I_ir, I_vis))|`.
pub fn mask_int_loss(i_f: &Tensor, ir: &Tensor, vis: &Tensor, m: &Tensor) -> Result<Tensor> {
    check_dims(i_f, ir, "mask intensity loss")?;
    check_dims(i_f, vis, "mask intensity loss")?;
    check_dims(i_f, m, "mask intensity loss (mask)")?;
    let target = to_rgb(ir)?.maximum(vis)?;
    Ok((i_f - target)?.broadcast_mul(m)?.abs()?.mean_all()?)
}

/// `mean|M·(∇I_f − max(∇I_ir, ∇I_vis))|`.
pub fn mask_grad_loss(i_f: &Tensor, ir: &Tensor, vis: &Tensor, m: &Tensor) -> Result<Tensor> {
    check_dims(i_f, ir, "mask gradient loss")?;
    check_dims(i_f, vis, "mask gradient loss")?;
    check_dims(i_f, m, "mask gradient loss (mask)")?;
    let target = to_rgb(&grad_operator(ir)?)?.maximum(&grad_operator(vis)?)?;
    Ok((grad_operator(i_f)? - target)?
        .broadcast_mul(m)?
        .abs()?
        .mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.5,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = LossWeights { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }

    pub fn combine(&self, int: f64, grad: f64) -> f64 {
        self.lambda1 * int + self.lambda2 * grad
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub total: Tensor,
    pub int: Tensor,
    pub grad: Tensor,
}

/// `λ₁·L_int^mask + λ₂·L_grad^mask`; the diffusion term is added by the trainer.
pub fn stage2_loss(
    i_f: &Tensor,
    ir: &Tensor,
    vis: &Tensor,
    m_ir: &Tensor,
    m_vis: &Tensor,
    weights: &LossWeights,
) -> Result<Stage2Loss> {
    weights.validate()?;
    let m = joint_mask(m_ir, m_vis)?;
    let int = mask_int_loss(i_f, ir, vis, &m)?;
    let grad = mask_grad_loss(i_f, ir, vis, &m)?;
    let total = ((&int * weights.lambda1)? + (&grad * weights.lambda2)?)?;
    Ok(Stage2Loss { total, int, grad })
}

/// Scalar loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub int: f64,
    pub grad: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn pair_tensors(pair: &ImagePair) -> Result<(Tensor, Tensor)> {
    let dev = Device::Cpu;
    Ok((
        pair.ir.to_tensor(DType::F64, &dev)?,
        pair.vis.to_tensor(DType::F64, &dev)?,
    ))
}

/// Stage-I loss of a single fused image against its source pair.
pub fn stage1_loss_for(f1: &FusedImage, pair: &ImagePair) -> Result<LossParts> {
    let (ir, vis) = pair_tensors(pair)?;
    let f = f1.image().to_tensor(DType::F64, &Device::Cpu)?;
    let l = stage1_loss(&f, &ir, &vis)?;
    Ok(LossParts {
        total: scalar(&l.total)?,
        int: scalar(&l.int)?,
        grad: scalar(&l.grad)?,
    })
}

/// Stage-II mask-guided loss of a single fused image.
pub fn stage2_loss_for(
    i_f: &FusedImage,
    pair: &ImagePair,
    masks: &MaskPair,
    weights: &LossWeights,
) -> Result<LossParts> {
    masks.ensure_matches(pair)?;
    let (ir, vis) = pair_tensors(pair)?;
    let (m_ir, m_vis) = masks.to_tensors(DType::F64, &Device::Cpu)?;
    let f = i_f.image().to_tensor(DType::F64, &Device::Cpu)?;
    let l = stage2_loss(&f, &ir, &vis, &m_ir, &m_vis, weights)?;
    Ok(LossParts {
        total: scalar(&l.total)?,
        int: scalar(&l.int)?,
        grad: scalar(&l.grad)?,
    })
}
