//! Training loops for both stages, the Stage-II objective, end-to-end
//! fusion and the ablation runner.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, StageTag};
use crate::config::{InferenceMode, RunConfig, StageConfig};
use crate::datamodel::{stack_images, to_conditioned_sample, FusedImage, FusionStage, Image, ImagePair, MaskPair, MaskProvenance, ValueRange};
use crate::denoiser::{fused_from_chain, fused_from_timesteps, Denoiser};
use crate::diffusion::{
    diffusion_loss, gaussian, noise_rng, predict_x0, q_sample, q_sample_batch, sample_chain, ChainOptions,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::ingest::{patch_origin, IndexEntry};
use crate::losses::{stage1_loss, stage2_loss, Stage2Loss};
use crate::metrics::{evaluate_images, MetricReport};
use crate::nn::{mix_seed, Adam, ParamStore};
use crate::stage1::Stage1Net;

/// Loss values logged for one optimizer step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub int: f64,
    pub grad: f64,
    /// Noise-prediction term; zero for Stage I.
    pub diff: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest-loss parameters seen in this invocation, if any step ran.
    pub best: Option<Checkpoint>,
    pub records: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

pub const STAGE1_LAST: &str = "stage1_last.ckpt";
pub const STAGE1_BEST: &str = "stage1_best.ckpt";
pub const STAGE2_LAST: &str = "stage2_last.ckpt";
pub const STAGE2_BEST: &str = "stage2_best.ckpt";

/// Number of optimizer steps a stage runs over `n` samples.
pub fn total_steps(stage: &StageConfig, n: usize, batch: usize) -> usize {
    let per_epoch = n.div_ceil(batch.max(1));
    let steps = stage.epochs * per_epoch;
    stage.max_steps.map_or(steps, |m| m.min(steps))
}

/// Sample indices of step `step`: a fresh permutation per epoch, cut into
/// consecutive batches (the last one may be short).
pub fn batch_indices(seed: u64, tag: &str, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch.max(1)).max(1);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("{tag}/epoch{epoch}"))));
    let start = (step % per_epoch) * batch;
    order[start..(start + batch).min(n)].to_vec()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_divergence(value: f64, step: u64, threshold: f64) -> Result<()> {
    if !value.is_finite() || value > threshold {
        return Err(Error::Divergence { step, value });
    }
    Ok(())
}

fn snapshot(store: &ParamStore) -> Result<Vec<(String, Tensor)>> {
    store
        .vars()
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

fn save_to(dir: Option<&Path>, name: &str, ck: &Checkpoint) -> Result<()> {
    if let Some(d) = dir {
        ck.save(&d.join(name))?;
    }
    Ok(())
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    stage: StageTag,
    stage_cfg: StageConfig,
    store: ParamStore,
    adam: Adam,
    start: u64,
    best: f64,
    best_params: Option<Vec<(String, Tensor)>>,
    records: Vec<StepRecord>,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a RunConfig, stage: StageTag, store: ParamStore, resume: Option<&Checkpoint>) -> Result<Self> {
        let stage_cfg = match stage {
            StageTag::Stage1 => cfg.stage1,
            StageTag::Stage2 => cfg.stage2,
        };
        let o = &cfg.optimizer;
        let mut adam = Adam::new(cfg.stage_lr(&stage_cfg), o.beta1, o.beta2, o.eps);
        let (mut start, mut best) = (0, f64::INFINITY);
        if let Some(ck) = resume {
            ck.load_into(&store, stage)?;
            if ck.seed != cfg.seed {
                return Err(Error::Checkpoint(vec![format!(
                    "checkpoint seed {} differs from run seed {}",
                    ck.seed, cfg.seed
                )]));
            }
            let state = ck
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint(vec!["checkpoint has no optimizer state".into()]))?;
            adam.restore(state);
            start = ck.step;
            best = ck.best_loss;
        }
        Ok(Loop {
            cfg,
            stage,
            stage_cfg,
            store,
            adam,
            start,
            best,
            best_params: None,
            records: Vec::new(),
        })
    }

    fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::new(self.stage, self.cfg, step, self.best, &self.store, Some(self.adam.state()))
    }

    /// Backprop `loss`, update, log; `record.total` must equal `loss`.
    fn update(&mut self, loss: &Tensor, record: StepRecord, out: Option<&Path>, last_name: &str) -> Result<()> {
        check_divergence(record.total, record.step, self.stage_cfg.divergence_threshold)?;
        if record.total < self.best {
            self.best = record.total;
            self.best_params = Some(snapshot(&self.store)?);
        }
        let grads = loss.backward()?;
        self.adam.step(&self.store, &grads)?;
        self.store.ensure_finite().map_err(|_| Error::Divergence {
            step: record.step,
            value: f64::NAN,
        })?;
        log::info!(
            "{} step {}: loss {:.6} (int {:.6}, grad {:.6}, diff {:.6})",
            self.stage.as_str(),
            record.step,
            record.total,
            record.int,
            record.grad,
            record.diff
        );
        self.records.push(record);
        let every = self.stage_cfg.checkpoint_every as u64;
        if every > 0 && record.step % every == 0 {
            save_to(out, last_name, &self.checkpoint(record.step)?)?;
        }
        Ok(())
    }

    fn finish(self, end: u64, out: Option<&Path>, names: (&str, &str), warnings: Vec<String>) -> Result<TrainOutcome> {
        let last = self.checkpoint(end)?;
        save_to(out, names.0, &last)?;
        let best = match &self.best_params {
            Some(params) => {
                let mut ck = last.clone();
                ck.params = params.iter().cloned().collect();
                ck.adam = None;
                save_to(out, names.1, &ck)?;
                Some(ck)
            }
            None => None,
        };
        Ok(TrainOutcome {
            last,
            best,
            records: self.records,
            warnings,
        })
    }
}

fn crop_pair(pair: &ImagePair, y: usize, x: usize, size: usize) -> Result<ImagePair> {
    ImagePair::new(pair.id.clone(), pair.ir.crop(y, x, size, size)?, pair.vis.crop(y, x, size, size)?)
}

fn check_pairs(pairs: &[ImagePair], size: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::from("<in-memory pairs>")));
    }
    for p in pairs {
        let (h, w) = p.dims();
        if h < size || w < size {
            return Err(Error::Dimension(format!(
                "pair {} is {h}x{w}, smaller than the {size} patch",
                p.id
            )));
        }
    }
    Ok(())
}

fn build_stage1(cfg: &RunConfig) -> Result<(ParamStore, Stage1Net)> {
    let mut store = ParamStore::new(cfg.dtype(), mix_seed(cfg.seed, "stage1/init"));
    let net = Stage1Net::new(&mut store, &cfg.stage1_model())?;
    Ok((store, net))
}

fn build_denoiser(cfg: &RunConfig) -> Result<(ParamStore, Denoiser)> {
    let mut store = ParamStore::new(cfg.dtype(), mix_seed(cfg.seed, "stage2/init"));
    let net = Denoiser::new(&mut store, &cfg.model.denoiser)?;
    Ok((store, net))
}

/// Optimize the Stage-I network on `L_grad + L_int`.
///
/// With `resume`, training continues from the checkpoint's step and follows
/// the same trajectory as an uninterrupted run. Checkpoints are written to
/// `out` when given.
pub fn train_stage1(
    cfg: &RunConfig,
    pairs: &[ImagePair],
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.ablation.no_stage1 {
        return Err(Error::Config("no_stage1 is set; Stage I is not trained".into()));
    }
    let size = cfg.data.patch_size;
    check_pairs(pairs, size)?;
    let (store, net) = build_stage1(cfg)?;
    let mut lp = Loop::new(cfg, StageTag::Stage1, store, resume)?;
    let batch = cfg.stage_batch(&cfg.stage1);
    let steps = total_steps(&cfg.stage1, pairs.len(), batch);
    let (dtype, dev) = (cfg.dtype(), Device::Cpu);
    for s in lp.start as usize..steps {
        let idx = batch_indices(cfg.seed, "stage1", s, pairs.len(), batch);
        let mut crops = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let (h, w) = pairs[i].dims();
            let (y, x) = patch_origin(h, w, size, mix_seed(cfg.seed, &format!("stage1/patch/{s}/{k}")))?;
            crops.push(crop_pair(&pairs[i], y, x, size)?);
        }
        let ir = stack_images(&crops.iter().map(|p| &p.ir).collect::<Vec<_>>(), dtype, &dev)?;
        let vis = stack_images(&crops.iter().map(|p| &p.vis).collect::<Vec<_>>(), dtype, &dev)?;
        let f1 = net.forward(&ir, &vis)?;
        let l = stage1_loss(&f1, &ir, &vis)?;
        let record = StepRecord {
            step: s as u64 + 1,
            total: scalar(&l.total)?,
            int: scalar(&l.int)?,
            grad: scalar(&l.grad)?,
            diff: 0.0,
        };
        lp.update(&l.total, record, out, STAGE1_LAST)?;
    }
    let end = steps.max(lp.start as usize) as u64;
    lp.finish(end, out, (STAGE1_LAST, STAGE1_BEST), Vec::new())
}

/// Masks for every pair from the configured source, after the mask
/// ablations.
pub fn masks_for_pairs(
    cfg: &RunConfig,
    entries: Option<&[IndexEntry]>,
    pairs: &[ImagePair],
) -> Result<(Vec<MaskPair>, Vec<String>)> {
    let provider = cfg.mask_source().provider()?;
    let mut masks = Vec::with_capacity(pairs.len());
    let mut warnings = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let entry = entries.and_then(|e| e.iter().find(|e| e.id == p.id));
        let (m, w) = provider.masks_for(entry, p, i as u64)?;
        log::debug!("{}: masks from {}", p.id, m.provenance());
        masks.push(m.ablate(cfg.ablation.no_ir_mask, cfg.ablation.no_vis_mask));
        warnings.extend(w);
    }
    Ok((masks, warnings))
}

/// All-zero masks for runs that never read them (`no_stage2`).
pub fn placeholder_masks(pair: &ImagePair) -> Result<MaskPair> {
    let (h, w) = pair.dims();
    MaskPair::new(Image::filled(h, w, 1, 0.0)?, Image::filled(h, w, 1, 0.0)?, MaskProvenance::Ablated)
}

/// `F₁` stand-in when Stage I is ablated: the mean of the broadcast infrared
/// frame and the visible frame.
pub fn source_average(pair: &ImagePair) -> Result<FusedImage> {
    let (h, w) = pair.dims();
    let img = Image::from_fn(h, w, 3, ValueRange::Unit, |(y, x, c)| {
        0.5 * (pair.ir.get(y, x, 0) + pair.vis.get(y, x, c))
    })?;
    FusedImage::new(img, FusionStage::Preliminary)
}

/// Inputs of Stage-II training: pairs with their preliminary fusions and
/// masks, all at full resolution.
#[derive(Debug, Clone)]
pub struct Stage2Data {
    pub pairs: Vec<ImagePair>,
    pub f1: Vec<FusedImage>,
    pub masks: Vec<MaskPair>,
}

impl Stage2Data {
    pub fn prepare(
        cfg: &RunConfig,
        pairs: Vec<ImagePair>,
        masks: Vec<MaskPair>,
        stage1: Option<&Checkpoint>,
    ) -> Result<Self> {
        if pairs.len() != masks.len() {
            return Err(Error::Value(format!("{} pairs but {} mask pairs", pairs.len(), masks.len())));
        }
        for (p, m) in pairs.iter().zip(&masks) {
            m.ensure_matches(p)?;
        }
        let f1 = match preliminary_model(cfg, stage1)? {
            Some((_, net)) => pairs
                .iter()
                .map(|p| net.fuse_pair(p, cfg.dtype()))
                .collect::<Result<_>>()?,
            None => pairs.iter().map(source_average).collect::<Result<_>>()?,
        };
        Ok(Stage2Data { pairs, f1, masks })
    }
}

/// Frozen Stage-I network, or `None` under `no_stage1`.
fn preliminary_model(cfg: &RunConfig, ck: Option<&Checkpoint>) -> Result<Option<(ParamStore, Stage1Net)>> {
    if cfg.ablation.no_stage1 {
        return Ok(None);
    }
    let ck = ck.ok_or_else(|| Error::Config("a Stage-I checkpoint is required".into()))?;
    let (store, _) = build_stage1(cfg)?;
    ck.load_into(&store, StageTag::Stage1)?;
    let mut frozen = store.frozen();
    let net = Stage1Net::new(&mut frozen, &cfg.stage1_model())?;
    Ok(Some((store, net)))
}

/// One Stage-II training batch, `(B, C, P, P)` tensors.
#[derive(Debug, Clone)]
pub struct Stage2Batch {
    pub cond: Tensor,
    pub ir: Tensor,
    pub vis: Tensor,
    pub m_ir: Tensor,
    pub m_vis: Tensor,
}

impl Stage2Batch {
    pub fn from_parts(parts: &[(ImagePair, FusedImage, MaskPair)], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let conds = parts
            .iter()
            .map(|(_, f, m)| to_conditioned_sample(f, m)?.to_tensor(dtype, &dev))
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: &dyn Fn(&(ImagePair, FusedImage, MaskPair)) -> &Image| {
            stack_images(&parts.iter().map(f).collect::<Vec<_>>(), dtype, &dev)
        };
        Ok(Stage2Batch {
            cond: Tensor::cat(&conds, 0)?,
            ir: stack(&|p| &p.0.ir)?,
            vis: stack(&|p| &p.0.vis)?,
            m_ir: stack(&|p| p.2.m_ir())?,
            m_vis: stack(&|p| p.2.m_vis())?,
        })
    }
}

/// Terms of the joint Stage-II objective.
#[derive(Debug, Clone)]
pub struct Stage2Terms {
    /// `w·L_diff + λ₁·L_int^mask + λ₂·L_grad^mask`.
    pub total: Tensor,
    /// Absent under `no_diffusion`.
    pub diff: Option<Tensor>,
    pub loss: Stage2Loss,
    pub fused: Tensor,
}

/// Map averaged features and `x̂₀` predictions to the fused image.
fn decode(model: &Denoiser, cfg: &RunConfig, features: &[Tensor], x0: &Tensor) -> Result<Tensor> {
    if cfg.ablation.no_hfah {
        Ok(((x0.narrow(1, 0, 3)? + 1.0)? * 0.5)?.clamp(0.0, 1.0)?)
    } else {
        model.hfah.forward(features)
    }
}

/// The Stage-II objective on one batch.
///
/// The batch is replicated into `1 + |S|` groups run through a single U-Net
/// pass: the first group at uniform random timesteps, one group per feature
/// timestep in `S`. Every group contributes to the noise-prediction loss;
/// the `S` groups' features are averaged and decoded into the fused image,
/// which is how inference consumes them.
pub fn stage2_objective(
    model: &Denoiser,
    batch: &Stage2Batch,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    timesteps: &BTreeSet<usize>,
    noise_seed: u64,
) -> Result<Stage2Terms> {
    let cond = &batch.cond;
    let b = cond.dim(0)?;
    let (features, x0, diff) = if cfg.ablation.no_diffusion {
        let out = model.unet.forward(cond, &vec![1; b])?;
        let x0 = predict_x0(cond, 1, &out.eps, sched)?;
        (out.features, x0, None)
    } else {
        if timesteps.is_empty() {
            return Err(Error::Config("feature timestep set is empty".into()));
        }
        let mut rng = noise_rng(noise_seed, "stage2/objective");
        let mut ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        for &t in timesteps {
            ts.extend(std::iter::repeat_n(t, b));
        }
        let groups = 1 + timesteps.len();
        let x0_all = Tensor::cat(&vec![cond; groups], 0)?;
        let eps = gaussian(x0_all.shape(), &mut rng, cond.dtype(), cond.device())?;
        let x = q_sample_batch(&x0_all, &ts, &eps, sched)?;
        let out = model.unet.forward(&x, &ts)?;
        let diff = diffusion_loss(&eps, &out.eps)?;
        let n = timesteps.len() as f64;
        let mut x0_sum: Option<Tensor> = None;
        for (g, &t) in timesteps.iter().enumerate() {
            let at = (g + 1) * b;
            let p = predict_x0(&x.narrow(0, at, b)?, t, &out.eps.narrow(0, at, b)?, sched)?;
            x0_sum = Some(match x0_sum {
                None => p,
                Some(s) => (s + p)?,
            });
        }
        let features = out
            .features
            .iter()
            .map(|f| {
                let mut acc = f.narrow(0, b, b)?;
                for g in 2..groups {
                    acc = (acc + f.narrow(0, g * b, b)?)?;
                }
                Ok((acc / n)?)
            })
            .collect::<Result<Vec<_>>>()?;
        (features, (x0_sum.expect("non-empty set") / n)?, Some(diff))
    };
    let fused = decode(model, cfg, &features, &x0)?;
    let loss = stage2_loss(&fused, &batch.ir, &batch.vis, &batch.m_ir, &batch.m_vis, &cfg.loss.weights())?;
    let total = match &diff {
        Some(d) => ((d * cfg.loss.diffusion_weight)? + &loss.total)?,
        None => loss.total.clone(),
    };
    Ok(Stage2Terms { total, diff, loss, fused })
}

/// Optimize the denoiser and aggregation head on the joint objective with
/// Stage I frozen (its outputs are precomputed in `data`).
pub fn train_stage2(
    cfg: &RunConfig,
    data: &Stage2Data,
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.ablation.no_stage2 {
        return Err(Error::Config("no_stage2 is set; Stage II is not trained".into()));
    }
    let size = cfg.data.patch_size;
    check_pairs(&data.pairs, size)?;
    let sched = cfg.diffusion.schedule()?;
    let timesteps = cfg.feature_timesteps()?;
    let (store, model) = build_denoiser(cfg)?;
    let mut lp = Loop::new(cfg, StageTag::Stage2, store, resume)?;
    let batch = cfg.stage_batch(&cfg.stage2);
    let n = data.pairs.len();
    let steps = total_steps(&cfg.stage2, n, batch);
    for s in lp.start as usize..steps {
        let idx = batch_indices(cfg.seed, "stage2", s, n, batch);
        let mut parts = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let (h, w) = data.pairs[i].dims();
            let (y, x) = patch_origin(h, w, size, mix_seed(cfg.seed, &format!("stage2/patch/{s}/{k}")))?;
            let f1 = FusedImage::new(data.f1[i].image().crop(y, x, size, size)?, FusionStage::Preliminary)?;
            parts.push((crop_pair(&data.pairs[i], y, x, size)?, f1, data.masks[i].crop(y, x, size, size)?));
        }
        let b = Stage2Batch::from_parts(&parts, cfg.dtype())?;
        let terms = stage2_objective(
            &model,
            &b,
            cfg,
            &sched,
            &timesteps,
            mix_seed(cfg.seed, &format!("stage2/noise/{s}")),
        )?;
        let record = StepRecord {
            step: s as u64 + 1,
            total: scalar(&terms.total)?,
            int: scalar(&terms.loss.int)?,
            grad: scalar(&terms.loss.grad)?,
            diff: terms.diff.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        };
        lp.update(&terms.total, record, out, STAGE2_LAST)?;
    }
    let end = steps.max(lp.start as usize) as u64;
    lp.finish(end, out, (STAGE2_LAST, STAGE2_BEST), Vec::new())
}

/// Trained models ready for inference.
pub struct Pipeline {
    cfg: RunConfig,
    stage1: Option<(ParamStore, Stage1Net)>,
    stage2: Option<(ParamStore, Denoiser)>,
    sched: NoiseSchedule,
    timesteps: BTreeSet<usize>,
}

impl Pipeline {
    /// Checkpoints are required for every stage the ablation flags keep.
    pub fn new(cfg: &RunConfig, stage1: Option<&Checkpoint>, stage2: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let s2 = if cfg.ablation.no_stage2 {
            None
        } else {
            let ck = stage2.ok_or_else(|| Error::Config("a Stage-II checkpoint is required".into()))?;
            let (store, _) = build_denoiser(cfg)?;
            ck.load_into(&store, StageTag::Stage2)?;
            let mut frozen = store.frozen();
            let model = Denoiser::new(&mut frozen, &cfg.model.denoiser)?;
            Some((store, model))
        };
        Ok(Pipeline {
            cfg: cfg.clone(),
            stage1: preliminary_model(cfg, stage1)?,
            stage2: s2,
            sched: cfg.diffusion.schedule()?,
            timesteps: cfg.feature_timesteps()?,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Stage-I output (or its ablation stand-in) at full resolution.
    pub fn preliminary(&self, pair: &ImagePair) -> Result<FusedImage> {
        match &self.stage1 {
            Some((_, net)) => net.fuse_pair(pair, self.cfg.dtype()),
            None => source_average(pair),
        }
    }

    /// End-to-end fusion at the pair's own resolution.
    pub fn fuse(&self, pair: &ImagePair, masks: &MaskPair) -> Result<FusedImage> {
        masks.ensure_matches(pair)?;
        let f1 = self.preliminary(pair)?;
        let Some((_, model)) = &self.stage2 else {
            return FusedImage::new(f1.into_image(), FusionStage::Final);
        };
        let (h, w) = pair.dims();
        let m = self.cfg.model.denoiser.unet.multiple();
        let masks = masks
            .ablate(self.cfg.ablation.no_ir_mask, self.cfg.ablation.no_vis_mask)
            .reflect_pad_to_multiple(m)?;
        let f1 = FusedImage::new(f1.image().reflect_pad_to_multiple(m)?, FusionStage::Preliminary)?;
        let cond = to_conditioned_sample(&f1, &masks)?.to_tensor(self.cfg.dtype(), &Device::Cpu)?;
        let out = refine(model, &cond, &self.cfg, &self.sched, &self.timesteps, self.cfg.seed)?;
        let out = out.narrow(2, 0, h)?.narrow(3, 0, w)?.to_dtype(DType::F64)?;
        FusedImage::from_tensor(&out, FusionStage::Final)
    }
}

/// Inference-time Stage II on a conditioned sample.
pub fn refine(
    model: &Denoiser,
    cond: &Tensor,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    timesteps: &BTreeSet<usize>,
    seed: u64,
) -> Result<Tensor> {
    let b = cond.dim(0)?;
    if cfg.ablation.no_diffusion {
        let out = model.unet.forward(cond, &vec![1; b])?;
        let x0 = predict_x0(cond, 1, &out.eps, sched)?;
        return decode(model, cfg, &out.features, &x0);
    }
    match (cfg.diffusion.inference, cfg.ablation.no_hfah) {
        (InferenceMode::Timesteps, false) => fused_from_timesteps(cond, timesteps, model, sched, seed),
        (InferenceMode::Chain, false) => fused_from_chain(
            cond,
            cfg.diffusion.chain_start(),
            timesteps,
            model,
            sched,
            seed,
            cfg.diffusion.posterior_noise,
        ),
        (InferenceMode::Timesteps, true) => {
            let mut sum: Option<Tensor> = None;
            for &t in timesteps {
                let mut rng = noise_rng(seed, &format!("features/t{t}"));
                let eps = gaussian(cond.shape(), &mut rng, cond.dtype(), cond.device())?;
                let x = q_sample(cond, t, &eps, sched)?;
                let p = predict_x0(&x, t, &model.unet.forward(&x, &vec![t; b])?.eps, sched)?;
                sum = Some(match sum {
                    None => p,
                    Some(s) => (s + p)?,
                });
            }
            let x0 = (sum.ok_or_else(|| Error::Config("feature timestep set is empty".into()))?
                / timesteps.len() as f64)?;
            decode(model, cfg, &[], &x0)
        }
        (InferenceMode::Chain, true) => {
            let out = sample_chain(
                cond,
                cfg.diffusion.chain_start(),
                &model.unet,
                sched,
                seed,
                &ChainOptions {
                    posterior_noise: cfg.diffusion.posterior_noise,
                    record: BTreeSet::new(),
                },
            )?;
            decode(model, cfg, &[], &out.sample)
        }
    }
}

/// Result of one ablation variant.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub label: String,
    pub report: MetricReport,
    pub stage1: Option<TrainOutcome>,
    pub stage2: Option<TrainOutcome>,
    pub fused: Vec<FusedImage>,
}

/// Train whatever the variant needs, fuse every test pair and score it.
///
/// `stage1` is reused when given and shape-compatible with the variant.
pub fn run_variant(
    cfg: &RunConfig,
    train: &[ImagePair],
    test: &[ImagePair],
    stage1: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<VariantRun> {
    let reusable = |ck: &&Checkpoint| {
        let (store, _) = build_stage1(cfg).ok()?;
        ck.mismatches(&store).is_empty().then_some(())
    };
    let mut s1_outcome = None;
    let s1_ck: Option<Checkpoint> = if cfg.ablation.no_stage1 {
        None
    } else if let Some(ck) = stage1.filter(|c| reusable(c).is_some()) {
        Some(ck.clone())
    } else {
        let o = train_stage1(cfg, train, None, out)?;
        let ck = o.last.clone();
        s1_outcome = Some(o);
        Some(ck)
    };
    let mut s2_outcome = None;
    let s2_ck = if cfg.ablation.no_stage2 {
        None
    } else {
        let (masks, _) = masks_for_pairs(cfg, None, train)?;
        let data = Stage2Data::prepare(cfg, train.to_vec(), masks, s1_ck.as_ref())?;
        let o = train_stage2(cfg, &data, None, out)?;
        let ck = o.last.clone();
        s2_outcome = Some(o);
        Some(ck)
    };
    let pipeline = Pipeline::new(cfg, s1_ck.as_ref(), s2_ck.as_ref())?;
    let (masks, mut warnings) = masks_for_pairs(cfg, None, test)?;
    let mut rows = Vec::new();
    let mut fused = Vec::new();
    for (p, m) in test.iter().zip(&masks) {
        let f = pipeline.fuse(p, m)?;
        let (v, w) = evaluate_images(f.image(), p, &cfg.metrics)?;
        warnings.extend(w.into_iter().map(|s| format!("{}: {s}", p.id)));
        rows.push((p.id.clone(), v));
        fused.push(f);
    }
    let mut report = MetricReport::from_rows(rows);
    report.warnings = warnings;
    Ok(VariantRun {
        label: cfg.ablation.label(),
        report,
        stage1: s1_outcome,
        stage2: s2_outcome,
        fused,
    })
}

/// The ablation grid: each switch alone plus the repeat variants.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = vec![base.clone()];
    let flags: [fn(&mut RunConfig); 7] = [
        |c| c.ablation.no_sam = true,
        |c| c.ablation.no_ir_mask = true,
        |c| c.ablation.no_vis_mask = true,
        |c| c.ablation.no_stage1 = true,
        |c| c.ablation.no_stage2 = true,
        |c| c.ablation.no_diffusion = true,
        |c| c.ablation.no_hfah = true,
    ];
    for set in flags {
        let mut c = base.clone();
        set(&mut c);
        out.push(c);
    }
    for r in [2, 3, 4] {
        let mut c = base.clone();
        c.ablation.msfem_repeats = Some(r);
        out.push(c);
        let mut c = base.clone();
        c.ablation.tb_repeats = Some(r);
        out.push(c);
    }
    out
}

/// Default checkpoint locations under the runs directory.
pub fn checkpoint_paths(runs: &Path) -> (PathBuf, PathBuf) {
    (runs.join(STAGE1_LAST), runs.join(STAGE2_LAST))
}
