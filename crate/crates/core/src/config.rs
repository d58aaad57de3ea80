//! Run configuration: TOML schema, dotted overrides, validation, digest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::maskprovider::MaskSource;
use crate::metrics::MetricParams;
use crate::stage1::Stage1Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training split root (contains `ir/` and `vis/`).
    pub root: PathBuf,
    /// Evaluation split root; defaults to `root`.
    pub test_root: Option<PathBuf>,
    pub patch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data/train"),
            test_root: None,
            patch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            batch: 24,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Length and bookkeeping of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    /// Caps the step count below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    /// Overrides the optimizer batch size for this stage.
    pub batch: Option<usize>,
    /// Overrides the optimizer learning rate for this stage.
    pub lr: Option<f64>,
    /// Save a `last` checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Abort when the loss exceeds this value.
    pub divergence_threshold: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 200,
            max_steps: None,
            batch: None,
            lr: None,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage1: Stage1Config,
    pub denoiser: DenoiserConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Forward passes at the feature timesteps.
    #[default]
    Timesteps,
    /// Full reverse chain, recording features on the way down.
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    /// Defined against a 1000-step schedule and rescaled to `steps`.
    pub feature_timesteps: Vec<usize>,
    pub inference: InferenceMode,
    /// Chain start; defaults to `steps`.
    pub chain_start: Option<usize>,
    pub posterior_noise: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
            feature_timesteps: vec![5, 50, 100],
            inference: InferenceMode::Timesteps,
            chain_start: None,
            posterior_noise: false,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }

    pub fn chain_start(&self) -> usize {
        self.chain_start.unwrap_or(self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the noise-prediction term in the Stage-II objective.
    pub diffusion_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            diffusion_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// Ablation switches; all off reproduces the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub no_sam: bool,
    pub no_ir_mask: bool,
    pub no_vis_mask: bool,
    pub no_stage1: bool,
    pub no_stage2: bool,
    pub no_diffusion: bool,
    pub no_hfah: bool,
    pub msfem_repeats: Option<usize>,
    pub tb_repeats: Option<usize>,
}

impl AblationConfig {
    /// Short label such as `full` or `no_sam+no_hfah`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = [
            ("no_sam", self.no_sam),
            ("no_ir_mask", self.no_ir_mask),
            ("no_vis_mask", self.no_vis_mask),
            ("no_stage1", self.no_stage1),
            ("no_stage2", self.no_stage2),
            ("no_diffusion", self.no_diffusion),
            ("no_hfah", self.no_hfah),
        ]
        .iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n.to_string())
        .collect();
        if let Some(r) = self.msfem_repeats {
            parts.push(format!("msfem{r}"));
        }
        if let Some(r) = self.tb_repeats {
            parts.push(format!("tb{r}"));
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Checkpoints and manifests go here.
    pub runs: PathBuf,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    pub fused: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            runs: PathBuf::from("runs"),
            stage1_checkpoint: None,
            stage2_checkpoint: None,
            fused: PathBuf::from("fused"),
            report: PathBuf::from("report.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossConfig,
    pub masks: MaskSource,
    pub ablation: AblationConfig,
    pub metrics: MetricParams,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossConfig::default(),
            masks: MaskSource::default(),
            ablation: AblationConfig::default(),
            metrics: MetricParams::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn positive(v: f64, name: &str) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse, apply `key.path=value` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        positive(self.optimizer.lr, "optimizer.lr").or_else(|e| {
            if self.optimizer.lr == 0.0 {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if let Some(lr) = s.lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("{name}.lr must be non-negative, got {lr}")));
                }
            }
            if s.batch == Some(0) {
                return Err(Error::Config(format!("{name}.batch must be positive")));
            }
            positive(s.divergence_threshold, &format!("{name}.divergence_threshold"))?;
        }
        if self.optimizer.batch == 0 {
            return Err(Error::Config("optimizer.batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        positive(self.optimizer.eps, "optimizer.eps")?;
        self.stage1_model().validate()?;
        self.model.denoiser.validate()?;
        let multiple = self.patch_multiple();
        if self.data.patch_size == 0 || self.data.patch_size % multiple != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {multiple}",
                self.data.patch_size
            )));
        }
        let sched = self.diffusion.schedule()?;
        if self.diffusion.feature_timesteps.is_empty() {
            return Err(Error::Config("diffusion.feature_timesteps must not be empty".into()));
        }
        if let Some(&t) = self.diffusion.feature_timesteps.iter().find(|&&t| t == 0 || t > 1000) {
            return Err(Error::Config(format!("feature timestep {t} outside [1, 1000]")));
        }
        let start = self.diffusion.chain_start();
        if start == 0 || start > sched.steps() {
            return Err(Error::Config(format!(
                "chain_start {start} outside [1, {}]",
                sched.steps()
            )));
        }
        self.loss.weights().validate()?;
        if !(self.loss.diffusion_weight >= 0.0) {
            return Err(Error::Config("loss.diffusion_weight must be non-negative".into()));
        }
        self.masks.validate()?;
        for (name, r) in [
            ("msfem_repeats", self.ablation.msfem_repeats),
            ("tb_repeats", self.ablation.tb_repeats),
        ] {
            if r == Some(0) {
                return Err(Error::Config(format!("ablation.{name} must be at least 1")));
            }
        }
        if self.ablation.no_stage1 && self.ablation.no_stage2 {
            return Err(Error::Config("no_stage1 and no_stage2 leave nothing to run".into()));
        }
        Ok(())
    }

    /// Stage-I architecture after the repeat ablations.
    pub fn stage1_model(&self) -> Stage1Config {
        let mut c = self.model.stage1;
        if let Some(r) = self.ablation.msfem_repeats {
            c.msfem.repeats = r;
        }
        if let Some(r) = self.ablation.tb_repeats {
            c.tb.repeats = r;
        }
        c
    }

    /// Patch and padding multiple shared by both stages.
    pub fn patch_multiple(&self) -> usize {
        lcm(self.model.stage1.tb.window, self.model.denoiser.unet.multiple())
    }

    pub fn feature_timesteps(&self) -> Result<BTreeSet<usize>> {
        let sched = self.diffusion.schedule()?;
        Ok(crate::denoiser::feature_timesteps(&self.diffusion.feature_timesteps, &sched))
    }

    /// Mask source after the `no_sam` ablation.
    pub fn mask_source(&self) -> MaskSource {
        if self.ablation.no_sam {
            MaskSource::RandomPatch {
                fraction: 0.25,
                seed: self.seed,
            }
        } else {
            self.masks.clone()
        }
    }

    pub fn stage_batch(&self, stage: &StageConfig) -> usize {
        stage.batch.unwrap_or(self.optimizer.batch)
    }

    pub fn stage_lr(&self, stage: &StageConfig) -> f64 {
        stage.lr.unwrap_or(self.optimizer.lr)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Set `a.b.c=value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Resolve a configured path against a working directory.
pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}
