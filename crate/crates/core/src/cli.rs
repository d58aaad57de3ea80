//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures. Every successful run writes a JSON manifest to
//! `<runs>/<subcommand>.manifest.json`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{file_hash, Checkpoint};
use crate::config::{resolve, RunConfig};
use crate::datamodel::ImagePair;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::ingest::{load_pair, scan_dataset, DatasetIndex};
use crate::maskprovider::{save_masks, MaskSource};
use crate::metrics::{evaluate_all, fused_path};
use crate::nn::ParamStore;
use crate::stage1::param_count;
use crate::trainer::{
    masks_for_pairs, train_stage1, train_stage2, Pipeline, Stage2Data, TrainOutcome, STAGE1_LAST, STAGE2_LAST,
};

#[derive(Debug, Parser)]
#[command(name = "sgdfuse", version, about = "Two-stage infrared/visible image fusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (relative to the workdir).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the Stage-I fusion network.
    TrainStage1 {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the Stage-II denoiser and aggregation head.
    TrainStage2 {
        /// Stage-I checkpoint (default: config, then `<runs>/stage1_last.ckpt`).
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse every pair of a dataset.
    Fuse {
        /// Dataset root (default: `data.test_root`, then `data.root`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: `paths.fused`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Score fused images against their sources.
    Eval {
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV report path (default: `paths.report`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate semantic masks into `masks_ir/` and `masks_vis/`.
    Masks {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Mask source (default: the configured one).
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        #[arg(long, default_value_t = 0.8)]
        q_ir: f64,
        #[arg(long, default_value_t = 0.8)]
        q_vis: f64,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long, default_value = "")]
        endpoint: String,
    },
    /// Print parameter counts and the config digest.
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Synthetic,
    RandomPatch,
    Remote,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Fuse { .. } => "fuse",
            Command::Eval { .. } => "eval",
            Command::Masks { .. } => "masks",
            Command::Info => "info",
        }
    }
}

/// Validation problems exit with 1, everything else with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Value(_) | Error::Range(_) => 1,
        _ => 2,
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Load the configuration named on the command line (defaults otherwise).
pub fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    match &global.config {
        Some(p) => RunConfig::load(&resolve(&global.workdir, p), &global.overrides),
        None => RunConfig::from_toml_with("", &global.overrides),
    }
}

struct Ctx<'a> {
    cfg: RunConfig,
    workdir: &'a Path,
    runs: PathBuf,
    started: Instant,
    manifest: serde_json::Map<String, Value>,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(self.workdir, p)
    }

    fn record(&mut self, key: &str, v: Value) {
        self.manifest.insert(key.into(), v);
    }

    fn hash_checkpoint(&mut self, key: &str, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        let entry = self
            .manifest
            .entry("checkpoints")
            .or_insert_with(|| json!({}));
        entry[key] = json!({ "path": path.display().to_string(), "sha256": h });
        Ok(())
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.record("wall_time_s", json!(self.started.elapsed().as_secs_f64()));
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.record("finished_unix", json!(stamp));
        std::fs::create_dir_all(&self.runs).map_err(|e| Error::io(&self.runs, e))?;
        let path = self.runs.join(format!("{command}.manifest.json"));
        let text = serde_json::to_string_pretty(&Value::Object(self.manifest)).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let workdir = cli.global.workdir.as_path();
    let runs = resolve(workdir, &cfg.paths.runs);
    let mut manifest = serde_json::Map::new();
    manifest.insert("command".into(), json!(cli.command.name()));
    manifest.insert("config_digest".into(), json!(cfg.digest()));
    manifest.insert("seed".into(), json!(cfg.seed));
    manifest.insert("ablation".into(), json!(cfg.ablation.label()));
    manifest.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    let mut ctx = Ctx {
        cfg,
        workdir,
        runs,
        started: Instant::now(),
        manifest,
    };
    match &cli.command {
        Command::TrainStage1 { resume } => cmd_train_stage1(&mut ctx, resume.as_deref())?,
        Command::TrainStage2 { stage1, resume } => cmd_train_stage2(&mut ctx, stage1.as_deref(), resume.as_deref())?,
        Command::Fuse {
            data,
            out,
            stage1,
            stage2,
        } => cmd_fuse(&mut ctx, data.as_deref(), out.as_deref(), stage1.as_deref(), stage2.as_deref())?,
        Command::Eval { fused, data, report } => {
            cmd_eval(&mut ctx, fused.as_deref(), data.as_deref(), report.as_deref(), cli.global.jobs)?
        }
        Command::Masks {
            data,
            source,
            q_ir,
            q_vis,
            fraction,
            endpoint,
        } => {
            let source = match source {
                None => ctx.cfg.mask_source(),
                Some(SourceArg::Synthetic) => MaskSource::Synthetic { q_ir: *q_ir, q_vis: *q_vis },
                Some(SourceArg::RandomPatch) => MaskSource::RandomPatch {
                    fraction: *fraction,
                    seed: ctx.cfg.seed,
                },
                Some(SourceArg::Remote) => MaskSource::Remote {
                    endpoint: endpoint.clone(),
                    timeout_s: 10.0,
                    max_in_flight: 4,
                    fallback: None,
                },
            };
            cmd_masks(&mut ctx, data.as_deref(), source)?
        }
        Command::Info => cmd_info(&mut ctx)?,
    }
    let name = cli.command.name();
    ctx.finish(name)
}

fn load_index(ctx: &Ctx, root: &Path, require_masks: bool) -> Result<(DatasetIndex, Vec<ImagePair>)> {
    let index = scan_dataset(ctx.path(root), require_masks)?;
    let pairs = index.entries.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
    Ok((index, pairs))
}

fn record_training(ctx: &mut Ctx, o: &TrainOutcome, last: &Path) -> Result<()> {
    ctx.record("steps", json!(o.last.step));
    ctx.record("final_loss", json!(o.records.last().map(|r| r.total)));
    ctx.record("best_loss", json!(o.last.best_loss));
    ctx.record("losses", json!(o.records));
    ctx.hash_checkpoint("last", last)
}

fn load_resume(ctx: &Ctx, p: Option<&Path>) -> Result<Option<Checkpoint>> {
    p.map(|p| Checkpoint::load(&ctx.path(p))).transpose()
}

fn cmd_train_stage1(ctx: &mut Ctx, resume: Option<&Path>) -> Result<()> {
    let (_, pairs) = load_index(ctx, &ctx.cfg.data.root.clone(), false)?;
    let resume = load_resume(ctx, resume)?;
    let o = train_stage1(&ctx.cfg, &pairs, resume.as_ref(), Some(&ctx.runs))?;
    let last = ctx.runs.join(STAGE1_LAST);
    println!("stage1: {} steps, last loss {:?}", o.last.step, o.records.last().map(|r| r.total));
    record_training(ctx, &o, &last)
}

fn stage1_path(ctx: &Ctx, flag: Option<&Path>) -> PathBuf {
    match flag.or(ctx.cfg.paths.stage1_checkpoint.as_deref()) {
        Some(p) => ctx.path(p),
        None => ctx.runs.join(STAGE1_LAST),
    }
}

fn stage2_path(ctx: &Ctx, flag: Option<&Path>) -> PathBuf {
    match flag.or(ctx.cfg.paths.stage2_checkpoint.as_deref()) {
        Some(p) => ctx.path(p),
        None => ctx.runs.join(STAGE2_LAST),
    }
}

fn load_stage1(ctx: &mut Ctx, flag: Option<&Path>) -> Result<Option<Checkpoint>> {
    if ctx.cfg.ablation.no_stage1 {
        return Ok(None);
    }
    let p = stage1_path(ctx, flag);
    let ck = Checkpoint::load(&p)?;
    ctx.hash_checkpoint("stage1", &p)?;
    Ok(Some(ck))
}

fn cmd_train_stage2(ctx: &mut Ctx, stage1: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let require = ctx.cfg.mask_source().requires_files();
    let (index, pairs) = load_index(ctx, &ctx.cfg.data.root.clone(), require)?;
    let s1 = load_stage1(ctx, stage1)?;
    let (masks, warnings) = masks_for_pairs(&ctx.cfg, Some(&index.entries), &pairs)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let data = Stage2Data::prepare(&ctx.cfg, pairs, masks, s1.as_ref())?;
    let resume = load_resume(ctx, resume)?;
    let o = train_stage2(&ctx.cfg, &data, resume.as_ref(), Some(&ctx.runs))?;
    let last = ctx.runs.join(STAGE2_LAST);
    println!("stage2: {} steps, last loss {:?}", o.last.step, o.records.last().map(|r| r.total));
    ctx.record("warnings", json!(warnings));
    record_training(ctx, &o, &last)
}

fn test_root(ctx: &Ctx, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| ctx.cfg.data.test_root.clone())
        .unwrap_or_else(|| ctx.cfg.data.root.clone())
}

fn cmd_fuse(
    ctx: &mut Ctx,
    data: Option<&Path>,
    out: Option<&Path>,
    stage1: Option<&Path>,
    stage2: Option<&Path>,
) -> Result<()> {
    let s1 = load_stage1(ctx, stage1)?;
    let s2 = if ctx.cfg.ablation.no_stage2 {
        None
    } else {
        let p = stage2_path(ctx, stage2);
        let ck = Checkpoint::load(&p)?;
        ctx.hash_checkpoint("stage2", &p)?;
        Some(ck)
    };
    let pipeline = Pipeline::new(&ctx.cfg, s1.as_ref(), s2.as_ref())?;
    let require = ctx.cfg.mask_source().requires_files() && !ctx.cfg.ablation.no_stage2;
    let (index, pairs) = load_index(ctx, &test_root(ctx, data), require)?;
    let out_dir = ctx.path(out.unwrap_or(&ctx.cfg.paths.fused));
    let (masks, warnings) = if ctx.cfg.ablation.no_stage2 {
        (Vec::new(), Vec::new())
    } else {
        masks_for_pairs(&ctx.cfg, Some(&index.entries), &pairs)?
    };
    let mut hasher = Sha256::new();
    for (i, p) in pairs.iter().enumerate() {
        let fused = match masks.get(i) {
            Some(m) => pipeline.fuse(p, m)?,
            None => pipeline.fuse(p, &crate::trainer::placeholder_masks(p)?)?,
        };
        let path = fused_path(&out_dir, &p.id);
        fused.image().save_png(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(p.id.as_bytes());
        hasher.update(Sha256::digest(&bytes));
        log::info!("fused {}", p.id);
    }
    let digest = hex::encode(hasher.finalize());
    println!("fused {} pairs into {} (output hash {digest})", pairs.len(), out_dir.display());
    ctx.record("output_dir", json!(out_dir.display().to_string()));
    ctx.record("output_count", json!(pairs.len()));
    ctx.record("output_hash", json!(digest));
    ctx.record("warnings", json!(warnings));
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, fused: Option<&Path>, data: Option<&Path>, report: Option<&Path>, jobs: usize) -> Result<()> {
    let index = scan_dataset(ctx.path(&test_root(ctx, data)), false)?;
    let fused_dir = ctx.path(fused.unwrap_or(&ctx.cfg.paths.fused));
    let r = evaluate_all(&index, &fused_dir, &ctx.cfg.metrics, jobs)?;
    let report_path = ctx.path(report.unwrap_or(&ctx.cfg.paths.report));
    r.write_csv(&report_path)?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    print!("{}", r.to_csv());
    ctx.record("report", json!(report_path.display().to_string()));
    ctx.record("evaluated", json!(r.count()));
    ctx.record("missing", json!(r.missing));
    ctx.record("report_sha256", json!(file_hash(&report_path)?));
    if !r.missing.is_empty() {
        return Err(Error::Value(format!("{} pairs have no fused image", r.missing.len())));
    }
    Ok(())
}

fn cmd_masks(ctx: &mut Ctx, data: Option<&Path>, source: MaskSource) -> Result<()> {
    let root = ctx.path(data.unwrap_or(&ctx.cfg.data.root));
    let index = scan_dataset(&root, false)?;
    let provider = source.provider()?;
    let mut written = 0;
    let mut warnings = Vec::new();
    for (i, e) in index.entries.iter().enumerate() {
        let pair = load_pair(e)?;
        let (m, w) = provider.masks_for(Some(e), &pair, i as u64)?;
        save_masks(&root, &e.id, &m)?;
        warnings.extend(w);
        written += 1;
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    println!("wrote {written} mask pairs under {}", root.display());
    ctx.record("source", serde_json::to_value(&source).expect("mask source serializes"));
    ctx.record("written", json!(written));
    ctx.record("warnings", json!(warnings));
    Ok(())
}

fn cmd_info(ctx: &mut Ctx) -> Result<()> {
    let s1 = param_count(&ctx.cfg.stage1_model());
    let mut store = ParamStore::new(ctx.cfg.dtype(), 0);
    Denoiser::new(&mut store, &ctx.cfg.model.denoiser)?;
    let s2 = store.num_params();
    println!("config digest: {}", ctx.cfg.digest());
    println!("stage1 parameters: {s1}");
    println!("stage2 parameters: {s2}");
    println!("ablation: {}", ctx.cfg.ablation.label());
    ctx.record("stage1_parameters", json!(s1));
    ctx.record("stage2_parameters", json!(s2));
    Ok(())
}
