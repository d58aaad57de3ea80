// End-to-end acceptance run. Every criterion is evaluated, one line is
// printed per criterion, and the test fails afterwards if any of them did.
//
//     cargo test --test acceptance -- --nocapture

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgdfuse::checkpoint::Checkpoint;
use sgdfuse::config::RunConfig;
use sgdfuse::datamodel::{to_conditioned_sample, ConditionedSample, FusedImage, FusionStage, Image, ImagePair, ValueRange};
use sgdfuse::denoiser::{Denoiser, Hfah};
use sgdfuse::diffusion::{
    gaussian, make_schedule, q_sample, q_step, sample_chain, ChainOptions, NoiseSchedule, OraclePredictor, ScheduleKind,
};
use sgdfuse::losses::{
    joint_mask, mask_grad_loss, mask_int_loss, stage1_loss, stage2_loss, stage2_loss_for, LossWeights,
};
use sgdfuse::metrics::{self, Metric};
use sgdfuse::nn::ParamStore;
use sgdfuse::stage1::{Msfem, TbConfig, TransformerBlock};
use sgdfuse::synthetic::{synthetic_pair, synthetic_pairs, SyntheticSpec};
use sgdfuse::trainer::{
    ablation_grid, masks_for_pairs, run_variant, stage2_objective, train_stage1, train_stage2, Pipeline, Stage2Batch,
    Stage2Data,
};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn config(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_with("", &o).expect("valid overrides")
}

fn default_schedule(steps: usize) -> NoiseSchedule {
    make_schedule(steps, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
}

fn moments(t: &Tensor) -> Res<(f64, f64)> {
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn max_abs(t: &Tensor) -> Res<f64> {
    Ok(t.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn scalar(t: &Tensor) -> Res<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

const DRAWS: usize = 100_000;
const X0: f64 = 1.0;

fn c1_marginal() -> Res<Verdict> {
    let start = Instant::now();
    let sched = default_schedule(100);
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ts = BTreeSet::new();
    while ts.len() < 3 {
        ts.insert(rng.random_range(1..=100usize));
    }
    let i0 = Tensor::full(X0, DRAWS, &dev)?;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for &t in &ts {
        let eps = gaussian(DRAWS, &mut rng, DType::F64, &dev)?;
        let (mean, var) = moments(&q_sample(&i0, t, &eps, &sched)?)?;
        let ab = sched.alpha_bar(t)?;
        let e = rel(mean, ab.sqrt() * X0).max(rel(var, 1.0 - ab));
        worst = worst.max(e);
        parts.push(format!("t={t} {:.3}%", 100.0 * e));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 0.01 && secs < 30.0, parts.join(", "))
}

fn c2_composition() -> Res<Verdict> {
    let start = Instant::now();
    let sched = default_schedule(100);
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = Tensor::full(X0, DRAWS, &dev)?;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for t in 1..=20 {
        let eps = gaussian(DRAWS, &mut rng, DType::F64, &dev)?;
        x = q_step(&x, t, &eps, &sched)?;
        if [5, 20].contains(&t) {
            let (mean, var) = moments(&x)?;
            let ab = sched.alpha_bar(t)?;
            let e = rel(mean, ab.sqrt() * X0).max(rel(var, 1.0 - ab));
            worst = worst.max(e);
            parts.push(format!("t={t} {:.3}%", 100.0 * e));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 0.01 && secs < 60.0, parts.join(", "))
}

fn c3_oracle_chain() -> Res<Verdict> {
    let start = Instant::now();
    let sched = default_schedule(50);
    let cfg = RunConfig::default();
    let pair = synthetic_pair("chain", &SyntheticSpec::default(), 3)?;
    let (masks, _) = masks_for_pairs(&cfg, None, std::slice::from_ref(&pair))?;
    let f1 = sgdfuse::trainer::source_average(&pair)?;
    let clean = to_conditioned_sample(&f1, &masks[0])?.to_tensor(DType::F64, &Device::Cpu)?;
    let oracle = OraclePredictor { clean: &clean, sched: &sched };
    let out = sample_chain(&clean, 50, &oracle, &sched, 5, &ChainOptions::default())?;
    let err = max_abs(&(out.sample - &clean)?)?;
    let secs = start.elapsed().as_secs_f64();
    verdict(err <= 1e-3 && secs < 10.0, format!("max error {err:.2e}"))
}

fn rand_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Res<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn c4_losses() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dev = Device::Cpu;
    let ir = rand_tensor((1, 1, 8, 8), &mut rng)?;
    let vis = rand_tensor((1, 3, 8, 8), &mut rng)?;
    let ones = Tensor::ones((1, 1, 8, 8), DType::F64, &dev)?;
    let zeros = Tensor::zeros((1, 1, 8, 8), DType::F64, &dev)?;
    let mut failed = Vec::new();
    let mut exact = |name: &str, v: f64, want: f64| {
        if v != want {
            failed.push(format!("{name}={v:e}"));
        }
    };

    exact("stage1 grad, F=vis", scalar(&stage1_loss(&vis, &ir, &vis)?.grad)?, 0.0);
    let ir3 = ir.broadcast_as((1, 3, 8, 8))?.contiguous()?;
    exact("stage1 int, F=ir", scalar(&stage1_loss(&ir3, &ir, &vis)?.int)?, 0.0);
    exact("joint(1,0)", max_abs(&(joint_mask(&ones, &zeros)? - &ones)?)?, 0.0);
    exact("joint(0,0)", max_abs(&joint_mask(&zeros, &zeros)?)?, 0.0);
    let soft = joint_mask(&(&ones * 0.3)?, &(&ones * 0.7)?)?;
    exact("joint(0.3,0.7)", max_abs(&(soft - (&ones * 0.7)?)?)?, 0.0);

    let target = ir3.maximum(&vis)?;
    let f = rand_tensor((1, 3, 8, 8), &mut rng)?;
    exact("int, F=max", scalar(&mask_int_loss(&target, &ir, &vis, &ones)?)?, 0.0);
    exact("int, M=0", scalar(&mask_int_loss(&f, &ir, &vis, &zeros)?)?, 0.0);
    exact("grad, M=0", scalar(&mask_grad_loss(&f, &ir, &vis, &zeros)?)?, 0.0);
    // A flat source contributes no gradient, so the other source is the
    // gradient target everywhere.
    let flat_ir = (&ones * 0.4)?;
    exact("grad, flat ir", scalar(&mask_grad_loss(&vis, &flat_ir, &vis, &ones)?)?, 0.0);
    let flat_vis = Tensor::full(0.6, (1, 3, 8, 8), &dev)?;
    exact("grad, flat vis", scalar(&mask_grad_loss(&ir3, &ir, &flat_vis, &ones)?)?, 0.0);
    let none = LossWeights::new(0.0, 0.0)?;
    exact("lambda=0", scalar(&stage2_loss(&f, &ir, &vis, &ones, &zeros, &none)?.total)?, 0.0);
    exact("(0.2,0.4)", LossWeights::default().combine(0.2, 0.4), 1.5 * 0.2 + 0.4);

    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        worst = worst.max((w.combine(a, b) - (1.5 * a + 1.0 * b)).abs());
        let f = rand_tensor((1, 3, 8, 8), &mut rng)?;
        let m = rand_tensor((1, 1, 8, 8), &mut rng)?;
        let l = stage2_loss(&f, &ir, &vis, &m, &zeros, &w)?;
        let (i, g) = (scalar(&l.int)?, scalar(&l.grad)?);
        worst = worst.max((scalar(&l.total)? - (1.5 * i + 1.0 * g)).abs());
    }
    let pass = failed.is_empty() && worst <= 1e-12;
    let detail = if failed.is_empty() {
        format!("13 zero cases exact, weighting max deviation {worst:.1e}")
    } else {
        format!("non-zero: {}", failed.join(", "))
    };
    verdict(pass, detail)
}

fn toy_config() -> RunConfig {
    config(&[
        "precision=\"f64\"",
        "data.patch_size=8",
        "model.denoiser.unet.depth=4",
        "model.denoiser.unet.base_width=4",
        "model.denoiser.unet.max_width=8",
        "model.denoiser.unet.time_embed_dim=4",
        "model.denoiser.hfah.hidden=4",
        "diffusion.steps=20",
    ])
}

fn block_of(name: &str) -> &'static str {
    if name.contains(".hfah.attn") {
        "hfah attention"
    } else if name.contains(".hfah.") {
        "hfah head"
    } else if name.contains(".time") {
        "time mlp"
    } else {
        "unet conv"
    }
}

fn c5_gradients() -> Res<Verdict> {
    let start = Instant::now();
    let cfg = toy_config();
    let sched = cfg.diffusion.schedule()?;
    let timesteps = cfg.feature_timesteps()?;
    let mut store = ParamStore::new(DType::F64, 21);
    let model = Denoiser::new(&mut store, &cfg.model.denoiser)?;
    let pair = synthetic_pair("fd", &SyntheticSpec { height: 8, width: 8, ..Default::default() }, 4)?;
    let (masks, _) = masks_for_pairs(&cfg, None, std::slice::from_ref(&pair))?;
    let f1 = sgdfuse::trainer::source_average(&pair)?;
    let batch = Stage2Batch::from_parts(&[(pair, f1, masks[0].clone())], DType::F64)?;
    let objective = || -> Res<Tensor> { Ok(stage2_objective(&model, &batch, &cfg, &sched, &timesteps, 99)?.total) };

    let grads = objective()?.backward()?;
    let mut by_block: HashMap<&str, Vec<(String, usize)>> = HashMap::new();
    for (name, var) in store.vars() {
        let n = var.as_tensor().elem_count();
        by_block.entry(block_of(name)).or_default().extend((0..n).map(|i| (name.clone(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = 1e-5;
    let (mut checked, mut worst, mut bad) = (0, 0.0f64, Vec::new());
    let mut blocks: Vec<_> = by_block.keys().copied().collect();
    blocks.sort();
    for block in &blocks {
        let candidates = &by_block[block];
        for _ in 0..12 {
            let (name, i) = &candidates[rng.random_range(0..candidates.len())];
            let var: &Var = store.var(name).unwrap();
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all()?.get(*i)?.to_scalar::<f64>())
                .transpose()?
                .unwrap_or(0.0);
            let orig = var.as_tensor().clone();
            let shape = orig.dims().to_vec();
            let base = orig.flatten_all()?.to_vec1::<f64>()?;
            let eval = |delta: f64| -> Res<f64> {
                let mut v = base.clone();
                v[*i] += delta;
                store.set(name, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?)?;
                scalar(&objective()?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            store.set(name, &Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu)?)?;
            let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(e);
            checked += 1;
            if e > 1e-4 {
                bad.push(format!("{name}[{i}] {analytic:.3e} vs {numeric:.3e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && checked >= 40 && blocks.len() == 4 && secs < 300.0;
    let mut detail = format!("{checked} params over {blocks:?}, worst rel {worst:.1e}");
    if !bad.is_empty() {
        detail.push_str(&format!("; mismatches: {}", bad.join("; ")));
    }
    verdict(pass, detail)
}

// Brute-force metric references over integer gray levels.
mod reference {
    use super::*;

    pub fn levels(p: &Array2<f64>) -> Vec<i64> {
        p.iter().map(|&v| v.round() as i64).collect()
    }

    fn entropy<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>) -> f64 {
        let mut counts: HashMap<K, usize> = HashMap::new();
        let mut n = 0usize;
        for k in keys {
            *counts.entry(k).or_default() += 1;
            n += 1;
        }
        counts.values().map(|&c| c as f64 / n as f64).map(|p| -p * p.log2()).sum()
    }

    pub fn en(p: &Array2<f64>) -> f64 {
        entropy(levels(p).into_iter())
    }

    pub fn sd(p: &Array2<f64>) -> f64 {
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        (p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn sf(p: &Array2<f64>) -> f64 {
        let (h, w) = p.dim();
        let (mut rf, mut cf) = (0.0, 0.0);
        for y in 0..h {
            for x in 1..w {
                rf += (p[[y, x]] - p[[y, x - 1]]).powi(2);
            }
        }
        for y in 1..h {
            for x in 0..w {
                cf += (p[[y, x]] - p[[y - 1, x]]).powi(2);
            }
        }
        (rf / (h * (w - 1)) as f64 + cf / ((h - 1) * w) as f64).sqrt()
    }

    pub fn mi(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let one = |x: &Array2<f64>| {
            let (lf, lx) = (levels(f), levels(x));
            en(f) + en(x) - entropy(lf.into_iter().zip(lx))
        };
        one(a) + one(b)
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    pub fn scd(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let v = |p: &Array2<f64>| p.iter().copied().collect::<Vec<_>>();
        let (fv, av, bv) = (v(f), v(a), v(b));
        let fb: Vec<f64> = fv.iter().zip(&bv).map(|(x, y)| x - y).collect();
        let fa: Vec<f64> = fv.iter().zip(&av).map(|(x, y)| x - y).collect();
        corr(&fb, &av) + corr(&fa, &bv)
    }

    fn edges(p: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = p.dim();
        let px = |y: i64, x: i64| p[[y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize]];
        let mut g = Array2::zeros((h, w));
        let mut a = Array2::zeros((h, w));
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
                let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
                g[[y as usize, x as usize]] = gx.hypot(gy);
                a[[y as usize, x as usize]] = match (gx == 0.0, gy == 0.0) {
                    (true, true) => 0.0,
                    (true, false) => std::f64::consts::FRAC_PI_2.copysign(gy),
                    _ => (gy / gx).atan(),
                };
            }
        }
        (g, a)
    }

    pub fn qabf(f: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        use std::f64::consts::PI;
        let logistic = |k: f64, s: f64, x: f64| (1.0 + (k * (1.0 - s)).exp()) / (1.0 + (k * (x - s)).exp());
        let (gf, af) = edges(f);
        let (mut num, mut den) = (0.0, 0.0);
        for src in [a, b] {
            let (gs, as_) = edges(src);
            for ((&g, &al), (&g2, &al2)) in gs.iter().zip(&as_).zip(gf.iter().zip(&af)) {
                let ratio = if g == 0.0 && g2 == 0.0 { 0.0 } else { g.min(g2) / g.max(g2) };
                let mut d = (al - al2).abs() % PI;
                if d > PI / 2.0 {
                    d = PI - d;
                }
                let orient = 1.0 - 2.0 * d / PI;
                let q = logistic(-15.0, 0.5, ratio) * logistic(-22.0, 0.8, orient);
                num += q * g;
                den += g;
            }
        }
        num / den
    }
}

fn random_plane(rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((8, 8), |_| rng.random_range(0..256) as f64)
}

fn c6_metrics() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (f, a, b) = (random_plane(&mut rng), random_plane(&mut rng), random_plane(&mut rng));
        let pairs = [
            (metrics::en(&f), reference::en(&f)),
            (metrics::sd(&f), reference::sd(&f)),
            (metrics::sf(&f), reference::sf(&f)),
            (metrics::mi(&f, &a, &b)?, reference::mi(&f, &a, &b)),
            (metrics::scd(&f, &a, &b)?, reference::scd(&f, &a, &b)),
            (metrics::qabf(&f, &a, &b)?, reference::qabf(&f, &a, &b)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    let uniform = Array2::from_shape_fn((16, 16), |(y, x)| (16 * y + x) as f64);
    let en = metrics::en(&uniform);
    let a = random_plane(&mut rng);
    let b = random_plane(&mut rng);
    let q = metrics::qabf(&a, &a, &a)?;
    let scd = metrics::scd(&(&a + &b), &a, &b)?;
    let pass = worst <= 1e-9 && en == 8.0 && (q - 1.0).abs() <= 1e-6 && (scd - 2.0).abs() <= 1e-9;
    verdict(
        pass,
        format!("max deviation {worst:.1e}, EN(uniform) {en}, Qabf(A,A,A) {q:.9}, SCD(A+B) {scd:.12}"),
    )
}

fn overfit_config() -> RunConfig {
    config(&[
        "model.stage1.msfem.channels=8",
        "model.stage1.tb.embed_dim=8",
        "model.denoiser.unet.base_width=16",
        "model.denoiser.unet.max_width=64",
        "model.denoiser.unet.time_embed_dim=16",
        "model.denoiser.hfah.hidden=16",
        "optimizer.lr=0.002",
        "optimizer.batch=1",
        "stage1.max_steps=500",
        "stage2.max_steps=100",
    ])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_overfit() -> Res<Verdict> {
    let cfg = overfit_config();
    let pairs = synthetic_pairs(4, &SyntheticSpec::default(), 0)?;
    let start = Instant::now();
    let s1 = train_stage1(&cfg, &pairs, None, None)?;
    let s1_secs = start.elapsed().as_secs_f64();
    let losses = s1.losses();
    let drop = 1.0 - mean(&losses[losses.len() - 4..]) / losses[0];

    let start = Instant::now();
    let pair = pairs[0].clone();
    let (masks, _) = masks_for_pairs(&cfg, None, std::slice::from_ref(&pair))?;
    let data = Stage2Data::prepare(&cfg, vec![pair.clone()], masks.clone(), Some(&s1.last))?;
    let s2 = train_stage2(&cfg, &data, None, None)?;
    let pipe = Pipeline::new(&cfg, Some(&s1.last), Some(&s2.last))?;
    let fused = pipe.fuse(&pair, &masks[0])?;
    let l2 = stage2_loss_for(&fused, &pair, &masks[0], &cfg.loss.weights())?.total;
    let diff: Vec<f64> = s2.records.iter().map(|r| r.diff).collect();
    let (d0, d1) = (mean(&diff[..10]), mean(&diff[diff.len() - 10..]));
    let s2_secs = start.elapsed().as_secs_f64();

    let pass = drop >= 0.9 && s1_secs < 600.0 && l2 < 0.05 && d1 < d0;
    verdict(
        pass,
        format!(
            "stage I {} steps: {:.4} -> {:.4} ({:.1}% drop, {s1_secs:.0}s); stage II {} steps: L_stage2 {l2:.4}, L_diff {d0:.3} -> {d1:.3} ({s2_secs:.0}s)",
            losses.len(),
            losses[0],
            mean(&losses[losses.len() - 4..]),
            100.0 * drop,
            diff.len(),
        ),
    )
}

fn c8_ablations() -> Res<Verdict> {
    let base = config(&[
        "data.patch_size=32",
        "model.stage1.msfem.channels=4",
        "model.stage1.msfem.repeats=1",
        "model.stage1.tb.embed_dim=4",
        "model.stage1.tb.heads=2",
        "model.stage1.tb.repeats=1",
        "model.denoiser.unet.depth=3",
        "model.denoiser.unet.base_width=4",
        "model.denoiser.unet.max_width=8",
        "model.denoiser.unet.time_embed_dim=4",
        "model.denoiser.hfah.hidden=4",
        "diffusion.steps=20",
        "optimizer.batch=1",
        "stage1.max_steps=2",
        "stage2.max_steps=2",
    ]);
    let spec = SyntheticSpec::default();
    let train = synthetic_pairs(2, &spec, 1)?;
    let test = vec![synthetic_pair("t0", &spec, 2)?, synthetic_pair("t1", &spec, 2)?];
    let mut labels = Vec::new();
    let mut broken = Vec::new();
    let mut shared: Option<Checkpoint> = None;
    for cfg in ablation_grid(&base) {
        let run = run_variant(&cfg, &train, &test, shared.as_ref(), None)?;
        if shared.is_none() {
            shared = run.stage1.as_ref().map(|o| o.last.clone());
        }
        let finite = Metric::ALL.iter().all(|&m| run.report.mean.get(m).is_finite());
        if !(run.report.is_complete() && run.report.count() == test.len() && finite) {
            broken.push(run.label.clone());
        }
        labels.push(run.label);
    }
    let pass = broken.is_empty() && labels.len() == 14;
    let detail = if broken.is_empty() {
        format!("{} variants reported [{}]", labels.len(), labels.join(" "))
    } else {
        format!("incomplete reports: {}", broken.join(" "))
    };
    verdict(pass, detail)
}

fn c9_structure() -> Res<Verdict> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(19);

    let mut store = ParamStore::new(DType::F64, 1);
    let m = Msfem::new(&mut store, "m", 16)?;
    let w = store.var("m.fuse.weight").unwrap().as_tensor().zeros_like()?;
    store.set("m.fuse.weight", &w)?;
    store.set("m.fuse.bias", &Tensor::full(-20.0, 16, &dev)?)?;
    let x = rand_tensor((1, 16, 64, 64), &mut rng)?;
    let msfem = max_abs(&(m.forward(&x)? - &x)?)?;

    let mut store = ParamStore::new(DType::F64, 2);
    let cfg = TbConfig { embed_dim: 8, heads: 2, window: 4, ..TbConfig::default() };
    let tb = TransformerBlock::new(&mut store, "tb", &cfg)?;
    for n in ["tb.attn.proj.weight", "tb.attn.proj.bias", "tb.fc2.weight", "tb.fc2.bias"] {
        let z = store.var(n).unwrap().as_tensor().zeros_like()?;
        store.set(n, &z)?;
    }
    let x = rand_tensor((2, 8, 8, 8), &mut rng)?;
    let tb_err = max_abs(&(tb.forward(&x)? - &x)?)?;

    let mut store = ParamStore::new(DType::F64, 3);
    let hfah = Hfah::new(&mut store, "h", &[4, 8], 4)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let scale = rng.random_range(0.1..50.0);
        let f: Vec<Tensor> = [4, 8]
            .iter()
            .map(|&c| Ok(((rand_tensor((1, c, 4, 4), &mut rng)? - 0.5)? * scale)?))
            .collect::<Res<_>>()?;
        let v = hfah.forward(&f)?.flatten_all()?.to_vec1::<f64>()?;
        lo = v.iter().copied().fold(lo, f64::min);
        hi = v.iter().copied().fold(hi, f64::max);
    }

    let pair = synthetic_pair("layout", &SyntheticSpec::default(), 7)?;
    let (masks, _) = masks_for_pairs(&RunConfig::default(), None, std::slice::from_ref(&pair))?;
    let f1 = FusedImage::new(
        Image::from_fn(64, 64, 3, ValueRange::Unit, |_| rng.random::<f64>())?,
        FusionStage::Preliminary,
    )?;
    let t = to_conditioned_sample(&f1, &masks[0])?.to_tensor(DType::F32, &dev)?;
    let back = t.squeeze(0)?.permute((1, 2, 0))?.to_dtype(DType::F64)?.contiguous()?;
    let data = Array3::from_shape_vec((64, 64, 5), back.flatten_all()?.to_vec1::<f64>()?)?;
    let (f1b, mb) = ConditionedSample::new(data)?.split()?;
    let diff = |a: &Image, b: &Image| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let layout = diff(f1.image(), f1b.image())
        .max(diff(masks[0].m_ir(), mb.m_ir()))
        .max(diff(masks[0].m_vis(), mb.m_vis()));

    let pass = msfem <= 1e-6 && tb_err == 0.0 && lo >= 0.0 && hi <= 1.0 && layout <= 1e-7;
    verdict(
        pass,
        format!("MSFEM {msfem:.1e}, TB {tb_err:e}, HFAH range [{lo:.4}, {hi:.4}], layout {layout:.1e}"),
    )
}

fn fuse_all(pipe: &Pipeline, pairs: &[ImagePair], cfg: &RunConfig) -> Res<Vec<Image>> {
    let (masks, _) = masks_for_pairs(cfg, None, pairs)?;
    Ok(pairs
        .iter()
        .zip(&masks)
        .map(|(p, m)| pipe.fuse(p, m).map(FusedImage::into_image))
        .collect::<Result<_, _>>()?)
}

fn c10_reproducibility() -> Res<Verdict> {
    let cfg = config(&[
        "seed=5",
        "data.patch_size=32",
        "model.stage1.msfem.channels=4",
        "model.stage1.tb.embed_dim=4",
        "model.stage1.tb.heads=2",
        "model.denoiser.unet.depth=3",
        "model.denoiser.unet.base_width=4",
        "model.denoiser.unet.max_width=8",
        "model.denoiser.unet.time_embed_dim=4",
        "model.denoiser.hfah.hidden=4",
        "diffusion.steps=20",
        "optimizer.batch=1",
        "stage1.max_steps=3",
        "stage2.max_steps=3",
    ]);
    let pairs = synthetic_pairs(2, &SyntheticSpec { height: 40, width: 48, ..Default::default() }, 6)?;
    let train = || -> Res<(Checkpoint, Checkpoint)> {
        let s1 = train_stage1(&cfg, &pairs, None, None)?;
        let (masks, _) = masks_for_pairs(&cfg, None, &pairs)?;
        let data = Stage2Data::prepare(&cfg, pairs.clone(), masks, Some(&s1.last))?;
        Ok((s1.last, train_stage2(&cfg, &data, None, None)?.last))
    };
    let (a1, a2) = train()?;
    let (b1, b2) = train()?;
    let same_ckpt = a1.to_bytes()? == b1.to_bytes()? && a2.to_bytes()? == b2.to_bytes()?;
    let fa = fuse_all(&Pipeline::new(&cfg, Some(&a1), Some(&a2))?, &pairs, &cfg)?;
    let fb = fuse_all(&Pipeline::new(&cfg, Some(&b1), Some(&b2))?, &pairs, &cfg)?;
    let same_fuse = fa.iter().zip(&fb).all(|(x, y)| x.to_bytes() == y.to_bytes());

    let dir = tempfile::tempdir()?;
    let (p1, p2) = (dir.path().join("s1.ckpt"), dir.path().join("s2.ckpt"));
    a1.save(&p1)?;
    a2.save(&p2)?;
    let (l1, l2) = (Checkpoint::load(&p1)?, Checkpoint::load(&p2)?);
    let round_trip = l1.to_bytes()? == a1.to_bytes()? && l2.to_bytes()? == a2.to_bytes()?;
    let fl = fuse_all(&Pipeline::new(&cfg, Some(&l1), Some(&l2))?, &pairs, &cfg)?;
    let same_loaded = fa.iter().zip(&fl).all(|(x, y)| x.to_bytes() == y.to_bytes());
    verdict(
        same_ckpt && same_fuse && round_trip && same_loaded,
        format!(
            "retrained checkpoints identical: {same_ckpt}, fuse outputs identical: {same_fuse}, \
             checkpoint round trip: {round_trip}, fuse after reload identical: {same_loaded}"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Res<Verdict>); 10] = [
        ("diffusion marginal", c1_marginal),
        ("markov composition", c2_composition),
        ("oracle reverse chain", c3_oracle_chain),
        ("loss zero cases", c4_losses),
        ("gradient check", c5_gradients),
        ("metric oracles", c6_metrics),
        ("overfit smoke", c7_overfit),
        ("ablation grid", c8_ablations),
        ("structural identities", c9_structure),
        ("reproducibility", c10_reproducibility),
    ];
    let total = Instant::now();
    // ACCEPTANCE_ONLY=3,5 restricts the run to the listed criteria.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {:>2} {:<22} {}  {detail} [{:.1}s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    println!("acceptance finished in {:.0}s", total.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
