// Forward noising and the oracle reverse chain on a conditioned sample.

use std::collections::BTreeSet;

use candle_core::DType;
use sgdfuse::datamodel::{to_conditioned_sample, FusedImage, FusionStage};
use sgdfuse::diffusion::{
    gaussian, make_schedule, noise_rng, q_sample, sample_chain, ChainOptions, OraclePredictor, ScheduleKind,
};
use sgdfuse::maskprovider::synth_masks;
use sgdfuse::synthetic::{synthetic_pair, SyntheticSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sched = make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear)?;
    for t in [1, 10, 50, 100] {
        println!("t={t:>3}  alpha_bar={:.6}", sched.alpha_bar(t)?);
    }

    let pair = synthetic_pair("demo", &SyntheticSpec { height: 16, width: 16, ..Default::default() }, 0)?;
    let (masks, _) = synth_masks(&pair, 0.8, 0.8)?;
    let f1 = FusedImage::new(pair.vis.clone(), FusionStage::Preliminary)?;
    let i0 = to_conditioned_sample(&f1, &masks)?.to_tensor(DType::F64, &candle_core::Device::Cpu)?;

    let eps = gaussian(i0.shape(), &mut noise_rng(1, "demo"), DType::F64, i0.device())?;
    let noisy = q_sample(&i0, 50, &eps, &sched)?;
    let drift = (&noisy - &i0)?.abs()?.mean_all()?.to_scalar::<f64>()?;
    println!("mean |I_50 - I_0| = {drift:.4}");

    // The true-noise oracle undoes the chain exactly.
    let oracle = OraclePredictor { clean: &i0, sched: &sched };
    let out = sample_chain(&i0, 50, &oracle, &sched, 7, &ChainOptions { posterior_noise: false, record: BTreeSet::new() })?;
    let err = (&out.sample - &i0)?.abs()?.max_all()?.to_scalar::<f64>()?;
    println!("oracle reconstruction max error = {err:.2e}");
    assert!(err <= 1e-3);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
