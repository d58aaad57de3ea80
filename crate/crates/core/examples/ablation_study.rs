// Run every ablation variant at toy scale and tabulate the metric means.

use sgdfuse::config::RunConfig;
use sgdfuse::metrics::Metric;
use sgdfuse::synthetic::{synthetic_pairs, SyntheticSpec};
use sgdfuse::trainer::{ablation_grid, run_variant, train_stage1};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = [
        "data.patch_size=32",
        "model.stage1.msfem.channels=4",
        "model.stage1.tb.embed_dim=4",
        "model.stage1.tb.heads=2",
        "model.denoiser.unet.depth=3",
        "model.denoiser.unet.base_width=4",
        "model.denoiser.unet.max_width=8",
        "model.denoiser.unet.time_embed_dim=4",
        "model.denoiser.hfah.hidden=4",
        "optimizer.lr=0.002",
        "optimizer.batch=1",
        "stage1.max_steps=2",
        "stage2.max_steps=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let base = RunConfig::from_toml_with("", &overrides)?;
    let spec = SyntheticSpec { height: 64, width: 64, ..Default::default() };
    let train = synthetic_pairs(2, &spec, 0)?;
    let test = synthetic_pairs(1, &spec, 1)?;
    let shared = train_stage1(&base, &train, None, None)?.last;

    print!("{:<14}", "variant");
    for m in Metric::ALL {
        print!("{:>8}", m.name());
    }
    println!();
    for cfg in ablation_grid(&base) {
        let run = run_variant(&cfg, &train, &test, Some(&shared), None)?;
        print!("{:<14}", run.label);
        for m in Metric::ALL {
            print!("{:>8.3}", run.report.mean.get(m));
        }
        println!();
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
