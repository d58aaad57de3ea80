// Both training stages on synthetic pairs, then fusion of an odd-sized
// frame in both Stage-II inference modes.

use sgdfuse::config::{InferenceMode, RunConfig};
use sgdfuse::losses::stage2_loss_for;
use sgdfuse::synthetic::{synthetic_pair, synthetic_pairs, SyntheticSpec};
use sgdfuse::trainer::{masks_for_pairs, train_stage1, train_stage2, Pipeline, Stage2Data};

pub fn desk_config() -> Result<RunConfig, sgdfuse::Error> {
    let overrides: Vec<String> = [
        "data.patch_size=32",
        "model.stage1.msfem.channels=8",
        "model.stage1.tb.embed_dim=8",
        "model.denoiser.unet.base_width=8",
        "model.denoiser.unet.max_width=32",
        "model.denoiser.unet.time_embed_dim=8",
        "model.denoiser.hfah.hidden=8",
        "optimizer.lr=0.002",
        "optimizer.batch=1",
        "stage1.max_steps=8",
        "stage2.max_steps=6",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::from_toml_with("", &overrides)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = desk_config()?;
    let train = synthetic_pairs(2, &SyntheticSpec { height: 32, width: 32, ..Default::default() }, 0)?;
    let s1 = train_stage1(&cfg, &train, None, None)?;
    let (masks, _) = masks_for_pairs(&cfg, None, &train)?;
    let data = Stage2Data::prepare(&cfg, train, masks, Some(&s1.last))?;
    let s2 = train_stage2(&cfg, &data, None, None)?;
    for r in &s2.records {
        println!("stage2 step {}  total {:.4}  diff {:.4}  int {:.4}  grad {:.4}", r.step, r.total, r.diff, r.int, r.grad);
    }

    let frame = synthetic_pair("frame", &SyntheticSpec { height: 36, width: 50, ..Default::default() }, 9)?;
    let (m, _) = masks_for_pairs(&cfg, None, std::slice::from_ref(&frame))?;
    for mode in [InferenceMode::Timesteps, InferenceMode::Chain] {
        let mut c = cfg.clone();
        c.diffusion.inference = mode;
        c.diffusion.chain_start = Some(10);
        let pipe = Pipeline::new(&c, Some(&s1.last), Some(&s2.last))?;
        let fused = pipe.fuse(&frame, &m[0])?;
        let loss = stage2_loss_for(&fused, &frame, &m[0], &c.loss.weights())?;
        println!("{mode:?}: fused {:?}, L_stage2 {:.4}", fused.dims(), loss.total);
        assert_eq!(fused.dims(), frame.dims());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
