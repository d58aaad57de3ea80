// Train the Stage-I network for a few steps, checkpoint, and resume.

use sgdfuse::checkpoint::Checkpoint;
use sgdfuse::config::RunConfig;
use sgdfuse::synthetic::{synthetic_pairs, SyntheticSpec};
use sgdfuse::trainer::{train_stage1, STAGE1_LAST};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = [
        "data.patch_size=32",
        "model.stage1.msfem.channels=8",
        "model.stage1.tb.embed_dim=8",
        "optimizer.lr=0.002",
        "optimizer.batch=1",
        "stage1.max_steps=12",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::from_toml_with("", &overrides)?;
    let pairs = synthetic_pairs(4, &SyntheticSpec { height: 32, width: 32, ..Default::default() }, 0)?;

    let dir = tempfile::tempdir()?;
    let full = train_stage1(&cfg, &pairs, None, Some(dir.path()))?;
    for r in &full.records {
        println!("step {:>2}  loss {:.4}  (int {:.4}, grad {:.4})", r.step, r.total, r.int, r.grad);
    }

    // Stop after 6 steps, reload from disk, and finish the run.
    let mut first_half = cfg.clone();
    first_half.stage1.max_steps = Some(6);
    train_stage1(&first_half, &pairs, None, Some(dir.path()))?;
    let ck = Checkpoint::load(&dir.path().join(STAGE1_LAST))?;
    let rest = train_stage1(&cfg, &pairs, Some(&ck), None)?;
    println!("resumed at step {}; trajectories agree: {}", ck.step, rest.losses() == full.losses()[6..]);
    assert_eq!(rest.losses(), full.losses()[6..]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
