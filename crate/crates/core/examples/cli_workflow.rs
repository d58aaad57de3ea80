// The command-line workflow against a temporary working directory.

use sgdfuse::cli::dispatch;
use sgdfuse::metrics::MetricReport;
use sgdfuse::synthetic::{synthetic_pairs, write_pairs, SyntheticSpec};

const CONFIG: &str = r#"
seed = 5
[data]
patch_size = 32
[optimizer]
lr = 0.002
batch = 2
[stage1]
max_steps = 2
[stage2]
max_steps = 2
[model.stage1.msfem]
channels = 4
[model.stage1.tb]
embed_dim = 4
heads = 2
[model.denoiser.unet]
depth = 3
base_width = 4
max_width = 8
time_embed_dim = 4
[model.denoiser.hfah]
hidden = 4
"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let work = dir.path().to_str().expect("utf-8 temp path").to_string();
    std::fs::write(dir.path().join("run.toml"), CONFIG)?;
    let pairs = synthetic_pairs(2, &SyntheticSpec { height: 64, width: 64, ..Default::default() }, 3)?;
    write_pairs(&dir.path().join("data/train"), &pairs)?;

    for cmd in [
        vec!["info"],
        vec!["masks", "--source", "synthetic", "--q-ir", "0.9"],
        vec!["train-stage1"],
        vec!["train-stage2"],
        vec!["fuse"],
        vec!["eval", "--jobs", "2"],
    ] {
        let mut argv = vec!["sgdfuse", "--workdir", &work, "--config", "run.toml"];
        argv.extend(cmd.iter().copied());
        let code = dispatch(argv);
        println!("{:<12} exit {code}", cmd[0]);
        assert_eq!(code, 0);
    }
    let report = MetricReport::read_csv(dir.path().join("report.csv"))?;
    println!("evaluated {} pairs, mean EN {:.3}", report.count(), report.mean.get(sgdfuse::metrics::Metric::En));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
