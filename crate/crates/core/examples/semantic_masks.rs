// Mask sources, the mask ablations and the five-channel diffusion layout.

use sgdfuse::datamodel::{to_conditioned_sample, FusedImage, FusionStage};
use sgdfuse::ingest::scan_dataset;
use sgdfuse::maskprovider::{masks_from_files, random_patch_masks, save_masks, synth_masks};
use sgdfuse::synthetic::{synthetic_pair, write_pairs, SyntheticSpec};

fn coverage(m: &sgdfuse::datamodel::Image) -> f64 {
    m.data().mean().unwrap_or(0.0)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let pair = synthetic_pair("0000", &SyntheticSpec::default(), 2)?;

    let (synth, _) = synth_masks(&pair, 0.8, 0.9)?;
    println!("synthetic: ir {:.3}, vis {:.3}", coverage(synth.m_ir()), coverage(synth.m_vis()));
    let random = random_patch_masks(&pair, 0.25, 11)?;
    println!("random patch: ir {:.3}, vis {:.3}", coverage(random.m_ir()), coverage(random.m_vis()));
    let no_ir = synth.ablate(true, false);
    println!("without IR mask: ir {:.3}, vis {:.3}", coverage(no_ir.m_ir()), coverage(no_ir.m_vis()));

    // Masks written in the dataset layout load back unchanged.
    let dir = tempfile::tempdir()?;
    write_pairs(dir.path(), std::slice::from_ref(&pair))?;
    save_masks(dir.path(), &pair.id, &synth)?;
    let index = scan_dataset(dir.path(), true)?;
    let loaded = masks_from_files(&index.entries[0], &pair)?;
    assert_eq!(loaded.m_ir(), synth.m_ir());

    let f1 = FusedImage::new(pair.vis.clone(), FusionStage::Preliminary)?;
    let sample = to_conditioned_sample(&f1, &synth)?;
    let (back, masks) = sample.split()?;
    let err = (back.image().data() - f1.image().data()).fold(0.0f64, |m, v| m.max(v.abs()));
    println!("conditioned sample {:?}, layout round-trip error {err:.1e}", sample.data().dim());
    assert!(err <= 1e-7 && masks.m_vis() == synth.m_vis());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
