//! Dataset discovery and patch sampling.
//!
//! A dataset root holds `ir/`, `vis/` and optionally `masks_ir/`, `masks_vis/`.
//! Files are paired by identical file stem; only `.png` files are considered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImagePair, MaskPair, MIN_SIDE};
use crate::error::{Error, Result};

pub const IR_DIR: &str = "ir";
pub const VIS_DIR: &str = "vis";
pub const MASK_IR_DIR: &str = "masks_ir";
pub const MASK_VIS_DIR: &str = "masks_vis";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub m_ir: Option<PathBuf>,
    pub m_vis: Option<PathBuf>,
}

impl IndexEntry {
    pub fn has_masks(&self) -> bool {
        self.m_ir.is_some() && self.m_vis.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by id.
    pub entries: Vec<IndexEntry>,
    /// Ids of complete pairs dropped because a mask was missing.
    pub excluded: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn png_dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

/// Index every complete IR/VIS pair under `root`.
pub fn scan_dataset(root: impl AsRef<Path>, require_masks: bool) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let ir = png_stems(&root.join(IR_DIR))?;
    let vis = png_stems(&root.join(VIS_DIR))?;
    let m_ir = png_stems(&root.join(MASK_IR_DIR))?;
    let m_vis = png_stems(&root.join(MASK_VIS_DIR))?;

    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for (id, ir_path) in &ir {
        let Some(vis_path) = vis.get(id) else { continue };
        let entry = IndexEntry {
            id: id.clone(),
            ir: ir_path.clone(),
            vis: vis_path.clone(),
            m_ir: m_ir.get(id).cloned(),
            m_vis: m_vis.get(id).cloned(),
        };
        if require_masks && !entry.has_masks() {
            excluded.push(id.clone());
            continue;
        }
        let (a, b) = (png_dims(&entry.ir)?, png_dims(&entry.vis)?);
        if a != b {
            return Err(Error::Dimension(format!(
                "pair {id}: infrared is {}x{}, visible is {}x{}",
                a.0, a.1, b.0, b.1
            )));
        }
        entries.push(entry);
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} pairs under {} excluded for missing masks",
            excluded.len(),
            root.display()
        );
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let split = match root.file_name().and_then(|n| n.to_str()) {
        Some(n) if n.eq_ignore_ascii_case("test") => Split::Test,
        _ => Split::Train,
    };
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        entries,
        excluded,
    })
}

pub fn load_pair(entry: &IndexEntry) -> Result<ImagePair> {
    ImagePair::new(
        entry.id.clone(),
        Image::load_png(&entry.ir, 1)?,
        Image::load_png(&entry.vis, 3)?,
    )
}

/// Uniform top-left corner of a `size`×`size` window.
pub fn patch_origin(height: usize, width: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size < MIN_SIDE || size > height.min(width) {
        return Err(Error::Dimension(format!(
            "patch size {size} does not fit a {height}x{width} image (minimum {MIN_SIDE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((
        rng.random_range(0..=height - size),
        rng.random_range(0..=width - size),
    ))
}

/// Check that a patch side survives `levels - 1` halvings.
pub fn validate_patch_size(size: usize, levels: usize) -> Result<()> {
    let m = 1usize << levels.saturating_sub(1);
    if size % m != 0 {
        return Err(Error::Dimension(format!(
            "patch size {size} is not divisible by {m}"
        )));
    }
    Ok(())
}

/// Crop the same window out of a pair and its masks.
pub fn random_patch(
    pair: &ImagePair,
    masks: &MaskPair,
    size: usize,
    seed: u64,
) -> Result<(ImagePair, MaskPair)> {
    masks.ensure_matches(pair)?;
    let (h, w) = pair.dims();
    let (y, x) = patch_origin(h, w, size, seed)?;
    let cropped = ImagePair::new(
        pair.id.clone(),
        pair.ir.crop(y, x, size, size)?,
        pair.vis.crop(y, x, size, size)?,
    )?;
    Ok((cropped, masks.crop(y, x, size, size)?))
}

/// Ids present in both `a` and `b`, sorted.
pub fn common_ids<'a>(a: &'a DatasetIndex, b: &'a DatasetIndex) -> BTreeSet<&'a str> {
    let left: BTreeSet<&str> = a.ids().collect();
    b.ids().filter(|id| left.contains(id)).collect()
}
