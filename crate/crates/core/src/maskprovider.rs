//! Sources of semantic mask pairs.
//!
//! Masks come from PNG files next to the dataset, from a quantile-based
//! stand-in generator, from random rectangles (ablation), or from an HTTP
//! segmentation service. Every source either returns a valid [`MaskPair`] of
//! the pair's size or fails; nothing is resized.

use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImagePair, MaskPair, MaskProvenance, ValueRange};
use crate::error::{Error, RemoteMaskError, Result};
use crate::ingest::{IndexEntry, MASK_IR_DIR, MASK_VIS_DIR};
use crate::metrics::sobel;

pub const ENDPOINT_ENV: &str = "SGDFUSE_MASK_ENDPOINT";

/// Mask source as written in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSource {
    File,
    Synthetic {
        q_ir: f64,
        q_vis: f64,
    },
    RandomPatch {
        fraction: f64,
        seed: u64,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        /// Use the synthetic generator when the service fails.
        #[serde(default)]
        fallback: Option<(f64, f64)>,
    },
}

fn default_timeout() -> f64 {
    10.0
}

fn default_in_flight() -> usize {
    4
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::Synthetic {
            q_ir: 0.8,
            q_vis: 0.8,
        }
    }
}

fn check_quantile(q: f64, name: &str) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("{name} must lie in (0, 1), got {q}")));
    }
    Ok(())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "patch fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

impl MaskSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskSource::File => Ok(()),
            MaskSource::Synthetic { q_ir, q_vis } => {
                check_quantile(*q_ir, "q_ir")?;
                check_quantile(*q_vis, "q_vis")
            }
            MaskSource::RandomPatch { fraction, .. } => check_fraction(*fraction),
            MaskSource::Remote {
                endpoint,
                timeout_s,
                max_in_flight,
                fallback,
            } => {
                if endpoint.is_empty() && std::env::var(ENDPOINT_ENV).is_err() {
                    return Err(Error::Config("remote mask source needs an endpoint".into()));
                }
                if !(*timeout_s > 0.0 && timeout_s.is_finite()) {
                    return Err(Error::Config(format!("timeout_s must be positive, got {timeout_s}")));
                }
                if *max_in_flight == 0 {
                    return Err(Error::Config("max_in_flight must be at least 1".into()));
                }
                if let Some((a, b)) = fallback {
                    check_quantile(*a, "fallback q_ir")?;
                    check_quantile(*b, "fallback q_vis")?;
                }
                Ok(())
            }
        }
    }

    pub fn requires_files(&self) -> bool {
        matches!(self, MaskSource::File)
    }

    /// Build a reusable provider; the remote client is created once here.
    pub fn provider(&self) -> Result<MaskProvider> {
        self.validate()?;
        let remote = match self {
            MaskSource::Remote {
                endpoint,
                timeout_s,
                max_in_flight,
                ..
            } => Some(RemoteMaskClient::new(
                resolve_endpoint(endpoint),
                Duration::from_secs_f64(*timeout_s),
                *max_in_flight,
            )),
            _ => None,
        };
        Ok(MaskProvider {
            source: self.clone(),
            remote,
        })
    }
}

/// A configured mask source ready to serve pairs.
#[derive(Debug)]
pub struct MaskProvider {
    source: MaskSource,
    remote: Option<RemoteMaskClient>,
}

impl MaskProvider {
    pub fn source(&self) -> &MaskSource {
        &self.source
    }

    /// Masks for one pair plus any warnings. `salt` varies random patches
    /// per pair.
    pub fn masks_for(
        &self,
        entry: Option<&IndexEntry>,
        pair: &ImagePair,
        salt: u64,
    ) -> Result<(MaskPair, Vec<String>)> {
        match &self.source {
            MaskSource::File => {
                let entry = entry.ok_or_else(|| {
                    Error::Config(format!("file masks requested for {} without an index entry", pair.id))
                })?;
                Ok((masks_from_files(entry, pair)?, Vec::new()))
            }
            MaskSource::Synthetic { q_ir, q_vis } => synth_masks(pair, *q_ir, *q_vis),
            MaskSource::RandomPatch { fraction, seed } => Ok((
                random_patch_masks(pair, *fraction, crate::nn::mix_seed(*seed, &format!("{}/{salt}", pair.id)))?,
                Vec::new(),
            )),
            MaskSource::Remote { fallback, .. } => {
                let client = self.remote.as_ref().expect("remote client is built with the provider");
                match client.fetch(pair) {
                    Ok(m) => Ok((m, Vec::new())),
                    Err(e) => match fallback {
                        Some((a, b)) => {
                            let (m, mut w) = synth_masks(pair, *a, *b)?;
                            w.push(format!("{}: remote masks failed ({e}), used synthetic masks", pair.id));
                            Ok((m, w))
                        }
                        None => Err(e),
                    },
                }
            }
        }
    }
}

fn sibling_mask_path(entry: &IndexEntry, dir: &str) -> PathBuf {
    let root = entry.ir.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    root.join(dir).join(format!("{}.png", entry.id))
}

/// Load the mask PNGs listed in an index entry.
pub fn masks_from_files(entry: &IndexEntry, pair: &ImagePair) -> Result<MaskPair> {
    let load = |p: &Option<PathBuf>, dir: &str| -> Result<Image> {
        let path = p.clone().unwrap_or_else(|| sibling_mask_path(entry, dir));
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "mask file missing"),
            ));
        }
        Image::load_png(&path, 1)
    };
    let masks = MaskPair::new(
        load(&entry.m_ir, MASK_IR_DIR)?,
        load(&entry.m_vis, MASK_VIS_DIR)?,
        MaskProvenance::File,
    )?;
    masks.ensure_matches(pair)?;
    Ok(masks)
}

fn plane_to_image(p: Array2<f64>) -> Result<Image> {
    Image::new(p.insert_axis(Axis(2)), ValueRange::Unit)
}

/// Binary mask of values at or above the nearest-rank `q`-quantile. `None`
/// when the plane is constant.
fn quantile_mask(p: &Array2<f64>, q: f64) -> Option<Array2<f64>> {
    let mut sorted: Vec<f64> = p.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.first() == sorted.last() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    Some(p.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Stand-in masks: bright infrared pixels and strong visible edges.
pub fn synth_masks(pair: &ImagePair, q_ir: f64, q_vis: f64) -> Result<(MaskPair, Vec<String>)> {
    check_quantile(q_ir, "q_ir")?;
    check_quantile(q_vis, "q_vis")?;
    let (h, w) = pair.dims();
    let mut warnings = Vec::new();
    let ir = pair.ir.luma();
    let m_ir = quantile_mask(&ir, q_ir).unwrap_or_else(|| {
        warnings.push(format!("{}: constant infrared image, empty infrared mask", pair.id));
        Array2::zeros((h, w))
    });
    let (grad, _) = sobel(&pair.vis.luma());
    let m_vis = quantile_mask(&grad, q_vis).unwrap_or_else(|| {
        warnings.push(format!("{}: visible image has no edges, empty visible mask", pair.id));
        Array2::zeros((h, w))
    });
    for w in &warnings {
        log::warn!("{w}");
    }
    let masks = MaskPair::new(plane_to_image(m_ir)?, plane_to_image(m_vis)?, MaskProvenance::Synthetic)?;
    Ok((masks, warnings))
}

fn random_rectangle(h: usize, w: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let area = fraction * (h * w) as f64;
    let rh_min = ((area / w as f64).ceil() as usize).clamp(1, h);
    let rh_max = (area.floor() as usize).clamp(rh_min, h);
    let rh = rng.random_range(rh_min..=rh_max);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    Array2::from_shape_fn((h, w), |(y, x)| {
        if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

/// One random axis-aligned rectangle of about `fraction` of the image per
/// mask.
pub fn random_patch_masks(pair: &ImagePair, fraction: f64, seed: u64) -> Result<MaskPair> {
    check_fraction(fraction)?;
    let (h, w) = pair.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_ir = random_rectangle(h, w, fraction, &mut rng);
    let m_vis = random_rectangle(h, w, fraction, &mut rng);
    MaskPair::new(plane_to_image(m_ir)?, plane_to_image(m_vis)?, MaskProvenance::RandomPatch)
}

/// The environment variable wins over the configured endpoint.
pub fn resolve_endpoint(configured: &str) -> String {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| configured.to_string())
}

#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight counter poisoned");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight counter poisoned");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight counter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for `POST {endpoint}/segment` (PNG in, grayscale PNG out).
///
/// Timeouts, transport failures and 5xx responses are retried once.
#[derive(Debug)]
pub struct RemoteMaskClient {
    endpoint: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

pub const MAX_ATTEMPTS: u32 = 2;

enum Attempt {
    Retry(RemoteMaskError),
    Fail(RemoteMaskError),
}

impl RemoteMaskClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteMaskClient {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            in_flight: InFlight {
                limit: max_in_flight.max(1),
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &[u8], attempts: u32) -> std::result::Result<Vec<u8>, Attempt> {
        let _permit = self.in_flight.acquire();
        let url = format!("{}/segment", self.endpoint);
        let resp = self
            .agent
            .post(&url)
            .header("Content-Type", "image/png")
            .send(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(RemoteMaskError::Timeout { attempts })),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Err(Attempt::Retry(RemoteMaskError::Timeout { attempts }))
            }
            Err(e) => {
                return Err(Attempt::Retry(RemoteMaskError::Transport {
                    attempts,
                    detail: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        if status != 200 {
            let err = RemoteMaskError::Status { status, attempts };
            return Err(if status >= 500 { Attempt::Retry(err) } else { Attempt::Fail(err) });
        }
        resp.body_mut()
            .with_config()
            .limit(256 << 20)
            .read_to_vec()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => Attempt::Retry(RemoteMaskError::Timeout { attempts }),
                e => Attempt::Retry(RemoteMaskError::Transport {
                    attempts,
                    detail: e.to_string(),
                }),
            })
    }

    fn segment(&self, img: &Image) -> Result<Image> {
        let body = img.encode_png()?;
        let mut attempts = 0;
        let bytes = loop {
            attempts += 1;
            match self.attempt(&body, attempts) {
                Ok(bytes) => break bytes,
                Err(Attempt::Retry(e)) if attempts < MAX_ATTEMPTS => {
                    log::warn!("mask request to {} failed ({e}), retrying", self.endpoint);
                }
                Err(Attempt::Retry(e)) | Err(Attempt::Fail(e)) => return Err(e.into()),
            }
        };
        let mask = Image::decode_png(&bytes, 1).map_err(|e| RemoteMaskError::Decode(e.to_string()))?;
        if mask.dims() != img.dims() {
            return Err(RemoteMaskError::Dimension(format!(
                "service returned {:?} for a {:?} image",
                mask.dims(),
                img.dims()
            ))
            .into());
        }
        Ok(mask)
    }

    pub fn fetch(&self, pair: &ImagePair) -> Result<MaskPair> {
        let m_ir = self.segment(&pair.ir)?;
        let m_vis = self.segment(&pair.vis)?;
        MaskPair::new(m_ir, m_vis, MaskProvenance::Remote)
    }
}

/// One-off remote fetch with a single request in flight.
pub fn fetch_masks_remote(pair: &ImagePair, endpoint: &str, timeout_s: f64) -> Result<MaskPair> {
    RemoteMaskClient::new(resolve_endpoint(endpoint), Duration::from_secs_f64(timeout_s), 1).fetch(pair)
}

/// Write a mask pair in the dataset layout under `root`.
pub fn save_masks(root: &Path, id: &str, masks: &MaskPair) -> Result<()> {
    for (dir, img) in [(MASK_IR_DIR, masks.m_ir()), (MASK_VIS_DIR, masks.m_vis())] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        img.save_png(d.join(format!("{id}.png")))?;
    }
    Ok(())
}

/// Single-channel image from a plane, for callers assembling masks by hand.
pub fn mask_image(p: Array2<f64>) -> Result<Image> {
    plane_to_image(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::scan_dataset;
    use crate::ingest::{IR_DIR, VIS_DIR};
    use tempfile::TempDir;

    fn ramp_pair(h: usize, w: usize) -> ImagePair {
        let ir = Image::from_fn(h, w, 1, ValueRange::Unit, |(y, x, _)| (y * w + x) as f64 / (h * w) as f64).unwrap();
        let vis = Image::from_fn(h, w, 3, ValueRange::Unit, |(y, x, c)| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0).unwrap();
        ImagePair::new("r", ir, vis).unwrap()
    }

    fn count(m: &Image) -> usize {
        m.data().iter().filter(|&&v| v > 0.5).count()
    }

    #[test]
    fn quantile_mask_on_ramp() {
        let pair = ramp_pair(8, 8);
        let (m, w) = synth_masks(&pair, 0.9, 0.5).unwrap();
        assert!(w.is_empty());
        assert_eq!(m.provenance(), MaskProvenance::Synthetic);
        // Sort-based oracle: exactly the brightest pixels are set.
        let n = 64usize;
        let top = count(m.m_ir());
        assert!((top as f64 - 0.1 * n as f64).abs() <= 1.0, "{top}");
        let mut vals: Vec<(f64, f64)> = pair
            .ir
            .data()
            .iter()
            .zip(m.m_ir().data().iter())
            .map(|(&v, &k)| (v, k))
            .collect();
        vals.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert!(vals[..top].iter().all(|&(_, k)| k == 1.0));
        assert!(vals[top..].iter().all(|&(_, k)| k == 0.0));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let pair = ramp_pair(16, 16);
        assert_eq!(synth_masks(&pair, 0.5, 0.5).unwrap().0, synth_masks(&pair, 0.5, 0.5).unwrap().0);
    }

    #[test]
    fn constant_images_warn() {
        let pair = ImagePair::new(
            "c",
            Image::filled(8, 8, 1, 0.3).unwrap(),
            Image::filled(8, 8, 3, 0.6).unwrap(),
        )
        .unwrap();
        let (m, w) = synth_masks(&pair, 0.5, 0.5).unwrap();
        assert_eq!(count(m.m_ir()), 0);
        assert_eq!(count(m.m_vis()), 0);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn bad_quantiles() {
        let pair = ramp_pair(8, 8);
        assert!(matches!(synth_masks(&pair, 0.0, 0.5), Err(Error::Config(_))));
        assert!(matches!(synth_masks(&pair, 0.5, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn random_patch_area_and_variety() {
        let pair = ramp_pair(64, 64);
        let full = random_patch_masks(&pair, 1.0, 3).unwrap();
        assert_eq!(count(full.m_ir()), 4096);
        assert_eq!(count(full.m_vis()), 4096);
        let mut collisions = 0;
        for seed in 0..100u64 {
            let m = random_patch_masks(&pair, 0.25, seed).unwrap();
            assert_eq!(m.provenance(), MaskProvenance::RandomPatch);
            for img in [m.m_ir(), m.m_vis()] {
                let c = count(img) as f64;
                assert!((0.2 * 4096.0..=0.3 * 4096.0).contains(&c), "{c}");
            }
            let other = random_patch_masks(&pair, 0.25, seed + 1000).unwrap();
            if other.m_ir() == m.m_ir() {
                collisions += 1;
            }
            assert_eq!(m, random_patch_masks(&pair, 0.25, seed).unwrap());
        }
        assert!(collisions <= 1);
        assert!(random_patch_masks(&pair, 0.0, 1).is_err());
    }

    fn dataset(h: usize, w: usize, mh: usize, mw: usize, mask_value: f64) -> TempDir {
        let tmp = TempDir::new().unwrap();
        let pair = ramp_pair(h, w);
        for (dir, img) in [(IR_DIR, &pair.ir), (VIS_DIR, &pair.vis)] {
            std::fs::create_dir_all(tmp.path().join(dir)).unwrap();
            img.save_png(tmp.path().join(dir).join("a.png")).unwrap();
        }
        let m = Image::filled(mh, mw, 1, mask_value).unwrap();
        save_masks(tmp.path(), "a", &MaskPair::new(m.clone(), m, MaskProvenance::File).unwrap()).unwrap();
        tmp
    }

    #[test]
    fn file_masks() {
        let tmp = dataset(16, 24, 16, 24, 1.0);
        let idx = scan_dataset(tmp.path(), true).unwrap();
        let pair = crate::ingest::load_pair(&idx.entries[0]).unwrap();
        let m = masks_from_files(&idx.entries[0], &pair).unwrap();
        assert_eq!(m.provenance(), MaskProvenance::File);
        assert!(m.m_ir().data().iter().all(|&v| v == 1.0));
        assert_eq!(m.dims(), (16, 24));
    }

    #[test]
    fn file_masks_wrong_size() {
        let tmp = dataset(16, 24, 8, 12, 0.5);
        let idx = scan_dataset(tmp.path(), true).unwrap();
        let pair = crate::ingest::load_pair(&idx.entries[0]).unwrap();
        assert!(matches!(masks_from_files(&idx.entries[0], &pair), Err(Error::Dimension(_))));
    }

    #[test]
    fn file_masks_missing() {
        let tmp = dataset(16, 24, 16, 24, 1.0);
        std::fs::remove_file(tmp.path().join(MASK_VIS_DIR).join("a.png")).unwrap();
        let idx = scan_dataset(tmp.path(), false).unwrap();
        let pair = crate::ingest::load_pair(&idx.entries[0]).unwrap();
        assert!(matches!(masks_from_files(&idx.entries[0], &pair), Err(Error::Io { .. })));
    }

    #[test]
    fn source_config_round_trip() {
        for src in [
            MaskSource::File,
            MaskSource::default(),
            MaskSource::RandomPatch { fraction: 0.25, seed: 4 },
            MaskSource::Remote {
                endpoint: "http://localhost:1".into(),
                timeout_s: 1.0,
                max_in_flight: 2,
                fallback: Some((0.8, 0.8)),
            },
        ] {
            src.validate().unwrap();
            let text = toml::to_string(&src).unwrap();
            assert_eq!(toml::from_str::<MaskSource>(&text).unwrap(), src);
        }
        assert!(MaskSource::RandomPatch { fraction: 1.5, seed: 0 }.validate().is_err());
    }
}
