//! Fusion quality metrics.
//!
//! Metrics work on grayscale planes on the 0–255 scale. Colour images are
//! reduced to BT.601 luma and quantized to 8-bit levels first, see
//! [`gray_levels`]. `A` is the infrared source and `B` the visible one.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImagePair, ValueRange};
use crate::error::{Error, Result};
use crate::ingest::{load_pair, DatasetIndex};

pub type Plane = Array2<f64>;

/// BT.601 luma rescaled to 0–255 and rounded to integer levels.
pub fn gray_levels(img: &Image) -> Plane {
    let scale = match img.range() {
        ValueRange::Unit => |v: f64| v,
        ValueRange::Signed => |v: f64| (v + 1.0) / 2.0,
    };
    img.luma().mapv(|v| (scale(v) * 255.0).round().clamp(0.0, 255.0))
}

fn level(v: f64) -> usize {
    v.round().clamp(0.0, 255.0) as usize
}

fn check_same(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn histogram(f: &Plane) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in f {
        h[level(v)] += 1.0;
    }
    h
}

fn entropy_of(counts: impl IntoIterator<Item = f64>, total: f64) -> f64 {
    counts
        .into_iter()
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn en(f: &Plane) -> f64 {
    entropy_of(histogram(f), f.len() as f64)
}

/// Population standard deviation.
pub fn sd(f: &Plane) -> f64 {
    // Summing in sorted order makes the result independent of pixel order.
    let mut v: Vec<f64> = f.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Spatial frequency `√(RF² + CF²)`.
pub fn sf(f: &Plane) -> f64 {
    let (h, w) = f.dim();
    let row = &f.slice(s![.., 1..]) - &f.slice(s![.., ..w - 1]);
    let col = &f.slice(s![1.., ..]) - &f.slice(s![..h - 1, ..]);
    let rf2 = row.mapv(|d| d * d).sum() / row.len().max(1) as f64;
    let cf2 = col.mapv(|d| d * d).sum() / col.len().max(1) as f64;
    (rf2 + cf2).sqrt()
}

fn mutual_information(f: &Plane, a: &Plane) -> f64 {
    let mut joint = vec![0.0; 256 * 256];
    for (&x, &y) in f.iter().zip(a.iter()) {
        joint[level(x) * 256 + level(y)] += 1.0;
    }
    let n = f.len() as f64;
    let (hf, ha) = (histogram(f), histogram(a));
    let mut mi = 0.0;
    for i in 0..256 {
        if hf[i] == 0.0 {
            continue;
        }
        for j in 0..256 {
            let c = joint[i * 256 + j];
            if c > 0.0 {
                mi += c / n * (c * n / (hf[i] * ha[j])).log2();
            }
        }
    }
    mi
}

/// `MI(F, A) + MI(F, B)` from 256×256 joint histograms, in bits.
pub fn mi(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    check_same(&f.view(), &a.view(), "MI")?;
    check_same(&f.view(), &b.view(), "MI")?;
    Ok(mutual_information(f, a) + mutual_information(f, b))
}

fn pearson(x: &Plane, y: &Plane) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.sum() / n, y.sum() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    Zip::from(x).and(y).for_each(|&a, &b| {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    });
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Sum of correlations of differences with warnings for degenerate terms.
pub fn scd_detailed(f: &Plane, a: &Plane, b: &Plane) -> Result<(f64, Vec<String>)> {
    check_same(&f.view(), &a.view(), "SCD")?;
    check_same(&f.view(), &b.view(), "SCD")?;
    if sd(f) == 0.0 {
        return Ok((0.0, vec!["SCD: fused image is constant, counted as 0".into()]));
    }
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for (diff, src, name) in [(f - b, a, "r(F-B, A)"), (f - a, b, "r(F-A, B)")] {
        match pearson(&diff, src) {
            Some(r) => total += r,
            None => warnings.push(format!("SCD: {name} has a zero-variance argument, counted as 0")),
        }
    }
    Ok((total, warnings))
}

pub fn scd(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    let (v, w) = scd_detailed(f, a, b)?;
    w.iter().for_each(|m| log::warn!("{m}"));
    Ok(v)
}

/// Constants of the pixel-domain VIF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VifParams {
    pub scales: u32,
    pub sigma_nsq: f64,
    pub eps: f64,
}

impl Default for VifParams {
    fn default() -> Self {
        VifParams {
            scales: 4,
            sigma_nsq: 2.0,
            eps: 1e-10,
        }
    }
}

fn gaussian_window(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (h, w) = x.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, i)| {
        (0..n).map(|j| k[j] * x[[y, i + j]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, xx)| {
        (0..n).map(|j| k[j] * rows[[i + j, xx]]).sum::<f64>()
    })
}

fn subsample(x: &Plane) -> Plane {
    x.slice(s![..;2, ..;2]).to_owned()
}

fn window_size(scale: u32, scales: u32) -> usize {
    (1usize << (scales - scale + 1)) + 1
}

fn vif_single(reference: &Plane, distorted: &Plane, p: &VifParams) -> Result<(f64, f64)> {
    let mut r = reference.clone();
    let mut d = distorted.clone();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=p.scales {
        let n = window_size(scale, p.scales);
        let win = gaussian_window(n);
        let fits = |r: &Plane| {
            let (h, w) = r.dim();
            if h < n || w < n {
                return Err(Error::Dimension(format!(
                    "VIF scale {scale} needs at least {n}x{n}, image is {h}x{w}"
                )));
            }
            Ok(())
        };
        if scale > 1 {
            fits(&r)?;
            r = subsample(&filter_valid(&r, &win));
            d = subsample(&filter_valid(&d, &win));
        }
        fits(&r)?;
        let mu1 = filter_valid(&r, &win);
        let mu2 = filter_valid(&d, &win);
        let s1 = (filter_valid(&(&r * &r), &win) - &mu1 * &mu1).mapv(|v| v.max(0.0));
        let s2 = (filter_valid(&(&d * &d), &win) - &mu2 * &mu2).mapv(|v| v.max(0.0));
        let s12 = filter_valid(&(&r * &d), &win) - &mu1 * &mu2;
        Zip::from(&s1).and(&s2).and(&s12).for_each(|&s1, &s2, &s12| {
            let mut s1 = s1;
            let mut g = s12 / (s1 + p.eps);
            let mut sv = s2 - g * s12;
            if s1 < p.eps {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < p.eps {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(p.eps);
            num += (1.0 + g * g * s1 / (sv + p.sigma_nsq)).log10();
            den += (1.0 + s1 / p.sigma_nsq).log10();
        });
    }
    Ok((num, den))
}

pub fn vif_detailed(f: &Plane, a: &Plane, b: &Plane, p: &VifParams) -> Result<(f64, Vec<String>)> {
    check_same(&f.view(), &a.view(), "VIF")?;
    check_same(&f.view(), &b.view(), "VIF")?;
    if p.scales == 0 {
        return Err(Error::Config("VIF needs at least one scale".into()));
    }
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for (src, name) in [(a, "A"), (b, "B")] {
        let (num, den) = vif_single(src, f, p)?;
        if den > 0.0 {
            total += num / den;
        } else {
            warnings.push(format!("VIF: source {name} carries no signal, term counted as 0"));
        }
    }
    Ok((total, warnings))
}

/// Pixel-domain multi-scale VIF of `f` against each source, summed.
pub fn vif(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    let (v, w) = vif_detailed(f, a, b, &VifParams::default())?;
    w.iter().for_each(|m| log::warn!("{m}"));
    Ok(v)
}

/// Sigmoid constants of the edge-preservation model. The amplitudes are
/// chosen so that perfect preservation scores exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QabfParams {
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    pub l: f64,
}

impl Default for QabfParams {
    fn default() -> Self {
        QabfParams {
            kappa_g: -15.0,
            sigma_g: 0.5,
            kappa_a: -22.0,
            sigma_a: 0.8,
            l: 1.0,
        }
    }
}

impl QabfParams {
    fn sig(kappa: f64, sigma: f64, x: f64) -> f64 {
        (1.0 + (kappa * (1.0 - sigma)).exp()) / (1.0 + (kappa * (x - sigma)).exp())
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Edge strength and orientation with replicate padding.
pub(crate) fn sobel(x: &Plane) -> (Plane, Plane) {
    let (h, w) = x.dim();
    let at = |y: isize, xx: isize| x[[y.clamp(0, h as isize - 1) as usize, xx.clamp(0, w as isize - 1) as usize]];
    let mut g = Plane::zeros((h, w));
    let mut alpha = Plane::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (i, row) in SOBEL_X.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let (dy, dx) = (i as isize - 1, j as isize - 1);
                    sx += k * at(y as isize + dy, xx as isize + dx);
                    sy += k * at(y as isize + dx, xx as isize + dy);
                }
            }
            g[[y, xx]] = (sx * sx + sy * sy).sqrt();
            alpha[[y, xx]] = if sx == 0.0 && sy == 0.0 { 0.0 } else { (sy / sx).atan() };
        }
    }
    (g, alpha)
}

fn edge_preservation(src: &(Plane, Plane), fused: &(Plane, Plane), p: &QabfParams) -> Plane {
    let half_pi = std::f64::consts::FRAC_PI_2;
    Zip::from(&src.0)
        .and(&src.1)
        .and(&fused.0)
        .and(&fused.1)
        .map_collect(|&ga, &aa, &gf, &af| {
            let g = if ga == 0.0 && gf == 0.0 {
                0.0
            } else if ga > gf {
                gf / ga
            } else {
                ga / gf
            };
            // Orientation is only defined modulo π.
            let d = (aa - af).abs();
            let d = d.min(std::f64::consts::PI - d);
            let a = 1.0 - d / half_pi;
            QabfParams::sig(p.kappa_g, p.sigma_g, g) * QabfParams::sig(p.kappa_a, p.sigma_a, a)
        })
}

pub fn qabf_detailed(f: &Plane, a: &Plane, b: &Plane, p: &QabfParams) -> Result<(f64, Vec<String>)> {
    check_same(&f.view(), &a.view(), "Qabf")?;
    check_same(&f.view(), &b.view(), "Qabf")?;
    let (ea, eb, ef) = (sobel(a), sobel(b), sobel(f));
    let qa = edge_preservation(&ea, &ef, p);
    let qb = edge_preservation(&eb, &ef, p);
    let wa = ea.0.mapv(|g| g.powf(p.l));
    let wb = eb.0.mapv(|g| g.powf(p.l));
    let den = wa.sum() + wb.sum();
    if den == 0.0 {
        return Ok((0.0, vec!["Qabf: neither source has edges, counted as 0".into()]));
    }
    let num = (&qa * &wa).sum() + (&qb * &wb).sum();
    Ok((num / den, Vec::new()))
}

/// Edge-transfer quality in `[0, 1]`.
pub fn qabf(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    let (v, w) = qabf_detailed(f, a, b, &QabfParams::default())?;
    w.iter().for_each(|m| log::warn!("{m}"));
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    pub vif: VifParams,
    pub qabf: QabfParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    En,
    Sd,
    Sf,
    Mi,
    Scd,
    Vif,
    Qabf,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::En,
        Metric::Sd,
        Metric::Sf,
        Metric::Mi,
        Metric::Scd,
        Metric::Vif,
        Metric::Qabf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::En => "EN",
            Metric::Sd => "SD",
            Metric::Sf => "SF",
            Metric::Mi => "MI",
            Metric::Scd => "SCD",
            Metric::Vif => "VIF",
            Metric::Qabf => "Qabf",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct MetricValues {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub scd: f64,
    pub vif: f64,
    #[serde(rename = "Qabf")]
    pub qabf: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::En => self.en,
            Metric::Sd => self.sd,
            Metric::Sf => self.sf,
            Metric::Mi => self.mi,
            Metric::Scd => self.scd,
            Metric::Vif => self.vif,
            Metric::Qabf => self.qabf,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        *match m {
            Metric::En => &mut self.en,
            Metric::Sd => &mut self.sd,
            Metric::Sf => &mut self.sf,
            Metric::Mi => &mut self.mi,
            Metric::Scd => &mut self.scd,
            Metric::Vif => &mut self.vif,
            Metric::Qabf => &mut self.qabf,
        } = v;
    }

    fn all_finite(&self) -> bool {
        Metric::ALL.iter().all(|&m| self.get(m).is_finite())
    }
}

/// All seven metrics for planes already on the 0–255 scale.
pub fn evaluate_planes(
    f: &Plane,
    a: &Plane,
    b: &Plane,
    params: &MetricParams,
) -> Result<(MetricValues, Vec<String>)> {
    let (scd, mut warnings) = scd_detailed(f, a, b)?;
    let (vif, w) = vif_detailed(f, a, b, &params.vif)?;
    warnings.extend(w);
    let (qabf, w) = qabf_detailed(f, a, b, &params.qabf)?;
    warnings.extend(w);
    let v = MetricValues {
        en: en(f),
        sd: sd(f),
        sf: sf(f),
        mi: mi(f, a, b)?,
        scd,
        vif,
        qabf,
    };
    if !v.all_finite() {
        return Err(Error::Numerical {
            stage: "metric evaluation".into(),
        });
    }
    Ok((v, warnings))
}

pub fn evaluate_images(
    fused: &Image,
    pair: &ImagePair,
    params: &MetricParams,
) -> Result<(MetricValues, Vec<String>)> {
    if fused.dims() != pair.dims() {
        return Err(Error::Dimension(format!(
            "fused {:?} vs pair {:?}",
            fused.dims(),
            pair.dims()
        )));
    }
    evaluate_planes(
        &gray_levels(fused),
        &gray_levels(&pair.ir),
        &gray_levels(&pair.vis),
        params,
    )
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Sorted by id.
    pub rows: Vec<(String, MetricValues)>,
    pub mean: MetricValues,
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(mut rows: Vec<(String, MetricValues)>) -> Self {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut mean = MetricValues::default();
        if !rows.is_empty() {
            for m in Metric::ALL {
                let total: f64 = rows.iter().map(|(_, v)| v.get(m)).sum();
                mean.set(m, total / rows.len() as f64);
            }
        }
        MetricReport {
            rows,
            mean,
            missing: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<&str> = std::iter::once("id")
            .chain(Metric::ALL.iter().map(|m| m.name()))
            .collect();
        let mut out = header.join(",");
        out.push('\n');
        let line = |id: &str, v: &MetricValues| {
            let cells: Vec<String> = Metric::ALL.iter().map(|&m| v.get(m).to_string()).collect();
            format!("{id},{}\n", cells.join(","))
        };
        for (id, v) in &self.rows {
            out.push_str(&line(id, v));
        }
        out.push_str(&line(SUMMARY_ID, &self.mean));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Value("empty metric report".into()))?
            .split(',')
            .collect();
        if header.first() != Some(&"id") || header.len() != Metric::ALL.len() + 1 {
            return Err(Error::Value(format!("unexpected report header {header:?}")));
        }
        let columns = header[1..]
            .iter()
            .map(|h| h.parse::<Metric>())
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::Value(format!("malformed report row {line:?}")));
            }
            if cells[0] == SUMMARY_ID {
                continue;
            }
            let mut v = MetricValues::default();
            for (&m, cell) in columns.iter().zip(&cells[1..]) {
                let x = cell
                    .parse::<f64>()
                    .map_err(|e| Error::Value(format!("bad value {cell:?}: {e}")))?;
                v.set(m, x);
            }
            rows.push((cells[0].to_string(), v));
        }
        Ok(MetricReport::from_rows(rows))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

pub const SUMMARY_ID: &str = "mean";

pub fn fused_path(fused_dir: &Path, id: &str) -> PathBuf {
    fused_dir.join(format!("{id}.png"))
}

/// Evaluate `fused_dir/{id}.png` against every pair in the index.
///
/// Ids without a fused file are listed in `missing` and left out of the
/// means. `jobs` worker threads split the ids.
pub fn evaluate_all(
    index: &DatasetIndex,
    fused_dir: &Path,
    params: &MetricParams,
    jobs: usize,
) -> Result<MetricReport> {
    let (present, missing): (Vec<_>, Vec<_>) = index
        .entries
        .iter()
        .partition(|e| fused_path(fused_dir, &e.id).is_file());
    let jobs = jobs.max(1).min(present.len().max(1));
    let chunk = present.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<(String, MetricValues, Vec<String>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = present
            .chunks(chunk)
            .map(|entries| {
                scope.spawn(move || {
                    entries
                        .iter()
                        .map(|e| {
                            let pair = load_pair(e)?;
                            let fused = Image::load_png(fused_path(fused_dir, &e.id), 3)?;
                            let (v, w) = evaluate_images(&fused, &pair, params)?;
                            let w = w.into_iter().map(|m| format!("{}: {m}", e.id)).collect();
                            Ok((e.id.clone(), v, w))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for chunk in results {
        for (id, v, w) in chunk? {
            rows.push((id, v));
            warnings.extend(w);
        }
    }
    let mut report = MetricReport::from_rows(rows);
    report.missing = missing.into_iter().map(|e| e.id.clone()).collect();
    report.warnings = warnings;
    for id in &report.missing {
        log::error!("no fused image for {id} in {}", fused_dir.display());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
        Array2::from_shape_fn((h, w), |_| rng.random_range(0..256) as f64)
    }

    fn triple(seed: u64, h: usize, w: usize) -> (Plane, Plane, Plane) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_plane(h, w, &mut rng), random_plane(h, w, &mut rng), random_plane(h, w, &mut rng))
    }

    fn flat(p: &Plane) -> Vec<f64> {
        p.iter().copied().collect()
    }

    // Brute-force oracles over plain vectors.

    fn en_oracle(v: &[f64]) -> f64 {
        let mut e = 0.0;
        for lvl in 0..256 {
            let c = v.iter().filter(|&&x| x as usize == lvl).count();
            if c > 0 {
                let p = c as f64 / v.len() as f64;
                e -= p * p.log2();
            }
        }
        e
    }

    fn sd_oracle(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    }

    fn sf_oracle(p: &Plane) -> f64 {
        let (h, w) = p.dim();
        let mut rf = 0.0;
        for y in 0..h {
            for x in 1..w {
                rf += (p[[y, x]] - p[[y, x - 1]]).powi(2);
            }
        }
        let mut cf = 0.0;
        for y in 1..h {
            for x in 0..w {
                cf += (p[[y, x]] - p[[y - 1, x]]).powi(2);
            }
        }
        (rf / (h * (w - 1)) as f64 + cf / ((h - 1) * w) as f64).sqrt()
    }

    fn mi_pair_oracle(f: &[f64], a: &[f64]) -> f64 {
        let n = f.len() as f64;
        let mut total = 0.0;
        for i in 0..256 {
            let pf = f.iter().filter(|&&x| x as usize == i).count() as f64 / n;
            if pf == 0.0 {
                continue;
            }
            for j in 0..256 {
                let pa = a.iter().filter(|&&x| x as usize == j).count() as f64 / n;
                let pj = f
                    .iter()
                    .zip(a)
                    .filter(|(&x, &y)| x as usize == i && y as usize == j)
                    .count() as f64
                    / n;
                if pj > 0.0 {
                    total += pj * (pj / (pf * pa)).log2();
                }
            }
        }
        total
    }

    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    /// Straight-line Qabf over plain nested loops.
    fn qabf_oracle(f: &Plane, a: &Plane, b: &Plane) -> f64 {
        let (h, w) = f.dim();
        let px = |p: &Plane, y: i64, x: i64| p[[y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize]];
        let grad = |p: &Plane, y: usize, x: usize| -> (f64, f64) {
            let (y, x) = (y as i64, x as i64);
            let gx = px(p, y - 1, x + 1) + 2.0 * px(p, y, x + 1) + px(p, y + 1, x + 1)
                - px(p, y - 1, x - 1)
                - 2.0 * px(p, y, x - 1)
                - px(p, y + 1, x - 1);
            let gy = px(p, y + 1, x - 1) + 2.0 * px(p, y + 1, x) + px(p, y + 1, x + 1)
                - px(p, y - 1, x - 1)
                - 2.0 * px(p, y - 1, x)
                - px(p, y - 1, x + 1);
            let g = (gx * gx + gy * gy).sqrt();
            let al = if gx == 0.0 && gy == 0.0 { 0.0 } else { (gy / gx).atan() };
            (g, al)
        };
        let sigm = |k: f64, s: f64, x: f64| (1.0 + (k * (1.0 - s)).exp()) / (1.0 + (k * (x - s)).exp());
        let q = |(ga, aa): (f64, f64), (gf, af): (f64, f64)| {
            let g = if ga == 0.0 && gf == 0.0 { 0.0 } else { ga.min(gf) / ga.max(gf) };
            let mut d = (aa - af).abs();
            if d > std::f64::consts::FRAC_PI_2 {
                d = std::f64::consts::PI - d;
            }
            sigm(-15.0, 0.5, g) * sigm(-22.0, 0.8, 1.0 - d / std::f64::consts::FRAC_PI_2)
        };
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (ea, eb, ef) = (grad(a, y, x), grad(b, y, x), grad(f, y, x));
                num += q(ea, ef) * ea.0 + q(eb, ef) * eb.0;
                den += ea.0 + eb.0;
            }
        }
        num / den
    }

    #[test]
    fn en_cases() {
        assert_eq!(en(&Plane::from_elem((8, 8), 17.0)), 0.0);
        let uniform = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f64);
        assert_eq!(en(&uniform), 8.0);
        for seed in 0..5 {
            let (f, _, _) = triple(seed, 8, 8);
            assert!((en(&f) - en_oracle(&flat(&f))).abs() <= 1e-12);
        }
    }

    #[test]
    fn sd_cases() {
        assert_eq!(sd(&Plane::from_elem((8, 8), 3.0)), 0.0);
        let two = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 0.0 } else { 255.0 });
        assert_eq!(sd(&two), 127.5);
        for seed in 0..5 {
            let (f, _, _) = triple(seed, 8, 8);
            assert!((sd(&f) - sd_oracle(&flat(&f))).abs() <= 1e-9);
        }
    }

    #[test]
    fn sf_cases() {
        assert_eq!(sf(&Plane::from_elem((8, 8), 3.0)), 0.0);
        let board = Array2::from_shape_fn((8, 8), |(y, x)| if (y + x) % 2 == 0 { 0.0 } else { 255.0 });
        assert!((sf(&board) - 255.0 * 2f64.sqrt()).abs() < 1e-9);
        for seed in 0..5 {
            let (f, _, _) = triple(seed, 8, 8);
            assert!((sf(&f) - sf_oracle(&f)).abs() <= 1e-9);
        }
    }

    #[test]
    fn mi_cases() {
        let (f, a, b) = triple(11, 8, 8);
        assert!((mi(&f, &f, &f).unwrap() - 2.0 * en(&f)).abs() < 1e-12);
        let oracle = mi_pair_oracle(&flat(&f), &flat(&a)) + mi_pair_oracle(&flat(&f), &flat(&b));
        assert!((mi(&f, &a, &b).unwrap() - oracle).abs() <= 1e-12);
        assert!(matches!(mi(&f, &Plane::zeros((8, 9)), &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mi_of_independent_images_is_small() {
        // Few levels keep the plug-in estimator bias well under the bound.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = || Array2::from_shape_fn((256, 256), |_| (rng.random_range(0..8) * 32) as f64);
        let (f, a, b) = (p(), p(), p());
        let v = mi(&f, &a, &b).unwrap();
        assert!(v < 0.1, "MI {v}");
    }

    #[test]
    fn scd_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() - 0.5);
        let b = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() - 0.5);
        let f = &a + &b;
        assert!((scd(&f, &a, &b).unwrap() - 2.0).abs() <= 1e-9);

        let (v, w) = scd_detailed(&Plane::from_elem((8, 8), 4.0), &a, &b).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(w.len(), 1);
        // Constant visible source: F = A leaves r(A − c, A) = 1 and a
        // degenerate r(0, B).
        let (v, w) = scd_detailed(&a, &a, &Plane::from_elem((8, 8), 1.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(w.len(), 1);

        for seed in 0..5 {
            let (f, a, b) = triple(seed, 8, 8);
            let oracle = pearson_oracle(&flat(&(&f - &b)), &flat(&a)) + pearson_oracle(&flat(&(&f - &a)), &flat(&b));
            assert!((scd(&f, &a, &b).unwrap() - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn vif_cases() {
        let (a, _, _) = triple(21, 64, 64);
        let v = vif(&a, &a, &a).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "{v}");
        let blurred = {
            let k = gaussian_window(9);
            let inner = filter_valid(&a, &k);
            let mut out = a.clone();
            out.slice_mut(s![4..60, 4..60]).assign(&inner);
            out
        };
        assert!(vif(&blurred, &a, &a).unwrap() < 2.0);
        assert!(matches!(vif(&a.slice(s![..8, ..8]).to_owned(), &a.slice(s![..8, ..8]).to_owned(), &a.slice(s![..8, ..8]).to_owned()), Err(Error::Dimension(_))));
        for seed in 0..100 {
            let (f, a, b) = triple(100 + seed, 48, 48);
            let v1 = vif(&f, &a, &b).unwrap();
            assert!(v1.is_finite());
            assert_eq!(v1, vif(&f, &a, &b).unwrap());
        }
    }

    #[test]
    fn gaussian_window_normalized() {
        for n in [3, 5, 9, 17] {
            let k = gaussian_window(n);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert_eq!(k[0], k[n - 1]);
        }
    }

    #[test]
    fn qabf_cases() {
        let (a, b, f) = triple(31, 8, 8);
        assert!((qabf(&a, &a, &a).unwrap() - 1.0).abs() <= 1e-6);
        let c = qabf(&Plane::from_elem((8, 8), 9.0), &a, &b).unwrap();
        assert!(c < 1e-3, "{c}");
        let (v, w) = qabf_detailed(&f, &Plane::zeros((8, 8)), &Plane::zeros((8, 8)), &QabfParams::default()).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(w.len(), 1);
        for seed in 0..5 {
            let (f, a, b) = triple(40 + seed, 8, 8);
            let q = qabf(&f, &a, &b).unwrap();
            assert!((0.0..=1.0).contains(&q));
            assert!((q - qabf_oracle(&f, &a, &b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn transposition_invariance() {
        let (f, a, b) = triple(51, 64, 56);
        let t = |p: &Plane| p.t().to_owned();
        let p = MetricParams::default();
        let (x, _) = evaluate_planes(&f, &a, &b, &p).unwrap();
        let (y, _) = evaluate_planes(&t(&f), &t(&a), &t(&b), &p).unwrap();
        assert_eq!(x.en, y.en);
        assert_eq!(x.sd, y.sd);
        assert!((x.sf - y.sf).abs() <= 1e-12);
        for m in [Metric::Mi, Metric::Scd, Metric::Vif, Metric::Qabf] {
            assert!((x.get(m) - y.get(m)).abs() <= 1e-9, "{m}");
        }
    }

    #[test]
    fn range_invariants() {
        for seed in 0..20 {
            let (f, a, b) = triple(60 + seed, 48, 48);
            let (v, _) = evaluate_planes(&f, &a, &b, &MetricParams::default()).unwrap();
            assert!((0.0..=8.0).contains(&v.en));
            assert!((0.0..=127.5).contains(&v.sd));
            assert!(v.sf >= 0.0 && v.mi >= 0.0);
            assert!((0.0..=1.0).contains(&v.qabf));
        }
    }

    #[test]
    fn gray_levels_quantize() {
        let img = Image::filled(8, 8, 3, 0.4).unwrap();
        assert!(gray_levels(&img).iter().all(|&v| v == 102.0));
    }

    #[test]
    fn report_mean_and_round_trip() {
        let v = |x: f64| MetricValues { en: x, sd: 2.0 * x, sf: 0.1 + x, mi: x / 3.0, scd: -x, vif: x * x, qabf: 1.0 / (1.0 + x) };
        let report = MetricReport::from_rows(vec![("b".into(), v(0.7)), ("a".into(), v(1.3))]);
        assert_eq!(report.rows[0].0, "a");
        for m in Metric::ALL {
            assert_eq!(report.mean.get(m), (v(0.7).get(m) + v(1.3).get(m)) / 2.0);
        }
        let back = MetricReport::parse_csv(&report.to_csv()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_csv().starts_with("id,EN,SD,SF,MI,SCD,VIF,Qabf\n"));
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("XYZ".parse::<Metric>().is_err());
    }
}
