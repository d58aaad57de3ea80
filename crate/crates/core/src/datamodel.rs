//! Array-backed image types shared by every stage of the pipeline.
//!
//! Images are stored height × width × channels in `f64`. Tensors handed to the
//! networks use the usual `(batch, channels, height, width)` layout; the
//! conversion helpers live here so that channel packing is defined once.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, Axis};

use crate::error::{Error, Result};

/// Smallest admissible image side.
pub const MIN_SIDE: usize = 8;

/// Number of channels in a [`ConditionedSample`].
pub const CONDITIONED_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    pub fn contains(self, v: f64) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi
    }
}

impl FromStr for ValueRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(ValueRange::Unit),
            "signed" => Ok(ValueRange::Signed),
            other => Err(Error::Config(format!("unknown value range `{other}`"))),
        }
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueRange::Unit => "unit",
            ValueRange::Signed => "signed",
        })
    }
}

fn check_finite(data: &Array3<f64>, what: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("{what} contains non-finite value {v}")));
    }
    Ok(())
}

/// A 1- or 3-channel image with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
    range: ValueRange,
}

impl Image {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!(
                "image has {c} channels, expected 1 or 3"
            )));
        }
        check_finite(&data, "image")?;
        if let Some(v) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Value(format!(
                "value {v} outside the declared {range} range"
            )));
        }
        Ok(Image { data, range })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Image::new(Array3::from_shape_fn((height, width, channels), f), range)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(
            Array3::from_elem((height, width, channels), value),
            ValueRange::Unit,
        )
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y, x, c]]
    }

    /// Copies out a `height × width` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Image> {
        if y + height > self.height() || x + width > self.width() {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}@({y},{x}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Image::new(
            self.data.slice(s![y..y + height, x..x + width, ..]).to_owned(),
            self.range,
        )
    }

    /// Replicates a single channel three times.
    pub fn broadcast_rgb(&self) -> Image {
        if self.channels() == 3 {
            return self.clone();
        }
        let plane = self.data.index_axis(Axis(2), 0);
        let data = Array3::from_shape_fn((self.height(), self.width(), 3), |(y, x, _)| {
            plane[[y, x]]
        });
        Image {
            data,
            range: self.range,
        }
    }

    /// BT.601 luma for 3-channel images, identity for 1-channel images.
    pub fn luma(&self) -> ndarray::Array2<f64> {
        if self.channels() == 1 {
            return self.data.index_axis(Axis(2), 0).to_owned();
        }
        ndarray::Array2::from_shape_fn((self.height(), self.width()), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }

    /// Extends the image by mirror reflection (edge pixel not repeated) so that
    /// both sides become multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<Image> {
        let (h, w) = self.dims();
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if ph - h >= h || pw - w >= w {
            return Err(Error::Dimension(format!(
                "{h}x{w} image too small to reflect-pad to a multiple of {multiple}"
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let data = Array3::from_shape_fn((ph, pw, self.channels()), |(y, x, c)| {
            self.data[[reflect(y, h), reflect(x, w), c]]
        });
        Ok(Image {
            data,
            range: self.range,
        })
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, c) = self.data.dim();
        let chw = self.data.view().permuted_axes([2, 0, 1]);
        let flat: Vec<f64> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(1, C, H, W)` or `(C, H, W)`.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Image> {
        let t = match t.rank() {
            4 => {
                if t.dim(0)? != 1 {
                    return Err(Error::Dimension(format!(
                        "expected a single image, got batch of {}",
                        t.dim(0)?
                    )));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => return Err(Error::Dimension(format!("expected rank 3 or 4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| flat[ch * h * w + y * w + x]);
        Image::new(data, range)
    }

    /// Reads an 8-bit PNG (grayscale when `channels == 1`, RGB when 3).
    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes, channels).map_err(|e| match e {
            Error::Decode { detail, .. } => Error::Decode {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn decode_png(bytes: &[u8], channels: usize) -> Result<Image> {
        let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
            |e| Error::Decode {
                path: "<memory>".into(),
                detail: e.to_string(),
            },
        )?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let data = match channels {
            1 => {
                let g = dynimg.to_luma8();
                Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
                    g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
                })
            }
            3 => {
                let rgb = dynimg.to_rgb8();
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
                })
            }
            c => return Err(Error::Dimension(format!("cannot load {c}-channel PNG"))),
        };
        Image::new(data, ValueRange::Unit)
    }

    /// 8-bit samples (unit range, rounded), row-major, channel-interleaved.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (lo, hi) = self.range.bounds();
        self.data
            .iter()
            .map(|v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let color = if self.channels() == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &self.to_bytes(),
            w,
            h,
            color,
        )
        .map_err(|e| Error::Value(format!("PNG encoding failed: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Affine remap between `[0, 1]` and `[-1, 1]`.
pub fn normalize(img: &Image, target: ValueRange) -> Image {
    let data = match (img.range, target) {
        (a, b) if a == b => img.data.clone(),
        (ValueRange::Unit, ValueRange::Signed) => img.data.mapv(|v| 2.0 * v - 1.0),
        (ValueRange::Signed, ValueRange::Unit) => img.data.mapv(|v| (v + 1.0) / 2.0),
        _ => unreachable!(),
    };
    Image {
        data,
        range: target,
    }
}

/// Registered infrared/visible pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ir: Image,
    pub vis: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, ir: Image, vis: Image) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Value("pair id must not be empty".into()));
        }
        if ir.channels() != 1 {
            return Err(Error::Dimension(format!(
                "infrared image has {} channels, expected 1",
                ir.channels()
            )));
        }
        if vis.channels() != 3 {
            return Err(Error::Dimension(format!(
                "visible image has {} channels, expected 3",
                vis.channels()
            )));
        }
        if ir.dims() != vis.dims() {
            return Err(Error::Dimension(format!(
                "pair {id}: infrared {:?} vs visible {:?}",
                ir.dims(),
                vis.dims()
            )));
        }
        Ok(ImagePair { id, ir, vis })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ir.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskProvenance {
    File,
    Synthetic,
    Remote,
    RandomPatch,
    /// Replaced by zeros for an ablation.
    Ablated,
}

impl fmt::Display for MaskProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskProvenance::File => "file",
            MaskProvenance::Synthetic => "synthetic",
            MaskProvenance::Remote => "remote",
            MaskProvenance::RandomPatch => "random_patch",
            MaskProvenance::Ablated => "ablated",
        })
    }
}

/// Infrared and visible semantic masks, soft values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    m_ir: Image,
    m_vis: Image,
    provenance: MaskProvenance,
}

impl MaskPair {
    pub fn new(m_ir: Image, m_vis: Image, provenance: MaskProvenance) -> Result<Self> {
        for (name, m) in [("infrared", &m_ir), ("visible", &m_vis)] {
            if m.channels() != 1 {
                return Err(Error::Dimension(format!(
                    "{name} mask has {} channels, expected 1",
                    m.channels()
                )));
            }
            if m.range() != ValueRange::Unit {
                return Err(Error::Value(format!("{name} mask must be in the unit range")));
            }
        }
        if m_ir.dims() != m_vis.dims() {
            return Err(Error::Dimension(format!(
                "mask sizes differ: {:?} vs {:?}",
                m_ir.dims(),
                m_vis.dims()
            )));
        }
        Ok(MaskPair {
            m_ir,
            m_vis,
            provenance,
        })
    }

    pub fn m_ir(&self) -> &Image {
        &self.m_ir
    }

    pub fn m_vis(&self) -> &Image {
        &self.m_vis
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn dims(&self) -> (usize, usize) {
        self.m_ir.dims()
    }

    pub fn ensure_matches(&self, pair: &ImagePair) -> Result<()> {
        if self.dims() != pair.dims() {
            return Err(Error::Dimension(format!(
                "masks are {:?} but pair {} is {:?}",
                self.dims(),
                pair.id,
                pair.dims()
            )));
        }
        Ok(())
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<MaskPair> {
        Ok(MaskPair {
            m_ir: self.m_ir.crop(y, x, height, width)?,
            m_vis: self.m_vis.crop(y, x, height, width)?,
            provenance: self.provenance,
        })
    }

    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<MaskPair> {
        Ok(MaskPair {
            m_ir: self.m_ir.reflect_pad_to_multiple(multiple)?,
            m_vis: self.m_vis.reflect_pad_to_multiple(multiple)?,
            provenance: self.provenance,
        })
    }

    /// Replaces the selected masks with zeros, marking the pair as ablated.
    pub fn ablate(&self, drop_ir: bool, drop_vis: bool) -> MaskPair {
        if !drop_ir && !drop_vis {
            return self.clone();
        }
        let zero = |m: &Image| Image {
            data: Array3::zeros(m.data.dim()),
            range: ValueRange::Unit,
        };
        MaskPair {
            m_ir: if drop_ir { zero(&self.m_ir) } else { self.m_ir.clone() },
            m_vis: if drop_vis { zero(&self.m_vis) } else { self.m_vis.clone() },
            provenance: MaskProvenance::Ablated,
        }
    }

    /// `(1, 1, H, W)` tensors for `(m_ir, m_vis)`.
    pub fn to_tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((
            self.m_ir.to_tensor(dtype, device)?,
            self.m_vis.to_tensor(dtype, device)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStage {
    Preliminary,
    Final,
}

/// 3-channel fused output in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    image: Image,
    stage: FusionStage,
}

impl FusedImage {
    pub fn new(image: Image, stage: FusionStage) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Dimension(format!(
                "fused image has {} channels, expected 3",
                image.channels()
            )));
        }
        if image.range() != ValueRange::Unit {
            return Err(Error::Value("fused image must be in the unit range".into()));
        }
        Ok(FusedImage { image, stage })
    }

    pub fn from_tensor(t: &Tensor, stage: FusionStage) -> Result<Self> {
        FusedImage::new(Image::from_tensor(t, ValueRange::Unit)?, stage)
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn stage(&self) -> FusionStage {
        self.stage
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// Five-channel diffusion state `[F1.r, F1.g, F1.b, M_ir, M_vis]`.
///
/// Channels 0–2 are signed (`[-1, 1]`), channels 3–4 stay in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSample {
    data: Array3<f64>,
}

impl ConditionedSample {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != CONDITIONED_CHANNELS {
            return Err(Error::Dimension(format!(
                "conditioned sample has {c} channels, expected {CONDITIONED_CHANNELS}"
            )));
        }
        check_finite(&data, "conditioned sample")?;
        for ((_, _, ch), v) in data.indexed_iter() {
            let range = if ch < 3 {
                ValueRange::Signed
            } else {
                ValueRange::Unit
            };
            if !range.contains(*v) {
                return Err(Error::Value(format!(
                    "channel {ch} value {v} outside the {range} range"
                )));
            }
        }
        Ok(ConditionedSample { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    /// Recovers the preliminary fused image and the masks.
    pub fn split(&self) -> Result<(FusedImage, MaskPair)> {
        let rgb = Image::new(
            self.data.slice(s![.., .., 0..3]).to_owned(),
            ValueRange::Signed,
        )?;
        let f1 = FusedImage::new(normalize(&rgb, ValueRange::Unit), FusionStage::Preliminary)?;
        let m_ir = Image::new(self.data.slice(s![.., .., 3..4]).to_owned(), ValueRange::Unit)?;
        let m_vis = Image::new(self.data.slice(s![.., .., 4..5]).to_owned(), ValueRange::Unit)?;
        Ok((f1, MaskPair::new(m_ir, m_vis, MaskProvenance::File)?))
    }

    /// `(1, 5, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, c) = self.data.dim();
        let flat: Vec<f64> = self.data.view().permuted_axes([2, 0, 1]).iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, c, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Packs `F1` and the masks into the five-channel diffusion layout.
pub fn to_conditioned_sample(f1: &FusedImage, masks: &MaskPair) -> Result<ConditionedSample> {
    if f1.stage() != FusionStage::Preliminary {
        return Err(Error::Value(
            "conditioning requires the preliminary fused image".into(),
        ));
    }
    if f1.dims() != masks.dims() {
        return Err(Error::Dimension(format!(
            "fused image {:?} vs masks {:?}",
            f1.dims(),
            masks.dims()
        )));
    }
    let rgb = normalize(f1.image(), ValueRange::Signed);
    let (h, w) = f1.dims();
    let data = Array3::from_shape_fn((h, w, CONDITIONED_CHANNELS), |(y, x, c)| match c {
        0..=2 => rgb.data[[y, x, c]],
        3 => masks.m_ir.data[[y, x, 0]],
        _ => masks.m_vis.data[[y, x, 0]],
    });
    ConditionedSample::new(data)
}

/// Stacks same-sized images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let tensors = images
        .iter()
        .map(|img| img.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}
