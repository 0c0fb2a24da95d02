//! Part vocabularies, soft segmentation masks and the mask plumbing used by
//! the localization score: aggregation of the masks of the original and the
//! edited image, and downsampling to each featuremap's resolution.

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartLabel {
    pub name: String,
    pub id: u32,
}

impl PartLabel {
    pub fn new(name: impl Into<String>, id: u32) -> Self {
        PartLabel { name: name.into(), id }
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.name, self.id)
    }
}

/// Soft per-pixel mask with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    values: Array2<f64>,
    part: PartLabel,
}

impl SegmentationMask {
    pub fn new(values: Array2<f64>, part: PartLabel) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(LelsdError::InvalidInput(format!("mask for `{}` has entries outside [0, 1]", part.name)));
        }
        Ok(SegmentationMask { values, part })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn part(&self) -> &PartLabel {
        &self.part
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Average,
    Union,
    Intersection,
}

impl std::str::FromStr for AggregationMode {
    type Err = LelsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(AggregationMode::Average),
            "union" => Ok(AggregationMode::Union),
            "intersection" => Ok(AggregationMode::Intersection),
            other => Err(LelsdError::InvalidInput(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// A semantic segmentation model restricted to a fixed part vocabulary.
///
/// Images arrive as `(3, H, W)` tensors in `[-1, 1]`; any preprocessing the
/// model needs is its own business. Output must be deterministic.
pub trait SegmenterBackend: Send + Sync {
    fn vocabulary(&self) -> &[PartLabel];

    fn native_resolution(&self) -> (usize, usize);

    fn segment(&self, image: &Array3<f64>, part: &PartLabel) -> Result<SegmentationMask>;

    fn part(&self, name: &str) -> Result<PartLabel> {
        self.vocabulary()
            .iter()
            .find(|p| p.name == name)
            .cloned()
            .ok_or_else(|| LelsdError::UnknownPart(name.to_string()))
    }

    fn ensure_known(&self, part: &PartLabel) -> Result<()> {
        if self.vocabulary().contains(part) {
            Ok(())
        } else {
            Err(LelsdError::UnknownPart(part.name.clone()))
        }
    }
}

/// Segmenter matched to the planted generator: "left" covers columns
/// `[0, W/2)`, "right" covers `[W/2, W)`, independent of image content.
#[derive(Debug, Clone)]
pub struct HalfPlaneSegmenter {
    height: usize,
    width: usize,
    vocabulary: Vec<PartLabel>,
}

impl HalfPlaneSegmenter {
    pub fn new(height: usize, width: usize) -> Self {
        HalfPlaneSegmenter { height, width, vocabulary: vec![PartLabel::new("left", 0), PartLabel::new("right", 1)] }
    }
}

impl SegmenterBackend for HalfPlaneSegmenter {
    fn vocabulary(&self) -> &[PartLabel] {
        &self.vocabulary
    }

    fn native_resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn segment(&self, image: &Array3<f64>, part: &PartLabel) -> Result<SegmentationMask> {
        self.ensure_known(part)?;
        let (_, h, w) = image.dim();
        if (h, w) != (self.height, self.width) {
            return Err(LelsdError::ShapeMismatch(format!(
                "segmenter expects {}x{} images, got {h}x{w}",
                self.height, self.width
            )));
        }
        let half = self.width / 2;
        let left = part.id == 0;
        let values = Array2::from_shape_fn((h, w), |(_, j)| if (j < half) == left { 1.0 } else { 0.0 });
        SegmentationMask::new(values, part.clone())
    }
}

pub fn aggregate_part_masks(
    a: &SegmentationMask,
    b: &SegmentationMask,
    mode: AggregationMode,
) -> Result<SegmentationMask> {
    if a.resolution() != b.resolution() {
        return Err(LelsdError::ShapeMismatch(format!(
            "cannot aggregate masks of resolution {:?} and {:?}",
            a.resolution(),
            b.resolution()
        )));
    }
    if a.part != b.part {
        return Err(LelsdError::InvalidInput(format!(
            "cannot aggregate masks of parts `{}` and `{}`",
            a.part.name, b.part.name
        )));
    }
    let values = match mode {
        AggregationMode::Average => (&a.values + &b.values) * 0.5,
        AggregationMode::Union => ndarray::Zip::from(&a.values).and(&b.values).map_collect(|x, y| x.max(*y)),
        AggregationMode::Intersection => ndarray::Zip::from(&a.values).and(&b.values).map_collect(|x, y| x.min(*y)),
    };
    Ok(SegmentationMask { values, part: a.part.clone() })
}

/// Resamples a mask to a coarser grid.
///
/// Integer ratios use box (area) averaging, which conserves the mask mean.
/// Other ratios fall back to bilinear sampling at target pixel centres,
/// clamped to `[0, 1]`.
pub fn downsample_mask(mask: &SegmentationMask, target: (usize, usize)) -> Result<SegmentationMask> {
    let (sh, sw) = mask.resolution();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > sh || tw > sw {
        return Err(LelsdError::ShapeMismatch(format!("cannot downsample a {sh}x{sw} mask to {th}x{tw}")));
    }
    if (th, tw) == (sh, sw) {
        return Ok(mask.clone());
    }
    let values = if sh % th == 0 && sw % tw == 0 {
        let (fh, fw) = (sh / th, sw / tw);
        let area = (fh * fw) as f64;
        Array2::from_shape_fn((th, tw), |(i, j)| {
            let block = mask.values.slice(ndarray::s![i * fh..(i + 1) * fh, j * fw..(j + 1) * fw]);
            block.sum() / area
        })
    } else {
        let sy = sh as f64 / th as f64;
        let sx = sw as f64 / tw as f64;
        Array2::from_shape_fn((th, tw), |(i, j)| {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            bilinear(&mask.values, y, x).clamp(0.0, 1.0)
        })
    };
    Ok(SegmentationMask { values, part: mask.part.clone() })
}

fn bilinear(grid: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = grid.dim();
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
    let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}
