//! Latent spaces, codes, directions and the additive edit algebra.
//!
//! Codes and directions are stored as flat vectors; structured spaces
//! (W+, S, Z+) are a concatenation of per-layer blocks whose sizes come
//! from [`LatentSpace::dim_per_layer`]. An edit moves a code along a
//! unit direction, `code + alpha * direction`, with the direction zeroed
//! outside its layer range.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};
use crate::segmentation::PartLabel;

/// Tolerance on the L2 norm of a stored direction.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Z,
    W,
    Wplus,
    S,
    Zplus,
}

impl SpaceKind {
    /// Flat spaces hold a single vector; structured spaces hold one block per layer.
    pub fn is_flat(self) -> bool {
        matches!(self, SpaceKind::Z | SpaceKind::W)
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SpaceKind::Z => "z",
            SpaceKind::W => "w",
            SpaceKind::Wplus => "wplus",
            SpaceKind::S => "s",
            SpaceKind::Zplus => "zplus",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = LelsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(SpaceKind::Z),
            "w" => Ok(SpaceKind::W),
            "wplus" | "w+" => Ok(SpaceKind::Wplus),
            "s" => Ok(SpaceKind::S),
            "zplus" | "z+" => Ok(SpaceKind::Zplus),
            other => Err(LelsdError::InvalidInput(format!("unknown latent space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct LatentSpace {
    kind: SpaceKind,
    dim_per_layer: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSpace {
    kind: SpaceKind,
    dim_per_layer: Vec<usize>,
}

impl TryFrom<RawSpace> for LatentSpace {
    type Error = LelsdError;

    fn try_from(raw: RawSpace) -> Result<Self> {
        LatentSpace::new(raw.kind, raw.dim_per_layer)
    }
}

impl From<LatentSpace> for RawSpace {
    fn from(space: LatentSpace) -> Self {
        RawSpace { kind: space.kind, dim_per_layer: space.dim_per_layer }
    }
}

impl LatentSpace {
    pub fn new(kind: SpaceKind, dim_per_layer: Vec<usize>) -> Result<Self> {
        if dim_per_layer.is_empty() || dim_per_layer.contains(&0) {
            return Err(LelsdError::InvalidInput(
                "latent space needs at least one layer and positive dimensions".into(),
            ));
        }
        if kind.is_flat() && dim_per_layer.len() != 1 {
            return Err(LelsdError::InvalidInput(format!(
                "flat space {kind} must have exactly one block, got {}",
                dim_per_layer.len()
            )));
        }
        Ok(LatentSpace { kind, dim_per_layer })
    }

    pub fn flat(kind: SpaceKind, dim: usize) -> Result<Self> {
        Self::new(kind, vec![dim])
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim_per_layer(&self) -> &[usize] {
        &self.dim_per_layer
    }

    pub fn num_layers(&self) -> usize {
        self.dim_per_layer.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dim_per_layer.iter().sum()
    }

    /// Index range of a layer's block inside the flat vector.
    pub fn block(&self, layer: usize) -> Range<usize> {
        let start: usize = self.dim_per_layer[..layer].iter().sum();
        start..start + self.dim_per_layer[layer]
    }

    /// Index range covered by an inclusive layer range.
    pub fn span(&self, range: LayerRange) -> Range<usize> {
        self.block(range.lo).start..self.block(range.hi).end
    }

    pub fn full_range(&self) -> LayerRange {
        LayerRange { lo: 0, hi: self.num_layers() - 1 }
    }

    pub fn ensure_same(&self, other: &LatentSpace) -> Result<()> {
        if self != other {
            return Err(LelsdError::SpaceMismatch(format!(
                "{}{:?} vs {}{:?}",
                self.kind, self.dim_per_layer, other.kind, other.dim_per_layer
            )));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total_dim() {
            return Err(LelsdError::ShapeMismatch(format!(
                "vector of length {len} does not fit space of dimension {}",
                self.total_dim()
            )));
        }
        Ok(())
    }
}

/// Inclusive range of latent layers an edit applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct LayerRange {
    pub lo: usize,
    pub hi: usize,
}

impl From<[usize; 2]> for LayerRange {
    fn from([lo, hi]: [usize; 2]) -> Self {
        LayerRange { lo, hi }
    }
}

impl From<LayerRange> for [usize; 2] {
    fn from(r: LayerRange) -> Self {
        [r.lo, r.hi]
    }
}

impl LayerRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        LayerRange { lo, hi }
    }

    pub fn validate(&self, space: &LatentSpace) -> Result<()> {
        if self.lo > self.hi || self.hi >= space.num_layers() {
            return Err(LelsdError::InvalidInput(format!(
                "layer range [{}, {}] invalid for a space with {} layers",
                self.lo,
                self.hi,
                space.num_layers()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.lo..=self.hi).contains(&layer)
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl std::str::FromStr for LayerRange {
    type Err = LelsdError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LelsdError::InvalidInput(format!("layer range `{s}` is not LO:HI"));
        let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
        Ok(LayerRange { lo: lo.trim().parse().map_err(|_| bad())?, hi: hi.trim().parse().map_err(|_| bad())? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    space: LatentSpace,
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(space: LatentSpace, values: Vec<f64>) -> Result<Self> {
        space.check_len(values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LelsdError::InvalidInput("latent code has non-finite entries".into()));
        }
        Ok(LatentCode { space, values })
    }

    pub fn zeros(space: LatentSpace) -> Self {
        let values = vec![0.0; space.total_dim()];
        LatentCode { space, values }
    }

    pub fn space(&self) -> &LatentSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDirection {
    space: LatentSpace,
    values: Vec<f64>,
    part: PartLabel,
    layer_range: LayerRange,
    name: String,
}

impl LatentDirection {
    /// Builds a direction whose values already have unit L2 norm.
    pub fn new(
        space: LatentSpace,
        values: Vec<f64>,
        part: PartLabel,
        layer_range: LayerRange,
        name: impl Into<String>,
    ) -> Result<Self> {
        space.check_len(values.len())?;
        layer_range.validate(&space)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LelsdError::InvalidInput("direction has non-finite entries".into()));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(LelsdError::InvalidInput(format!("direction norm {norm} is not 1")));
        }
        Ok(LatentDirection { space, values, part, layer_range, name: name.into() })
    }

    /// Builds a direction from an arbitrary nonzero vector by scaling it to unit norm.
    pub fn normalized(
        space: LatentSpace,
        mut values: Vec<f64>,
        part: PartLabel,
        layer_range: LayerRange,
        name: impl Into<String>,
    ) -> Result<Self> {
        let norm = l2_norm(&values);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(LelsdError::InvalidInput("cannot normalize a zero or non-finite vector".into()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Self::new(space, values, part, layer_range, name)
    }

    pub fn space(&self) -> &LatentSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn part(&self) -> &PartLabel {
        &self.part
    }

    pub fn layer_range(&self) -> LayerRange {
        self.layer_range
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Direction values with blocks outside the layer range set to zero.
    pub fn masked_values(&self) -> Vec<f64> {
        mask_to_range(&self.space, self.layer_range, &self.values)
    }
}

/// Zeroes every block of `values` outside `range`.
pub fn mask_to_range(space: &LatentSpace, range: LayerRange, values: &[f64]) -> Vec<f64> {
    let span = space.span(range);
    values.iter().enumerate().map(|(i, &v)| if span.contains(&i) { v } else { 0.0 }).collect()
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOp {
    pub direction: Arc<LatentDirection>,
    pub alpha: f64,
}

impl EditOp {
    pub fn new(direction: Arc<LatentDirection>, alpha: f64) -> Self {
        EditOp { direction, alpha }
    }

    fn check(&self, space: &LatentSpace) -> Result<()> {
        space.ensure_same(self.direction.space())?;
        if !self.alpha.is_finite() {
            return Err(LelsdError::InvalidEdit(format!(
                "alpha {} for `{}` is not finite",
                self.alpha,
                self.direction.name()
            )));
        }
        Ok(())
    }
}

/// Moves `code` by `alpha` along the op's direction, restricted to its layer range.
pub fn apply_edit(code: &LatentCode, op: &EditOp) -> Result<LatentCode> {
    op.check(code.space())?;
    if op.alpha == 0.0 {
        return Ok(code.clone());
    }
    let span = code.space.span(op.direction.layer_range());
    let mut values = code.values.clone();
    for i in span {
        values[i] += op.alpha * op.direction.values()[i];
    }
    Ok(LatentCode { space: code.space.clone(), values })
}

/// Adds every op's scaled direction to `code`.
///
/// The per-coordinate increments are summed in a canonical order, so the
/// result is bitwise independent of the order of `ops`.
pub fn compose_edits(code: &LatentCode, ops: &[EditOp]) -> Result<LatentCode> {
    for op in ops {
        op.check(code.space())?;
    }
    let mut values = code.values.clone();
    let mut terms = Vec::with_capacity(ops.len());
    for (i, value) in values.iter_mut().enumerate() {
        terms.clear();
        for op in ops {
            if op.alpha != 0.0 && op.direction.layer_range().contains(layer_of(code.space(), i)) {
                let term = op.alpha * op.direction.values()[i];
                if term != 0.0 {
                    terms.push(term);
                }
            }
        }
        if terms.is_empty() {
            continue;
        }
        terms.sort_by(|a, b| a.total_cmp(b));
        *value += terms.iter().sum::<f64>();
    }
    Ok(LatentCode { space: code.space.clone(), values })
}

fn layer_of(space: &LatentSpace, index: usize) -> usize {
    let mut end = 0;
    for (layer, dim) in space.dim_per_layer().iter().enumerate() {
        end += dim;
        if index < end {
            return layer;
        }
    }
    unreachable!("index {index} outside latent space")
}
