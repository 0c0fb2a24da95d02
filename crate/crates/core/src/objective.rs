//! The localization score, the decorrelation regularizer and the total
//! training objective, with analytic gradients with respect to direction
//! values.
//!
//! For one featuremap `r` and its edited counterpart `r'`, the per-pixel
//! change energy is `d[i,j] = sum_c (r - r')^2` and the layer score is
//! `sum m*d / (sum d + eps)` with `m` the aggregated part mask downsampled
//! to the layer. A direction's score is the weighted sum over all layers,
//! image included. Several directions are pushed apart by
//! `R = -1/2 * ||Corr(u_1..u_K) - I||_F`.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};
use crate::generator::GeneratorBackend;
use crate::latent::{mask_to_range, LatentCode, LatentDirection, LayerRange};
use crate::segmentation::{aggregate_part_masks, downsample_mask, AggregationMode, PartLabel, SegmenterBackend};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    /// Normalized inner products.
    #[default]
    Cosine,
    /// Cosine of mean-centred vectors.
    Pearson,
}

impl std::str::FromStr for CorrelationKind {
    type Err = LelsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(CorrelationKind::Cosine),
            "pearson" => Ok(CorrelationKind::Pearson),
            other => Err(LelsdError::InvalidInput(format!("unknown correlation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub aggregation_mode: AggregationMode,
    pub epsilon: f64,
    /// One nonnegative weight per scored layer; `None` weights all layers 1.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub correlation: CorrelationKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            aggregation_mode: AggregationMode::Average,
            epsilon: DEFAULT_EPSILON,
            layer_weights: None,
            correlation: CorrelationKind::Cosine,
        }
    }
}

impl ObjectiveConfig {
    /// Smallest representable stabilizer: the score equals the exact ratio
    /// whenever the change energy is nonzero.
    pub fn vanishing_epsilon() -> Self {
        ObjectiveConfig { epsilon: f64::MIN_POSITIVE, ..Self::default() }
    }

    pub fn with_aggregation(mut self, mode: AggregationMode) -> Self {
        self.aggregation_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LelsdError::InvalidInput(format!("epsilon {} must be positive", self.epsilon)));
        }
        if let Some(w) = &self.layer_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(LelsdError::InvalidInput("layer weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    fn weights(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.layer_weights {
            None => Ok(vec![1.0; layers]),
            Some(w) if w.len() == layers => Ok(w.clone()),
            Some(w) => Err(LelsdError::ShapeMismatch(format!("{} layer weights for {layers} scored layers", w.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub per_layer: Vec<f64>,
    pub total: f64,
    pub regularizer: f64,
    pub objective: f64,
}

impl ScoreBreakdown {
    fn from_layers(per_layer: Vec<f64>, weights: &[f64]) -> Self {
        let total = per_layer.iter().zip(weights).map(|(s, w)| s * w).sum();
        ScoreBreakdown { per_layer, total, regularizer: 0.0, objective: total }
    }

    fn mean(items: &[ScoreBreakdown]) -> ScoreBreakdown {
        let n = items.len() as f64;
        let layers = items[0].per_layer.len();
        let per_layer = (0..layers).map(|l| items.iter().map(|b| b.per_layer[l]).sum::<f64>() / n).collect();
        let total = items.iter().map(|b| b.total).sum::<f64>() / n;
        ScoreBreakdown { per_layer, total, regularizer: 0.0, objective: total }
    }
}

/// Value of the multi-direction objective on a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Batch-mean score of each direction.
    pub per_direction: Vec<ScoreBreakdown>,
    pub score_sum: f64,
    pub regularizer: f64,
    pub objective: f64,
}

/// Direction parameters that need not be unit norm (used for training and
/// gradient checks).
#[derive(Debug, Clone, Copy)]
pub struct RawDirection<'a> {
    pub values: &'a [f64],
    pub layer_range: LayerRange,
}

impl<'a> From<&'a LatentDirection> for RawDirection<'a> {
    fn from(d: &'a LatentDirection) -> Self {
        RawDirection { values: d.values(), layer_range: d.layer_range() }
    }
}

fn change_energy(r: &Array3<f64>, r_edit: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = r.dim();
    let mut energy = Array2::zeros((h, w));
    Zip::indexed(r).and(r_edit).for_each(|(_, i, j), a, b| {
        energy[[i, j]] += (a - b) * (a - b);
    });
    energy
}

fn check_layer_inputs(r: &Array3<f64>, r_edit: &Array3<f64>, mask: &Array2<f64>) -> Result<()> {
    if r.dim() != r_edit.dim() {
        return Err(LelsdError::ShapeMismatch(format!("featuremaps of shape {:?} and {:?}", r.dim(), r_edit.dim())));
    }
    let (_, h, w) = r.dim();
    if mask.dim() != (h, w) {
        return Err(LelsdError::ShapeMismatch(format!("mask of resolution {:?} for a {h}x{w} layer", mask.dim())));
    }
    if r.iter().chain(r_edit.iter()).chain(mask.iter()).any(|v| !v.is_finite()) {
        return Err(LelsdError::InvalidInput("non-finite value in localization score inputs".into()));
    }
    Ok(())
}

/// Fraction of the change energy of one layer that falls inside `mask`.
pub fn localization_score_layer(
    r: &Array3<f64>,
    r_edit: &Array3<f64>,
    mask: &Array2<f64>,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_layer_inputs(r, r_edit, mask)?;
    let energy = change_energy(r, r_edit);
    let inside = (&energy * mask).sum();
    Ok(inside / (energy.sum() + cfg.epsilon))
}

/// Layer score and its gradient with respect to `r_edit`.
fn layer_score_with_grad(r: &Array3<f64>, r_edit: &Array3<f64>, mask: &Array2<f64>, eps: f64) -> (f64, Array3<f64>) {
    let energy = change_energy(r, r_edit);
    let denom = energy.sum() + eps;
    let score = (&energy * mask).sum() / denom;
    // d score / d energy[i,j] = (mask[i,j] - score) / denom
    // d energy[i,j] / d r_edit[c,i,j] = -2 (r - r_edit)[c,i,j]
    let grad = Array3::from_shape_fn(r.dim(), |(c, i, j)| {
        (mask[[i, j]] - score) / denom * -2.0 * (r[[c, i, j]] - r_edit[[c, i, j]])
    });
    (score, grad)
}

fn edited_code(code: &LatentCode, dir: RawDirection<'_>, alpha: f64) -> Result<LatentCode> {
    if dir.values.len() != code.values().len() {
        return Err(LelsdError::ShapeMismatch(format!(
            "direction of length {} for a code of length {}",
            dir.values.len(),
            code.values().len()
        )));
    }
    if !alpha.is_finite() {
        return Err(LelsdError::InvalidEdit(format!("alpha {alpha} is not finite")));
    }
    dir.layer_range.validate(code.space())?;
    let masked = mask_to_range(code.space(), dir.layer_range, dir.values);
    let values = code.values().iter().zip(&masked).map(|(w, u)| w + alpha * u).collect();
    LatentCode::new(code.space().clone(), values)
}

/// Scores one edit and optionally returns the gradient with respect to the
/// direction values. Masks are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn score_edit(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    code: &LatentCode,
    dir: RawDirection<'_>,
    alpha: f64,
    part: &PartLabel,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(ScoreBreakdown, Option<Vec<f64>>)> {
    cfg.validate()?;
    segmenter.ensure_known(part)?;
    if want_grad && !backend.is_differentiable() {
        return Err(LelsdError::UnsupportedCapability("gradient through a non-differentiable backend".into()));
    }
    let moved = edited_code(code, dir, alpha)?;
    let base = backend.forward(code)?;
    let edited = backend.forward(&moved)?;
    let mask = aggregate_part_masks(
        &segmenter.segment(base.image(), part)?,
        &segmenter.segment(edited.image(), part)?,
        cfg.aggregation_mode,
    )?;
    let weights = cfg.weights(base.layers().len())?;

    let mut per_layer = Vec::with_capacity(weights.len());
    let mut seeds = Vec::with_capacity(if want_grad { weights.len() } else { 0 });
    for ((r, r_edit), &weight) in base.layers().iter().zip(edited.layers()).zip(&weights) {
        let (_, h, w) = r.dim();
        let layer_mask = downsample_mask(&mask, (h, w))?;
        check_layer_inputs(r, r_edit, layer_mask.values())?;
        if want_grad {
            let (score, grad) = layer_score_with_grad(r, r_edit, layer_mask.values(), cfg.epsilon);
            per_layer.push(score);
            seeds.push(grad * weight);
        } else {
            per_layer.push(localization_score_layer(r, r_edit, layer_mask.values(), cfg)?);
        }
    }
    let breakdown = ScoreBreakdown::from_layers(per_layer, &weights);
    if !want_grad {
        return Ok((breakdown, None));
    }
    let grad_code = backend.forward_with_gradients(&moved, &seeds)?;
    let grad = mask_to_range(code.space(), dir.layer_range, &grad_code).into_iter().map(|g| alpha * g).collect();
    Ok((breakdown, Some(grad)))
}

/// Localization score of moving `code` by `alpha` along `direction`.
#[allow(clippy::too_many_arguments)]
pub fn localization_score(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    code: &LatentCode,
    direction: &LatentDirection,
    alpha: f64,
    part: &PartLabel,
    cfg: &ObjectiveConfig,
) -> Result<ScoreBreakdown> {
    code.space().ensure_same(direction.space())?;
    backend.space().ensure_same(code.space())?;
    Ok(score_edit(backend, segmenter, code, direction.into(), alpha, part, cfg, false)?.0)
}

/// Batch-mean score of one direction, with its mean gradient when requested.
#[allow(clippy::too_many_arguments)]
pub fn batch_score(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    codes: &[LatentCode],
    dir: RawDirection<'_>,
    alpha: f64,
    part: &PartLabel,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(ScoreBreakdown, Option<Vec<f64>>)> {
    if codes.is_empty() {
        return Err(LelsdError::InvalidInput("empty batch".into()));
    }
    let mut scores = Vec::with_capacity(codes.len());
    let mut grad = want_grad.then(|| vec![0.0; dir.values.len()]);
    for code in codes {
        let (score, g) = score_edit(backend, segmenter, code, dir, alpha, part, cfg, want_grad)?;
        scores.push(score);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
    }
    let n = codes.len() as f64;
    if let Some(acc) = grad.as_mut() {
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok((ScoreBreakdown::mean(&scores), grad))
}

/// Correlation matrix of the given vectors.
pub fn correlation_matrix(vectors: &[&[f64]], kind: CorrelationKind) -> Result<Vec<Vec<f64>>> {
    let prepared = prepare(vectors, kind)?;
    let k = prepared.len();
    let mut corr = vec![vec![0.0; k]; k];
    for i in 0..k {
        corr[i][i] = 1.0;
        for j in i + 1..k {
            let c = dot(&prepared[i].0, &prepared[j].0) / (prepared[i].1 * prepared[j].1);
            corr[i][j] = c;
            corr[j][i] = c;
        }
    }
    Ok(corr)
}

/// Centred (for Pearson) copies of the vectors with their norms.
fn prepare(vectors: &[&[f64]], kind: CorrelationKind) -> Result<Vec<(Vec<f64>, f64)>> {
    if vectors.is_empty() {
        return Err(LelsdError::InvalidInput("regularizer needs at least one direction".into()));
    }
    let len = vectors[0].len();
    vectors
        .iter()
        .map(|v| {
            if v.len() != len {
                return Err(LelsdError::SpaceMismatch("directions of different lengths".into()));
            }
            let mut v = v.to_vec();
            if kind == CorrelationKind::Pearson {
                let mean = v.iter().sum::<f64>() / len as f64;
                v.iter_mut().for_each(|x| *x -= mean);
            }
            let norm = dot(&v, &v).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(LelsdError::InvalidInput("zero-norm direction in regularizer".into()));
            }
            Ok((v, norm))
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-1/2 * ||Corr - I||_F`; zero exactly when all pairs are orthogonal.
pub fn regularizer_values(vectors: &[&[f64]], kind: CorrelationKind) -> Result<f64> {
    let corr = correlation_matrix(vectors, kind)?;
    let mut sq = 0.0;
    for (i, row) in corr.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if i != j {
                sq += c * c;
            }
        }
    }
    Ok(0.0 - 0.5 * sq.sqrt())
}

pub fn regularizer(directions: &[LatentDirection], kind: CorrelationKind) -> Result<f64> {
    if let Some(first) = directions.first() {
        for d in &directions[1..] {
            first.space().ensure_same(d.space())?;
        }
    }
    let values: Vec<&[f64]> = directions.iter().map(|d| d.values()).collect();
    regularizer_values(&values, kind)
}

/// Gradient of the regularizer with respect to `vectors[active]`, all
/// other vectors held fixed. Zero where the Frobenius norm vanishes.
pub fn regularizer_gradient(vectors: &[&[f64]], active: usize, kind: CorrelationKind) -> Result<Vec<f64>> {
    let prepared = prepare(vectors, kind)?;
    let corr = correlation_matrix(vectors, kind)?;
    let k = prepared.len();
    let frob = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| corr[i][j] * corr[i][j])
        .sum::<f64>()
        .sqrt();
    let n = vectors[active].len();
    let mut grad = vec![0.0; n];
    if frob == 0.0 {
        return Ok(grad);
    }
    let (ua, na) = &prepared[active];
    for j in (0..k).filter(|&j| j != active) {
        let (uj, nj) = &prepared[j];
        let c = corr[active][j];
        // dC/du_a = u_j / (|u_a| |u_j|) - C u_a / |u_a|^2
        for i in 0..n {
            let dc = uj[i] / (na * nj) - c * ua[i] / (na * na);
            grad[i] -= c * dc / frob;
        }
    }
    if kind == CorrelationKind::Pearson {
        let mean = grad.iter().sum::<f64>() / n as f64;
        grad.iter_mut().for_each(|g| *g -= mean);
    }
    Ok(grad)
}

/// `sum_k mean_batch LS(u_k) + c * R(u_1..u_K)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    codes: &[LatentCode],
    directions: &[LatentDirection],
    alphas: &[f64],
    part: &PartLabel,
    c: f64,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    for d in directions {
        backend.space().ensure_same(d.space())?;
    }
    let raw: Vec<RawDirection<'_>> = directions.iter().map(RawDirection::from).collect();
    Ok(objective_with_gradient(backend, segmenter, codes, &raw, alphas, part, c, cfg, false)?.0)
}

/// Objective value and, when requested, its gradient with respect to each
/// direction's values.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_gradient(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    codes: &[LatentCode],
    directions: &[RawDirection<'_>],
    alphas: &[f64],
    part: &PartLabel,
    c: f64,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(ObjectiveValue, Option<Vec<Vec<f64>>>)> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(LelsdError::InvalidInput(format!("regularization coefficient {c} must be >= 0")));
    }
    if alphas.len() != directions.len() {
        return Err(LelsdError::InvalidInput(format!("{} alphas for {} directions", alphas.len(), directions.len())));
    }
    for code in codes {
        backend.space().ensure_same(code.space())?;
    }
    let mut per_direction = Vec::with_capacity(directions.len());
    let mut grads = Vec::with_capacity(directions.len());
    for (dir, &alpha) in directions.iter().zip(alphas) {
        let (score, grad) = batch_score(backend, segmenter, codes, *dir, alpha, part, cfg, want_grad)?;
        per_direction.push(score);
        grads.push(grad);
    }
    let values: Vec<&[f64]> = directions.iter().map(|d| d.values).collect();
    let regularizer = regularizer_values(&values, cfg.correlation)?;
    let score_sum: f64 = per_direction.iter().map(|s| s.total).sum();
    let objective = score_sum + c * regularizer;
    let grads = if want_grad {
        let mut out = Vec::with_capacity(directions.len());
        for (k, g) in grads.into_iter().enumerate() {
            let mut g = g.expect("requested");
            if c != 0.0 {
                let rg = regularizer_gradient(&values, k, cfg.correlation)?;
                g.iter_mut().zip(rg).for_each(|(a, r)| *a += c * r);
            }
            out.push(g);
        }
        Some(out)
    } else {
        None
    };
    for s in &mut per_direction {
        s.regularizer = regularizer;
        s.objective = objective;
    }
    Ok((ObjectiveValue { per_direction, score_sum, regularizer, objective }, grads))
}
