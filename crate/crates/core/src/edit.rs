//! Edit sessions, distance-calibrated edit strength and latent inversion.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};
use crate::generator::{GeneratorBackend, PlantedGenerator};
use crate::latent::{apply_edit, compose_edits, EditOp, LatentCode, LatentDirection, LatentSpace};

/// Image dissimilarity used to calibrate edit strengths.
///
/// Implementations must satisfy `d(x, x) == 0`, `d(x, y) >= 0` and
/// `d(x, y) == d(y, x)`.
pub trait DistanceMetric: Send + Sync {
    fn name(&self) -> &str;

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64>;
}

fn check_images(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LelsdError::ShapeMismatch(format!("images {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean over pixels of the Euclidean norm of the per-pixel channel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelL2;

impl DistanceMetric for PixelL2 {
    fn name(&self) -> &str {
        "pixel-l2"
    }

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        check_images(a, b)?;
        let (c, h, w) = a.dim();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let sq: f64 = (0..c).map(|k| (a[[k, i, j]] - b[[k, i, j]]).powi(2)).sum();
                total += sq.sqrt();
            }
        }
        Ok(total / (h * w) as f64)
    }
}

/// Mean squared error over all entries.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquaredError;

impl DistanceMetric for MeanSquaredError {
    fn name(&self) -> &str {
        "mse"
    }

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        check_images(a, b)?;
        Ok((a - b).mapv(|v| v * v).mean().unwrap_or(0.0))
    }
}

/// Looks a metric up by its name.
pub fn metric_by_name(name: &str) -> Result<Box<dyn DistanceMetric>> {
    match name {
        "pixel-l2" => Ok(Box::new(PixelL2)),
        "mse" => Ok(Box::new(MeanSquaredError)),
        other => Err(LelsdError::InvalidInput(format!("unknown metric `{other}`"))),
    }
}

/// A base code plus a stack of additive edits.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    session_id: String,
    base_code: LatentCode,
    edit_stack: Vec<EditOp>,
    backend_fingerprint: String,
}

impl EditSession {
    pub fn new(session_id: impl Into<String>, base_code: LatentCode, backend_fingerprint: impl Into<String>) -> Self {
        EditSession {
            session_id: session_id.into(),
            base_code,
            edit_stack: Vec::new(),
            backend_fingerprint: backend_fingerprint.into(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn base_code(&self) -> &LatentCode {
        &self.base_code
    }

    pub fn edit_stack(&self) -> &[EditOp] {
        &self.edit_stack
    }

    pub fn backend_fingerprint(&self) -> &str {
        &self.backend_fingerprint
    }

    pub fn push_edit(&mut self, op: EditOp) -> Result<()> {
        self.base_code.space().ensure_same(op.direction.space())?;
        if !op.alpha.is_finite() {
            return Err(LelsdError::InvalidEdit(format!("alpha {} is not finite", op.alpha)));
        }
        self.edit_stack.push(op);
        Ok(())
    }

    pub fn pop_edit(&mut self) -> Option<EditOp> {
        self.edit_stack.pop()
    }

    pub fn current_code(&self) -> Result<LatentCode> {
        compose_edits(&self.base_code, &self.edit_stack)
    }

    fn check_backend(&self, backend: &dyn GeneratorBackend) -> Result<()> {
        let found = backend.fingerprint();
        if found != self.backend_fingerprint {
            return Err(LelsdError::FingerprintMismatch { expected: self.backend_fingerprint.clone(), found });
        }
        Ok(())
    }

    pub fn render(&self, backend: &dyn GeneratorBackend) -> Result<Array3<f64>> {
        self.check_backend(backend)?;
        Ok(backend.forward(&self.current_code()?)?.into_image())
    }

    pub fn render_base(&self, backend: &dyn GeneratorBackend) -> Result<Array3<f64>> {
        self.check_backend(backend)?;
        Ok(backend.forward(&self.base_code)?.into_image())
    }

    pub fn export(&self) -> SessionExport {
        SessionExport {
            session_id: self.session_id.clone(),
            backend_fingerprint: self.backend_fingerprint.clone(),
            base_code: ExportedCode { space: self.base_code.space().clone(), values: self.base_code.values().to_vec() },
            edits: self
                .edit_stack
                .iter()
                .map(|op| ExportedEdit { direction: op.direction.name().to_string(), alpha: op.alpha })
                .collect(),
        }
    }
}

/// Portable session document: base code, edit stack by direction name and
/// the generator fingerprint it was rendered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub session_id: String,
    pub backend_fingerprint: String,
    pub base_code: ExportedCode,
    pub edits: Vec<ExportedEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedCode {
    pub space: LatentSpace,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedEdit {
    pub direction: String,
    pub alpha: f64,
}

impl SessionExport {
    /// Rebuilds the session, resolving direction names through `lookup`.
    pub fn restore<F>(&self, lookup: F) -> Result<EditSession>
    where
        F: Fn(&str) -> Option<Arc<LatentDirection>>,
    {
        let base = LatentCode::new(self.base_code.space.clone(), self.base_code.values.clone())?;
        let mut session = EditSession::new(self.session_id.clone(), base, self.backend_fingerprint.clone());
        for edit in &self.edits {
            let direction = lookup(&edit.direction)
                .ok_or_else(|| LelsdError::InvalidInput(format!("unknown direction `{}`", edit.direction)))?;
            session.push_edit(EditOp::new(direction, edit.alpha))?;
        }
        Ok(session)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session export serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LelsdError::InvalidInput(format!("session export: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Accept `|d(alpha) - target| <= rel_tolerance * max(target, 1e-6)`.
    pub rel_tolerance: f64,
    pub max_bisections: usize,
    /// Largest `|alpha|` probed while bracketing.
    pub alpha_cap: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { rel_tolerance: 1e-3, max_bisections: 40, alpha_cap: 1024.0 }
    }
}

/// Finds `(alpha_neg, alpha_pos)` such that editing the session's current
/// image along `direction` moves it `target` away under `metric`.
///
/// Each branch expands `|alpha|` geometrically (1, 2, 4, ...) until the
/// distance reaches the target, then bisects the last bracket. Distance is
/// assumed to grow with `|alpha|` on each branch.
pub fn calibrate_alpha(
    session: &EditSession,
    direction: &Arc<LatentDirection>,
    target: f64,
    metric: &dyn DistanceMetric,
    backend: &dyn GeneratorBackend,
    opts: &CalibrationOptions,
) -> Result<(f64, f64)> {
    if !(target >= 0.0 && target.is_finite()) {
        return Err(LelsdError::InvalidInput(format!("target distance {target} must be >= 0")));
    }
    session.base_code().space().ensure_same(direction.space())?;
    if target == 0.0 {
        return Ok((0.0, 0.0));
    }
    let current = session.current_code()?;
    let reference = session.render(backend)?;
    let tolerance = opts.rel_tolerance * target.max(1e-6);
    let gap = |alpha: f64| -> Result<f64> {
        let moved = apply_edit(&current, &EditOp::new(direction.clone(), alpha))?;
        let image = backend.forward(&moved)?.into_image();
        Ok(metric.distance(&reference, &image)? - target)
    };
    let neg = solve_branch(&gap, -1.0, tolerance, opts)?;
    let pos = solve_branch(&gap, 1.0, tolerance, opts)?;
    Ok((neg, pos))
}

fn solve_branch(gap: &dyn Fn(f64) -> Result<f64>, sign: f64, tolerance: f64, opts: &CalibrationOptions) -> Result<f64> {
    let mut inner = 0.0;
    let mut magnitude = 1.0;
    let mut history: Vec<f64> = Vec::new();
    let outer = loop {
        if magnitude > opts.alpha_cap {
            return Err(LelsdError::CalibrationOutOfRange(format!(
                "target not reached for |alpha| <= {}",
                opts.alpha_cap
            )));
        }
        let g = gap(sign * magnitude)?;
        if g.abs() <= tolerance {
            return Ok(sign * magnitude);
        }
        if let [.., a, b] = history[..] {
            if g < b && b < a {
                return Err(LelsdError::NonMonotoneDistance(format!(
                    "distance fell over three probes ending at alpha = {}",
                    sign * magnitude
                )));
            }
        }
        history.push(g);
        if g > 0.0 {
            break magnitude;
        }
        inner = magnitude;
        magnitude *= 2.0;
    };

    let (mut lo, mut hi) = (inner, outer);
    for _ in 0..opts.max_bisections {
        let mid = 0.5 * (lo + hi);
        let g = gap(sign * mid)?;
        if g.abs() <= tolerance {
            return Ok(sign * mid);
        }
        if g > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(LelsdError::CalibrationOutOfRange(format!(
        "bisection did not reach tolerance {tolerance} within {} steps",
        opts.max_bisections
    )))
}

/// Projects images back into a generator's latent space.
pub trait InversionBackend: Send + Sync {
    fn target_space(&self) -> &LatentSpace;

    fn invert(&self, image: &Array3<f64>) -> Result<LatentCode>;
}

/// Least-squares preimage for the linearized planted generator, whose image
/// is an affine function `b + A z` of the code.
#[derive(Debug, Clone)]
pub struct LeastSquaresInverter {
    space: LatentSpace,
    image_shape: (usize, usize, usize),
    bias: DVector<f64>,
    pseudo_inverse: DMatrix<f64>,
}

impl LeastSquaresInverter {
    pub fn for_planted(generator: &PlantedGenerator) -> Result<Self> {
        if !generator.config().linearized {
            return Err(LelsdError::UnsupportedCapability(
                "least-squares inversion needs the linearized planted generator".into(),
            ));
        }
        let space = generator.space().clone();
        let dim = space.total_dim();
        let image_at = |values: Vec<f64>| -> Result<DVector<f64>> {
            let out = generator.forward(&LatentCode::new(space.clone(), values)?)?;
            Ok(DVector::from_iterator(out.image().len(), out.image().iter().copied()))
        };
        let bias = image_at(vec![0.0; dim])?;
        let mut matrix = DMatrix::zeros(bias.len(), dim);
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            matrix.set_column(k, &(image_at(e)? - &bias));
        }
        let pseudo_inverse = matrix
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .map_err(|e| LelsdError::InvalidInput(format!("pseudo-inverse failed: {e}")))?;
        Ok(LeastSquaresInverter { space, image_shape: generator.image_shape(), bias, pseudo_inverse })
    }
}

impl InversionBackend for LeastSquaresInverter {
    fn target_space(&self) -> &LatentSpace {
        &self.space
    }

    fn invert(&self, image: &Array3<f64>) -> Result<LatentCode> {
        if image.dim() != self.image_shape {
            return Err(LelsdError::ShapeMismatch(format!("image {:?}, expected {:?}", image.dim(), self.image_shape)));
        }
        let target = DVector::from_iterator(image.len(), image.iter().copied()) - &self.bias;
        let code = &self.pseudo_inverse * target;
        LatentCode::new(self.space.clone(), code.iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LayerRange;
    use crate::segmentation::PartLabel;
    use crate::trainer::sample_latents;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn axis(coords: std::ops::Range<usize>, name: &str, generator: &PlantedGenerator) -> Arc<LatentDirection> {
        let mut v = vec![0.0; 8];
        for k in coords {
            v[k] = 1.0;
        }
        let space = generator.space().clone();
        Arc::new(LatentDirection::normalized(space, v, PartLabel::new(name, 0), LayerRange::new(0, 0), name).unwrap())
    }

    fn session(generator: &PlantedGenerator, seed: u64) -> EditSession {
        let code = sample_latents(generator.space(), 1, seed).remove(0);
        EditSession::new("s", code, generator.fingerprint())
    }

    #[test]
    fn push_pop_and_cancellation() {
        let g = PlantedGenerator::seeded(1);
        let u = axis(0..4, "left", &g);
        let mut s = session(&g, 3);
        let original = s.clone();
        s.push_edit(EditOp::new(u.clone(), 1.5)).unwrap();
        s.pop_edit();
        assert_eq!(s, original);

        let base = s.render(&g).unwrap();
        s.push_edit(EditOp::new(u.clone(), 1.0)).unwrap();
        s.push_edit(EditOp::new(u.clone(), -1.0)).unwrap();
        assert_eq!(s.render(&g).unwrap(), base);
    }

    #[test]
    fn render_matches_single_edit() {
        let g = PlantedGenerator::seeded(1);
        let u = axis(2..6, "mixed", &g);
        let mut s = session(&g, 4);
        assert_eq!(s.render(&g).unwrap(), g.forward(s.base_code()).unwrap().into_image());
        s.push_edit(EditOp::new(u.clone(), 2.5)).unwrap();
        let direct = g.forward(&apply_edit(s.base_code(), &EditOp::new(u, 2.5)).unwrap()).unwrap();
        assert_eq!(&s.render(&g).unwrap(), direct.image());
    }

    #[test]
    fn render_rejects_other_backends() {
        let g = PlantedGenerator::seeded(1);
        let s = session(&g, 1);
        assert!(matches!(s.render(&PlantedGenerator::seeded(2)), Err(LelsdError::FingerprintMismatch { .. })));
    }

    #[test]
    fn disjoint_edits_commute_and_stay_local() {
        let g = PlantedGenerator::seeded(5);
        let left = axis(0..4, "left", &g);
        let right = axis(4..8, "right", &g);
        let base_session = session(&g, 9);
        let base = base_session.render(&g).unwrap();

        let render = |ops: &[(Arc<LatentDirection>, f64)]| {
            let mut s = base_session.clone();
            for (d, a) in ops {
                s.push_edit(EditOp::new(d.clone(), *a)).unwrap();
            }
            s.render(&g).unwrap()
        };
        let both = render(&[(left.clone(), 2.0), (right.clone(), -1.5)]);
        assert_eq!(both, render(&[(right.clone(), -1.5), (left.clone(), 2.0)]));
        let only_left = render(&[(left, 2.0)]);
        let only_right = render(&[(right, -1.5)]);
        for ((c, i, j), v) in both.indexed_iter() {
            let expected = if j < 8 { only_left[[c, i, j]] } else { only_right[[c, i, j]] };
            assert_eq!(v.to_bits(), expected.to_bits());
            let untouched = if j < 8 { only_right[[c, i, j]] } else { only_left[[c, i, j]] };
            assert_eq!(untouched.to_bits(), base[[c, i, j]].to_bits());
        }
    }

    #[test]
    fn export_round_trip_renders_identically() {
        let g = PlantedGenerator::seeded(1);
        let u = axis(0..3, "left", &g);
        let mut s = session(&g, 12);
        s.push_edit(EditOp::new(u.clone(), 0.1 + 0.2)).unwrap();
        s.push_edit(EditOp::new(u.clone(), -1.0 / 3.0)).unwrap();
        let text = s.export().to_json();
        let restored =
            SessionExport::from_json(&text).unwrap().restore(|name| (name == "left").then(|| u.clone())).unwrap();
        assert_eq!(restored, s);
        assert_eq!(restored.render(&g).unwrap(), s.render(&g).unwrap());
        assert!(SessionExport::from_json(&text).unwrap().restore(|_| None).is_err());
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let metrics: [&dyn DistanceMetric; 2] = [&PixelL2, &MeanSquaredError];
        for _ in 0..50 {
            let a = Array3::from_shape_simple_fn((3, 16, 16), || StandardNormal.sample(&mut rng));
            let b = Array3::from_shape_simple_fn((3, 16, 16), || StandardNormal.sample(&mut rng));
            for m in metrics {
                assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
                let d = m.distance(&a, &b).unwrap();
                assert!(d >= 0.0);
                assert_eq!(d, m.distance(&b, &a).unwrap());
            }
        }
    }

    #[test]
    fn zero_target_calibrates_to_zero() {
        let g = PlantedGenerator::seeded(1);
        let u = axis(0..4, "left", &g);
        let s = session(&g, 1);
        let r = calibrate_alpha(&s, &u, 0.0, &PixelL2, &g, &CalibrationOptions::default()).unwrap();
        assert_eq!(r, (0.0, 0.0));
        assert!(calibrate_alpha(&s, &u, -1.0, &PixelL2, &g, &CalibrationOptions::default()).is_err());
    }

    #[test]
    fn linear_generator_calibrates_to_closed_form() {
        // For an affine generator, PixelL2(x, x + alpha * A u) = |alpha| * PixelL2(A u, 0).
        let g = PlantedGenerator::linearized(2);
        let u = axis(1..6, "mixed", &g);
        let s = session(&g, 7);
        let zero = LatentCode::zeros(g.space().clone());
        let moved = apply_edit(&zero, &EditOp::new(u.clone(), 1.0)).unwrap();
        let k = PixelL2.distance(g.forward(&zero).unwrap().image(), g.forward(&moved).unwrap().image()).unwrap();
        for target in [0.05, 0.4, 3.0] {
            let (neg, pos) = calibrate_alpha(&s, &u, target, &PixelL2, &g, &CalibrationOptions::default()).unwrap();
            let expected = target / k;
            assert!((pos - expected).abs() <= 1e-3 * expected, "{pos} vs {expected}");
            assert!((neg + expected).abs() <= 1e-3 * expected, "{neg} vs {expected}");
        }
    }

    #[test]
    fn nonlinear_calibration_is_self_consistent() {
        let g = PlantedGenerator::seeded(3);
        let u = axis(0..4, "left", &g);
        let s = session(&g, 2);
        let base = s.render(&g).unwrap();
        let at = |alpha: f64| {
            let moved = apply_edit(s.base_code(), &EditOp::new(u.clone(), alpha)).unwrap();
            PixelL2.distance(&base, g.forward(&moved).unwrap().image()).unwrap()
        };
        let target = 0.5 * at(4.0);
        let (neg, pos) = calibrate_alpha(&s, &u, target, &PixelL2, &g, &CalibrationOptions::default()).unwrap();
        assert!(pos > 0.0 && neg < 0.0);
        assert!((at(pos) - target).abs() <= 1e-3 * target);
        assert!((at(neg) - target).abs() <= 1e-3 * target);
    }

    #[test]
    fn saturating_generator_reports_out_of_range() {
        let g = PlantedGenerator::seeded(3);
        let u = axis(0..4, "left", &g);
        let s = session(&g, 2);
        let err = calibrate_alpha(&s, &u, 50.0, &PixelL2, &g, &CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, LelsdError::CalibrationOutOfRange(_)), "{err}");
    }

    /// Distance that rises then falls with |alpha|.
    struct Bump;

    impl DistanceMetric for Bump {
        fn name(&self) -> &str {
            "bump"
        }

        fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
            let d = PixelL2.distance(a, b)?;
            Ok(d * (-d).exp())
        }
    }

    #[test]
    fn falling_distance_is_flagged() {
        let g = PlantedGenerator::linearized(2);
        let u = axis(0..8, "all", &g);
        let s = session(&g, 1);
        let err = calibrate_alpha(&s, &u, 10.0, &Bump, &g, &CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, LelsdError::NonMonotoneDistance(_)), "{err}");
    }

    #[test]
    fn least_squares_inversion_recovers_codes() {
        let g = PlantedGenerator::linearized(4);
        let inv = LeastSquaresInverter::for_planted(&g).unwrap();
        let zero = LatentCode::zeros(g.space().clone());
        let at_origin = inv.invert(g.forward(&zero).unwrap().image()).unwrap();
        assert!(at_origin.values().iter().all(|v| v.abs() < 1e-6));
        for code in sample_latents(g.space(), 10, 8) {
            let image = g.forward(&code).unwrap().into_image();
            let recovered = inv.invert(&image).unwrap();
            for (a, b) in recovered.values().iter().zip(code.values()) {
                assert!((a - b).abs() < 1e-6);
            }
            let rerendered = g.forward(&recovered).unwrap().into_image();
            assert!((&rerendered - &image).mapv(f64::abs).mean().unwrap() < 1e-5);
        }
        assert!(matches!(
            LeastSquaresInverter::for_planted(&PlantedGenerator::seeded(4)),
            Err(LelsdError::UnsupportedCapability(_))
        ));
        assert!(inv.invert(&Array3::zeros((3, 8, 8))).is_err());
    }
}
