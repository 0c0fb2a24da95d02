//! Stochastic maximization of the localization objective over direction
//! parameters.
//!
//! Each step draws a fresh batch of latent codes, picks the edit sign at
//! random, and takes one Adam ascent step on a single direction; with `K`
//! directions the active one cycles round-robin and the others are frozen
//! inside the regularizer. The learning rate halves every `halve_every`
//! steps.
//!
//! Directions are parameterized as `u = v / |v|`: the score is always
//! evaluated on the unit direction, while Adam moves the free vector `v`.
//! `v` starts at length `lr0`, so the per-coordinate Adam step (about `lr`)
//! turns the direction appreciably even in low-dimensional spaces, and the
//! growth of `|v|` anneals the angular step size as training proceeds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};
use crate::generator::GeneratorBackend;
use crate::latent::{l2_norm, LatentCode, LatentDirection, LatentSpace, LayerRange};
use crate::objective::{
    batch_score, regularizer_gradient, regularizer_values, ObjectiveConfig, RawDirection, ScoreBreakdown,
};
use crate::segmentation::{PartLabel, SegmenterBackend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { first_moment: vec![0.0; len], second_moment: vec![0.0; len], steps: 0 }
    }
}

/// One bias-corrected Adam step that *ascends* along `gradient`.
pub fn optimizer_step(
    params: &mut [f64],
    gradient: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != gradient.len() || params.len() != state.first_moment.len() {
        return Err(LelsdError::ShapeMismatch(format!(
            "{} params, {} gradient entries, {} moments",
            params.len(),
            gradient.len(),
            state.first_moment.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(LelsdError::TrainingDiverged("non-finite gradient".into()));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(gradient).zip(&mut state.first_moment).zip(&mut state.second_moment) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p += lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub num_samples: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub k: usize,
    pub reg_c: f64,
    pub seed: u64,
    pub alpha_train: f64,
    pub space: LatentSpace,
    pub part: PartLabel,
    pub layer_range: LayerRange,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Held-out codes used for the report's final scores.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    16
}

impl TrainingConfig {
    pub fn new(space: LatentSpace, part: PartLabel) -> Self {
        let layer_range = space.full_range();
        TrainingConfig {
            num_samples: 800,
            batch_size: 4,
            lr0: 0.001,
            halve_every: 50,
            k: 1,
            reg_c: 1.0,
            seed: 0,
            alpha_train: 3.0,
            space,
            part,
            layer_range,
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            eval_samples: default_eval_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LelsdError::InvalidInput(msg));
        if self.batch_size == 0 || self.num_samples == 0 || !self.num_samples.is_multiple_of(self.batch_size) {
            return bad(format!(
                "num_samples {} must be a positive multiple of batch_size {}",
                self.num_samples, self.batch_size
            ));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.halve_every == 0 {
            return bad("halve_every must be positive".into());
        }
        if !(self.reg_c >= 0.0 && self.reg_c.is_finite()) {
            return bad(format!("reg_c {} must be nonnegative", self.reg_c));
        }
        if !(self.alpha_train > 0.0 && self.alpha_train.is_finite()) {
            return bad(format!("alpha_train {} must be positive", self.alpha_train));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        self.layer_range.validate(&self.space)?;
        self.objective.validate()
    }

    /// Optimizer steps of a full run: the sample budget grows linearly with `k`.
    pub fn total_steps(&self) -> usize {
        self.k * self.num_samples / self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub objective_trace: Vec<f64>,
    /// Held-out total localization score per direction.
    pub final_scores: Vec<f64>,
    /// Held-out per-layer localization score per direction.
    pub final_layer_scores: Vec<Vec<f64>>,
    pub final_regularizer: f64,
    pub wall_time_seconds: f64,
    pub steps: usize,
    pub samples_consumed: usize,
    pub adam: AdamConfig,
}

pub fn lr_schedule(step: usize, cfg: &TrainingConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((step / cfg.halve_every) as i32)
}

/// `n` codes with i.i.d. standard normal entries, reproducible from `seed`.
pub fn sample_latents(space: &LatentSpace, n: usize, seed: u64) -> Vec<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_codes(space, n, &mut rng)
}

fn draw_codes(space: &LatentSpace, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode> {
    (0..n)
        .map(|_| {
            let values = (0..space.total_dim()).map(|_| StandardNormal.sample(&mut *rng)).collect();
            LatentCode::new(space.clone(), values).expect("finite normal draws")
        })
        .collect()
}

// Independent random streams of one run.
const STREAM_INIT: u64 = 0;
const STREAM_CODES: u64 = 1;
const STREAM_SIGNS: u64 = 2;
const STREAM_EVAL: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Mean score of a direction over `codes` at `+alpha` and `-alpha`.
pub fn held_out_score(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    codes: &[LatentCode],
    direction: &LatentDirection,
    alpha: f64,
    cfg: &ObjectiveConfig,
) -> Result<ScoreBreakdown> {
    let raw = RawDirection::from(direction);
    let part = direction.part();
    let (pos, _) = batch_score(backend, segmenter, codes, raw, alpha, part, cfg, false)?;
    let (neg, _) = batch_score(backend, segmenter, codes, raw, -alpha, part, cfg, false)?;
    let per_layer: Vec<f64> = pos.per_layer.iter().zip(&neg.per_layer).map(|(a, b)| 0.5 * (a + b)).collect();
    let total = 0.5 * (pos.total + neg.total);
    Ok(ScoreBreakdown { per_layer, total, regularizer: 0.0, objective: total })
}

pub fn train_directions(
    backend: &dyn GeneratorBackend,
    segmenter: &dyn SegmenterBackend,
    cfg: &TrainingConfig,
) -> Result<(Vec<LatentDirection>, TrainingReport)> {
    cfg.validate()?;
    if !backend.is_differentiable() {
        return Err(LelsdError::UnsupportedCapability("training needs a differentiable backend".into()));
    }
    backend.space().ensure_same(&cfg.space)?;
    segmenter.ensure_known(&cfg.part)?;

    let started = Instant::now();
    let dim = cfg.space.total_dim();
    let span = cfg.space.span(cfg.layer_range);

    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut params: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| {
            let mut v: Vec<f64> =
                (0..dim).map(|i| if span.contains(&i) { StandardNormal.sample(&mut init_rng) } else { 0.0 }).collect();
            let norm = l2_norm(&v);
            v.iter_mut().for_each(|x| *x *= cfg.lr0 / norm);
            v
        })
        .collect();
    let mut states: Vec<AdamState> = (0..cfg.k).map(|_| AdamState::new(dim)).collect();
    let mut code_rng = stream(cfg.seed, STREAM_CODES);
    let mut sign_rng = stream(cfg.seed, STREAM_SIGNS);

    let steps = cfg.total_steps();
    let mut trace = Vec::with_capacity(steps);
    let mut samples_consumed = 0;
    for step in 0..steps {
        let active = step % cfg.k;
        let codes = draw_codes(&cfg.space, cfg.batch_size, &mut code_rng);
        samples_consumed += codes.len();
        let alpha = if sign_rng.random::<bool>() { cfg.alpha_train } else { -cfg.alpha_train };

        let units: Vec<Vec<f64>> = params.iter().map(|v| unit(v)).collect();
        let raw = RawDirection { values: &units[active], layer_range: cfg.layer_range };
        let (score, grad) = batch_score(backend, segmenter, &codes, raw, alpha, &cfg.part, &cfg.objective, true)?;
        let mut grad = grad.expect("gradient requested");

        let refs: Vec<&[f64]> = units.iter().map(|u| u.as_slice()).collect();
        let reg = regularizer_values(&refs, cfg.objective.correlation)?;
        if cfg.k > 1 && cfg.reg_c != 0.0 {
            let reg_grad = regularizer_gradient(&refs, active, cfg.objective.correlation)?;
            grad.iter_mut().zip(reg_grad).for_each(|(g, r)| *g += cfg.reg_c * r);
        }
        let objective = score.total + cfg.reg_c * reg;
        if !objective.is_finite() {
            return Err(LelsdError::TrainingDiverged(format!("objective {objective} at step {step}")));
        }
        trace.push(objective);

        // Pull the gradient back through u = v / |v|.
        let u = &units[active];
        let norm = l2_norm(&params[active]);
        let radial: f64 = u.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let grad_v: Vec<f64> = grad.iter().zip(u).map(|(g, a)| (g - radial * a) / norm).collect();
        optimizer_step(&mut params[active], &grad_v, &mut states[active], lr_schedule(step, cfg), &cfg.adam)?;
        if params[active].iter().any(|p| !p.is_finite()) || l2_norm(&params[active]) == 0.0 {
            return Err(LelsdError::TrainingDiverged(format!("degenerate direction at step {step}")));
        }
    }

    let directions: Vec<LatentDirection> = params
        .iter()
        .enumerate()
        .map(|(k, v)| {
            LatentDirection::normalized(
                cfg.space.clone(),
                v.clone(),
                cfg.part.clone(),
                cfg.layer_range,
                format!("{}_{k}", cfg.part.name),
            )
        })
        .collect::<Result<_>>()?;

    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);
    let eval_codes = draw_codes(&cfg.space, cfg.eval_samples, &mut eval_rng);
    let mut final_scores = Vec::with_capacity(cfg.k);
    let mut final_layer_scores = Vec::with_capacity(cfg.k);
    for d in &directions {
        let s = held_out_score(backend, segmenter, &eval_codes, d, cfg.alpha_train, &cfg.objective)?;
        final_scores.push(s.total);
        final_layer_scores.push(s.per_layer);
    }
    let refs: Vec<&[f64]> = directions.iter().map(|d| d.values()).collect();
    let final_regularizer = regularizer_values(&refs, cfg.objective.correlation)?;

    let report = TrainingReport {
        objective_trace: trace,
        final_scores,
        final_layer_scores,
        final_regularizer,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        steps,
        samples_consumed,
        adam: cfg.adam,
    };
    Ok((directions, report))
}
