//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use lelsd::backend::BackendSpec;
use lelsd::service::{router, AppState};
use lelsd_core::bank::{load_bank, save_bank, BankEntry, DirectionBank};
use lelsd_core::edit::{calibrate_alpha, CalibrationOptions, DistanceMetric, EditSession, PixelL2};
use lelsd_core::generator::{GeneratorBackend, PlantedGenerator};
use lelsd_core::latent::{apply_edit, EditOp, LatentCode, LatentDirection, LatentSpace, LayerRange, SpaceKind};
use lelsd_core::objective::{
    localization_score_layer, objective_with_gradient, regularizer_values, CorrelationKind, ObjectiveConfig,
    RawDirection,
};
use lelsd_core::segmentation::{AggregationMode, HalfPlaneSegmenter, PartLabel, SegmenterBackend};
use lelsd_core::trainer::{held_out_score, lr_schedule, sample_latents, train_directions, TrainingConfig};
use lelsd_core::LelsdError;
use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn planted() -> (PlantedGenerator, HalfPlaneSegmenter) {
    (PlantedGenerator::seeded(1), HalfPlaneSegmenter::new(16, 16))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

/// Trains one "left" direction with the default recipe and checks it against
/// the planted construction on 64 fresh codes.
fn recovery(mode: AggregationMode) -> Outcome {
    let (g, s) = planted();
    let mut cfg = TrainingConfig::new(g.space().clone(), s.part("left").map_err(|e| e.to_string())?);
    cfg.objective = cfg.objective.with_aggregation(mode);
    let start = Instant::now();
    let (dirs, report) = train_directions(&g, &s, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let u = dirs[0].values();
    let mass: f64 = u[..4].iter().map(|v| v * v).sum();
    let fresh = sample_latents(g.space(), 64, 0x5eed_0064);
    let score = held_out_score(&g, &s, &fresh, &dirs[0], cfg.alpha_train, &cfg.objective).map_err(|e| e.to_string())?;
    let worst = score.per_layer.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(mass >= 0.9, "left squared mass {mass:.6} < 0.9");
    ensure!(worst >= 0.95, "held-out per-layer LS {:?} below 0.95", score.per_layer);
    ensure!(elapsed < Duration::from_secs(120), "training took {elapsed:?}");
    Ok(format!(
        "mass {mass:.6}, per-layer LS {:?}, {} steps in {:.2}s",
        score.per_layer.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>(),
        report.steps,
        elapsed.as_secs_f64()
    ))
}

fn disentanglement() -> Outcome {
    let (g, s) = planted();
    let part = s.part("left").map_err(|e| e.to_string())?;
    let run = |c: f64| -> Result<f64, String> {
        let mut cfg = TrainingConfig::new(g.space().clone(), part.clone());
        cfg.k = 2;
        cfg.reg_c = c;
        let (dirs, _) = train_directions(&g, &s, &cfg).map_err(|e| e.to_string())?;
        Ok(cosine(dirs[0].values(), dirs[1].values()).abs())
    };
    let with = run(1.0)?;
    let without = run(0.0)?;
    ensure!(with < 0.1, "|cos| {with} >= 0.1 with reg_c = 1");
    ensure!(without > with, "|cos| without regularizer {without} not larger than {with}");
    Ok(format!("|cos| {with:.3e} at reg_c=1, {without:.3e} at reg_c=0"))
}

fn score_oracle() -> Outcome {
    // Channel energies 4, 0, 0, 1 with only the first pixel masked.
    let r = array![[2.0, 0.0], [0.0, 1.0]].insert_axis(ndarray::Axis(0));
    let r_edit = Array3::zeros((1, 2, 2));
    let mask = array![[1.0, 0.0], [0.0, 0.0]];
    let exact = ObjectiveConfig::vanishing_epsilon();
    let hand = localization_score_layer(&r, &r_edit, &mask, &exact).map_err(|e| e.to_string())?;
    ensure!((hand - 0.8).abs() <= 1e-9, "hand example gave {hand}");

    let big = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c * 7 + i * 3 + j) as f64 * 0.1);
    let moved = big.mapv(|v| v * 0.5 - 0.2);
    let cfg = ObjectiveConfig::default();
    let ones = localization_score_layer(&big, &moved, &Array2::ones((4, 4)), &cfg).map_err(|e| e.to_string())?;
    let zeros = localization_score_layer(&big, &moved, &Array2::zeros((4, 4)), &cfg).map_err(|e| e.to_string())?;
    ensure!(ones <= 1.0 && 1.0 - ones <= 1e-6, "all-ones mask gave {ones}");
    ensure!(zeros == 0.0, "all-zeros mask gave {zeros}");
    Ok(format!("hand {hand}, ones {ones}, zeros {zeros}"))
}

fn regularizer_oracle() -> Outcome {
    let u = [0.6, 0.8, 0.0];
    let v = [0.0, 0.0, 1.0];
    let r = |vs: &[&[f64]]| regularizer_values(vs, CorrelationKind::Cosine).map_err(|e| e.to_string());
    let same = r(&[&u, &u])?;
    let orth = r(&[&u, &v])?;
    let single = r(&[&u])?;
    ensure!((same + 2f64.sqrt() / 2.0).abs() <= 1e-9, "R(u,u) = {same}");
    ensure!(orth == 0.0, "R(orthogonal) = {orth}");
    ensure!(single == 0.0, "R(single) = {single}");
    Ok(format!("R(u,u) {same}, R(u,v) {orth}, R(u) {single}"))
}

fn gradient_check() -> Outcome {
    let (g, s) = planted();
    let part = s.part("left").map_err(|e| e.to_string())?;
    let range = g.space().full_range();
    let cfg = ObjectiveConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for point in 0..10u64 {
        let codes = sample_latents(g.space(), 3, 1000 + point);
        let dirs: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let alphas = [2.0, -1.5];
        let objective = |d: &[Vec<f64>], want: bool| {
            let raw: Vec<RawDirection<'_>> = d.iter().map(|v| RawDirection { values: v, layer_range: range }).collect();
            objective_with_gradient(&g, &s, &codes, &raw, &alphas, &part, 1.0, &cfg, want).map_err(|e| e.to_string())
        };
        let grads = objective(&dirs, true)?.1.ok_or("no gradient returned")?;
        for (k, analytic) in grads.iter().enumerate() {
            let mut err = 0.0;
            let mut norm = 0.0;
            for i in 0..8 {
                let mut plus = dirs.clone();
                let mut minus = dirs.clone();
                plus[k][i] += h;
                minus[k][i] -= h;
                let numeric =
                    (objective(&plus, false)?.0.objective - objective(&minus, false)?.0.objective) / (2.0 * h);
                err += (analytic[i] - numeric).powi(2);
                norm += numeric * numeric;
            }
            worst = worst.max((err / norm).sqrt());
        }
    }
    ensure!(worst < 1e-4, "worst relative error {worst:.3e}");
    Ok(format!("worst relative error {worst:.3e} over 10 points"))
}

fn recipe_constants() -> Outcome {
    let (g, s) = planted();
    let cfg = TrainingConfig::new(g.space().clone(), s.part("left").map_err(|e| e.to_string())?);
    let lrs = [lr_schedule(0, &cfg), lr_schedule(50, &cfg), lr_schedule(125, &cfg)];
    ensure!(lrs == [0.001, 0.0005, 0.00025], "schedule {lrs:?}");
    ensure!(cfg.num_samples == 800 && cfg.batch_size == 4, "samples {} batch {}", cfg.num_samples, cfg.batch_size);
    for k in 1..=3 {
        let cfg = TrainingConfig { k, ..cfg.clone() };
        ensure!(cfg.total_steps() == k * 800 / 4, "k={k}: {} steps", cfg.total_steps());
    }
    Ok(format!("lr {lrs:?}, {} steps for K=1", cfg.total_steps()))
}

fn calibration() -> Outcome {
    let g = PlantedGenerator::linearized(1);
    let mut v = vec![0.0; 8];
    v[..4].copy_from_slice(&[0.3, -0.5, 0.2, 0.7]);
    let u = Arc::new(
        LatentDirection::normalized(g.space().clone(), v, PartLabel::new("left", 0), LayerRange::new(0, 0), "u")
            .map_err(|e| e.to_string())?,
    );
    let zero = LatentCode::zeros(g.space().clone());
    let unit = apply_edit(&zero, &EditOp::new(u.clone(), 1.0)).map_err(|e| e.to_string())?;
    let render = |c: &LatentCode| g.forward(c).map(|f| f.into_image()).map_err(|e| e.to_string());
    // The generator is affine, so the distance grows as |alpha| * k.
    let k = PixelL2.distance(&render(&zero)?, &render(&unit)?).map_err(|e| e.to_string())?;
    let session = EditSession::new("acceptance", sample_latents(g.space(), 1, 31).remove(0), g.fingerprint());
    let opts = CalibrationOptions::default();
    let mut details = Vec::new();
    for target in [0.02, 0.1, 0.5] {
        let (neg, pos) = calibrate_alpha(&session, &u, target, &PixelL2, &g, &opts).map_err(|e| e.to_string())?;
        let expected = target / k;
        ensure!((pos - expected).abs() <= 1e-3 * expected, "d={target}: alpha_pos {pos} vs {expected}");
        ensure!((neg + expected).abs() <= 1e-3 * expected, "d={target}: alpha_neg {neg} vs {}", -expected);
        ensure!((neg + pos).abs() <= 1e-3 * pos, "d={target}: asymmetric {neg} / {pos}");
        details.push(format!("d={target}: {pos:.6} (closed form {expected:.6})"));
    }
    let zero_target = calibrate_alpha(&session, &u, 0.0, &PixelL2, &g, &opts).map_err(|e| e.to_string())?;
    ensure!(zero_target == (0.0, 0.0), "target 0 gave {zero_target:?}");
    Ok(details.join(", "))
}

fn sequential_edits() -> Outcome {
    let (g, _) = planted();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let supported = |range: std::ops::Range<usize>, rng: &mut ChaCha8Rng, name: &str| {
        let mut v = vec![0.0; 8];
        for i in range {
            v[i] = rng.random_range(-1.0..1.0);
        }
        Arc::new(
            LatentDirection::normalized(g.space().clone(), v, PartLabel::new(name, 0), LayerRange::new(0, 0), name)
                .unwrap(),
        )
    };
    let left = supported(0..4, &mut rng, "left");
    let right = supported(4..8, &mut rng, "right");
    let mut checked = 0;
    for seed in 0..8 {
        let base_session = EditSession::new("s", sample_latents(g.space(), 1, seed).remove(0), g.fingerprint());
        let render = |ops: &[(&Arc<LatentDirection>, f64)]| -> Result<Array3<f64>, String> {
            let mut s = base_session.clone();
            for (d, a) in ops {
                s.push_edit(EditOp::new((*d).clone(), *a)).map_err(|e| e.to_string())?;
            }
            s.render(&g).map_err(|e| e.to_string())
        };
        let base = render(&[])?;
        let lr = render(&[(&left, 2.5), (&right, -1.75)])?;
        let rl = render(&[(&right, -1.75), (&left, 2.5)])?;
        let only_left = render(&[(&left, 2.5)])?;
        let only_right = render(&[(&right, -1.75)])?;
        let bits = |a: &Array3<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&lr) == bits(&rl), "seed {seed}: order changes the image");
        for ((c, i, j), v) in lr.indexed_iter() {
            let own = if j < 8 { &only_left } else { &only_right };
            let other = if j < 8 { &only_right } else { &only_left };
            ensure!(v.to_bits() == own[[c, i, j]].to_bits(), "seed {seed}: pixel {c},{i},{j} differs from solo edit");
            ensure!(
                other[[c, i, j]].to_bits() == base[[c, i, j]].to_bits(),
                "seed {seed}: edit leaks into {c},{i},{j}"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} pixels bitwise-checked over 8 codes"))
}

fn random_bank(rng: &mut ChaCha8Rng, i: usize) -> DirectionBank {
    let space = if rng.random_bool(0.5) {
        LatentSpace::flat(SpaceKind::Z, rng.random_range(1..16)).unwrap()
    } else {
        let layers = rng.random_range(1..6);
        LatentSpace::new(SpaceKind::Wplus, (0..layers).map(|_| rng.random_range(1..5)).collect()).unwrap()
    };
    let mut bank = DirectionBank::new(format!("fp-{i}-{:016x}", rng.random::<u64>()), space.clone());
    for e in 0..rng.random_range(0..5) {
        let a = rng.random_range(0..space.num_layers());
        let b = rng.random_range(0..space.num_layers());
        let vector: Vec<f32> = (0..space.total_dim())
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        bank.add_entry(BankEntry {
            name: format!("entry_{e}"),
            part: PartLabel::new(["left", "right", "hair"][e % 3], e as u32),
            layer_range: LayerRange::new(a.min(b), a.max(b)),
            vector,
            training_config: json!({ "seed": i, "k": e }),
            final_score: rng.random_range(0.0..1.0),
        })
        .unwrap();
    }
    bank
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("bank.json");
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for i in 0..200 {
        let bank = random_bank(&mut rng, i);
        save_bank(&bank, &path).map_err(|e| e.to_string())?;
        let back = load_bank(&path).map_err(|e| e.to_string())?;
        ensure!(back == bank, "bank {i} changed on round trip");
        for (a, b) in back.entries().iter().zip(bank.entries()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure!(bits(&a.vector) == bits(&b.vector), "bank {i} entry {} vector bits changed", a.name);
        }
    }

    let mut reference = DirectionBank::new("fp", LatentSpace::flat(SpaceKind::Z, 4).unwrap());
    reference
        .add_entry(BankEntry {
            name: "left_0".into(),
            part: PartLabel::new("left", 0),
            layer_range: LayerRange::new(0, 0),
            vector: vec![1.0, 0.0, 0.0, 0.0],
            training_config: json!({}),
            final_score: 1.0,
        })
        .unwrap();
    let doc: Value = serde_json::from_str(&reference.to_json()).map_err(|e| e.to_string())?;
    let load_edited = |edit: &dyn Fn(&mut Value)| {
        let mut v = doc.clone();
        edit(&mut v);
        std::fs::write(&path, v.to_string()).unwrap();
        load_bank(&path)
    };
    let version = load_edited(&|v| v["format_version"] = json!(99));
    ensure!(matches!(version, Err(LelsdError::UnsupportedVersion(99))), "version 99 gave {version:?}");
    let missing = load_edited(&|v| {
        v.as_object_mut().unwrap().remove("generator_fingerprint");
    });
    ensure!(matches!(missing, Err(LelsdError::MalformedBank(_))), "missing fingerprint gave {missing:?}");
    let short = load_edited(&|v| v["entries"][0]["vector"] = json!(STANDARD.encode([0u8; 12])));
    ensure!(matches!(short, Err(LelsdError::MalformedBank(_))), "short vector gave {short:?}");
    Ok("200 random banks bit-exact; version 99, missing fingerprint and short vector rejected".into())
}

async fn call(app: &Router, method: Method, uri: &str, body: Value) -> Result<Value, String> {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .map_err(|e| e.to_string())?;
    let resp = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    ensure!(status == StatusCode::OK, "{uri}: {status} {v}");
    Ok(v)
}

fn png_bytes(v: &Value) -> Result<Vec<u8>, String> {
    let text = v["image"].as_str().ok_or("response has no image")?;
    STANDARD.decode(text).map_err(|e| e.to_string())
}

fn service_determinism() -> Outcome {
    let backends = BackendSpec::default().build();
    let mut cfg = TrainingConfig::new(backends.generator.space().clone(), PartLabel::new("left", 0));
    cfg.num_samples = 40;
    let (dirs, report) =
        train_directions(backends.generator.as_ref(), backends.segmenter.as_ref(), &cfg).map_err(|e| e.to_string())?;
    let bank = DirectionBank::from_training(backends.generator.fingerprint(), &dirs, &cfg, &report)
        .map_err(|e| e.to_string())?;
    let app = router(Arc::new(AppState::new(backends, &[bank]).map_err(|e| e.to_string())?));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let a = call(&app, Method::POST, "/sessions", json!({ "seed": 7 })).await?;
        let b = call(&app, Method::POST, "/sessions", json!({ "seed": 7 })).await?;
        let base = png_bytes(&a)?;
        ensure!(base == png_bytes(&b)?, "seed 7 rendered two different PNGs");
        let id = a["session_id"].as_str().ok_or("no session id")?;
        let edits = format!("/sessions/{id}/edits");
        let zero = call(&app, Method::POST, &edits, json!({ "direction": "left_0", "alpha": 0.0 })).await?;
        ensure!(png_bytes(&zero)? == base, "alpha 0 edit changed the image");
        call(&app, Method::POST, &edits, json!({ "direction": "left_0", "alpha": 2.0 })).await?;
        call(&app, Method::POST, &edits, json!({ "direction": "left_0", "alpha": -2.0 })).await?;
        let undone = call(&app, Method::GET, &format!("/sessions/{id}/image"), json!(null)).await?;
        ensure!(png_bytes(&undone)? == base, "+2 then -2 did not return the base image");
        Ok(format!("{}-byte PNG identical across sessions and after alpha 0", base.len()))
    })
}

fn timing_report() -> Outcome {
    let (g, s) = planted();
    let mut cfg = TrainingConfig::new(g.space().clone(), s.part("right").map_err(|e| e.to_string())?);
    cfg.k = 2;
    let (_, report) = train_directions(&g, &s, &cfg).map_err(|e| e.to_string())?;
    ensure!(report.steps == 400, "steps {} != 400", report.steps);
    ensure!(report.objective_trace.len() == 400, "trace length {}", report.objective_trace.len());
    ensure!(report.samples_consumed == 2 * 800, "samples consumed {}", report.samples_consumed);
    ensure!(
        report.wall_time_seconds.is_finite() && report.wall_time_seconds > 0.0,
        "wall time {}",
        report.wall_time_seconds
    );
    Ok(format!("{} steps, {:.3}s wall time", report.steps, report.wall_time_seconds))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("planted-direction recovery", Box::new(|| recovery(AggregationMode::Average))),
        ("disentanglement", Box::new(disentanglement)),
        ("localization score unit oracle", Box::new(score_oracle)),
        ("regularizer oracle", Box::new(regularizer_oracle)),
        ("gradient correctness", Box::new(gradient_check)),
        ("recipe constants", Box::new(recipe_constants)),
        ("calibration", Box::new(calibration)),
        ("sequential-edit coherence", Box::new(sequential_edits)),
        (
            "mask-aggregation robustness",
            Box::new(|| {
                let mut lines = Vec::new();
                for mode in [AggregationMode::Average, AggregationMode::Union, AggregationMode::Intersection] {
                    lines.push(format!("{mode:?}: {}", recovery(mode).map_err(|e| format!("{mode:?}: {e}"))?));
                }
                Ok(lines.join("; "))
            }),
        ),
        ("persistence", Box::new(persistence)),
        ("service determinism", Box::new(service_determinism)),
        ("timing log", Box::new(timing_report)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
