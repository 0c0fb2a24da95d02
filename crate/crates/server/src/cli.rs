use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use lelsd_core::bank::{load_bank, save_bank, DirectionBank};
use lelsd_core::edit::{calibrate_alpha, metric_by_name, EditSession};
use lelsd_core::latent::{EditOp, LayerRange, SpaceKind};
use lelsd_core::objective::{CorrelationKind, ObjectiveConfig};
use lelsd_core::segmentation::AggregationMode;
use lelsd_core::trainer::{held_out_score, sample_latents, train_directions, TrainingConfig};
use lelsd_core::{LelsdError, Result};
use serde_json::json;

use crate::backend::{BackendSpec, Backends};
use crate::render::encode_png;
use crate::service::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "lelsd", version, about = "Localized latent-direction discovery and editing")]
pub struct Cli {
    /// Generator backend: `planted[:SEED]` or `planted-linear[:SEED]`.
    #[arg(long, global = true, default_value = "planted:1")]
    pub backend: BackendSpec,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train directions for one part and write them to a bank.
    Train(TrainArgs),
    /// Render a sampled code with a stack of edits applied.
    Edit(EditArgs),
    /// Find the strengths that move an image a target distance along a direction.
    Calibrate(CalibrateArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
    /// List the part vocabulary of the segmenter.
    Parts,
    /// Recompute localization scores of a bank on fresh samples.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "z")]
    pub space: SpaceKind,
    #[arg(long, default_value = "left")]
    pub part: String,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub reg_c: f64,
    #[arg(long, default_value_t = 800)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub halve_every: usize,
    #[arg(long, default_value_t = 3.0)]
    pub alpha_train: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers the directions may touch, `LO:HI` inclusive. Defaults to all.
    #[arg(long)]
    pub layers: Option<LayerRange>,
    #[arg(long, default_value = "average")]
    pub aggregation: AggregationMode,
    #[arg(long, default_value = "cosine")]
    pub correlation: CorrelationKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Seed of the sampled base code.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Edit to push, `NAME:ALPHA`; repeat to stack edits in order.
    #[arg(long = "apply", value_parser = parse_apply)]
    pub apply: Vec<(String, f64)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub direction: String,
    #[arg(long)]
    pub distance: f64,
    #[arg(long, default_value = "pixel-l2")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LELSD_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Bank to expose; repeatable.
    #[arg(long)]
    pub bank: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 4242)]
    pub seed: u64,
    /// Edit strength; defaults to each entry's training strength.
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn parse_apply(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, alpha) = s.rsplit_once(':').ok_or_else(|| format!("expected NAME:ALPHA, got `{s}`"))?;
    let alpha: f64 = alpha.parse().map_err(|_| format!("alpha `{alpha}` is not a number"))?;
    if name.is_empty() || !alpha.is_finite() {
        return Err(format!("expected NAME:ALPHA with a finite alpha, got `{s}`"));
    }
    Ok((name.to_string(), alpha))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let backends = cli.backend.build();
    match cli.command {
        Command::Train(args) => train(&backends, args),
        Command::Edit(args) => edit(&backends, args),
        Command::Calibrate(args) => calibrate(&backends, args),
        Command::Serve(args) => serve_cmd(backends, args),
        Command::Parts => {
            for part in backends.segmenter.vocabulary() {
                println!("{}\t{}", part.id, part.name);
            }
            Ok(())
        }
        Command::Eval(args) => eval(&backends, args),
    }
}

fn load_matching_bank(backends: &Backends, path: &Path) -> Result<DirectionBank> {
    let bank = load_bank(path)?;
    bank.ensure_fingerprint(&backends.generator.fingerprint())?;
    backends.generator.space().ensure_same(&bank.space)?;
    Ok(bank)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn train(backends: &Backends, args: TrainArgs) -> Result<()> {
    let space = backends.generator.space().clone();
    if args.space != space.kind() {
        return Err(LelsdError::SpaceMismatch(format!("backend exposes space {}, not {}", space.kind(), args.space)));
    }
    let part = backends.segmenter.part(&args.part)?;
    let mut cfg = TrainingConfig::new(space, part);
    cfg.k = args.k;
    cfg.reg_c = args.reg_c;
    cfg.num_samples = args.samples;
    cfg.batch_size = args.batch;
    cfg.lr0 = args.lr;
    cfg.halve_every = args.halve_every;
    cfg.alpha_train = args.alpha_train;
    cfg.seed = args.seed;
    if let Some(range) = args.layers {
        cfg.layer_range = range;
    }
    cfg.objective = ObjectiveConfig { correlation: args.correlation, ..ObjectiveConfig::default() }
        .with_aggregation(args.aggregation);
    let (directions, report) = train_directions(backends.generator.as_ref(), backends.segmenter.as_ref(), &cfg)?;
    let bank = DirectionBank::from_training(backends.generator.fingerprint(), &directions, &cfg, &report)?;
    save_bank(&bank, &args.out)?;
    print_json(&report);
    Ok(())
}

fn edit(backends: &Backends, args: EditArgs) -> Result<()> {
    let bank = match &args.bank {
        Some(path) => Some(load_matching_bank(backends, path)?),
        None => None,
    };
    let code = sample_latents(backends.generator.space(), 1, args.seed).remove(0);
    let mut session = EditSession::new("cli", code, backends.generator.fingerprint());
    for (name, alpha) in &args.apply {
        let bank = bank.as_ref().ok_or_else(|| LelsdError::InvalidInput(format!("--apply {name} needs --bank")))?;
        session.push_edit(EditOp::new(Arc::new(bank.direction(name)?), *alpha))?;
    }
    let image = session.render(backends.generator.as_ref())?;
    std::fs::write(&args.out, encode_png(&image))?;
    Ok(())
}

fn calibrate(backends: &Backends, args: CalibrateArgs) -> Result<()> {
    let bank = load_matching_bank(backends, &args.bank)?;
    let direction = Arc::new(bank.direction(&args.direction)?);
    let metric = metric_by_name(&args.metric)?;
    let code = sample_latents(backends.generator.space(), 1, args.seed).remove(0);
    let session = EditSession::new("cli", code, backends.generator.fingerprint());
    let (alpha_neg, alpha_pos) = calibrate_alpha(
        &session,
        &direction,
        args.distance,
        metric.as_ref(),
        backends.generator.as_ref(),
        &Default::default(),
    )?;
    print_json(&json!({ "alpha_neg": alpha_neg, "alpha_pos": alpha_pos, "metric": metric.name() }));
    Ok(())
}

fn serve_cmd(backends: Backends, args: ServeArgs) -> Result<()> {
    let banks = args.bank.iter().map(|p| load_bank(p)).collect::<Result<Vec<_>>>()?;
    let state = Arc::new(AppState::new(backends, &banks)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(state, SocketAddr::new(args.host, args.port)))?;
    Ok(())
}

fn eval(backends: &Backends, args: EvalArgs) -> Result<()> {
    if args.samples == 0 {
        return Err(LelsdError::InvalidInput("--samples must be positive".into()));
    }
    let bank = load_matching_bank(backends, &args.bank)?;
    let codes = sample_latents(backends.generator.space(), args.samples, args.seed);
    let mut results = Vec::new();
    for entry in bank.entries() {
        let snapshot: Option<TrainingConfig> = serde_json::from_value(entry.training_config.clone()).ok();
        let alpha = args.alpha.or(snapshot.as_ref().map(|c| c.alpha_train)).unwrap_or(3.0);
        let objective = snapshot.map(|c| c.objective).unwrap_or_default();
        let direction = bank.direction(&entry.name)?;
        let score = held_out_score(
            backends.generator.as_ref(),
            backends.segmenter.as_ref(),
            &codes,
            &direction,
            alpha,
            &objective,
        )?;
        results.push(json!({
            "name": entry.name,
            "part": entry.part,
            "alpha": alpha,
            "per_layer": score.per_layer,
            "min_layer": score.per_layer.iter().copied().fold(f64::INFINITY, f64::min),
            "total": score.total,
        }));
    }
    print_json(&json!({ "samples": args.samples, "seed": args.seed, "entries": results }));
    Ok(())
}
