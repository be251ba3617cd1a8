//! Command-line entry point: ingestion, scenario generation, training,
//! prediction, planning, closed-loop simulation, and reporting.
//!
//! Every command writes into a fresh output directory containing exactly
//! one `manifest.json` (command, config digest, input digests, version,
//! timings). All randomness is seeded through the config or flags, so a
//! rerun with the same manifest inputs reproduces the metric CSVs byte for
//! byte, independent of the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;
use crate::metrics::{aggregate_records, force_mean, jerk_mean, relative_improvement, StepRecord};
use crate::potential::{u_env, Obstacle};
use crate::predictor::{PovlPredictor, Predictor, PredictorKind};
use crate::scene::{
    extract_merging_scenarios, ingest_tracks, write_tracks_csv, MapModel, Scenario, TARGET_FPS,
};
use crate::sim::{simulate_scenario, SimOptions, SimResult};
use crate::synthetic::{generate_synthetic, Density};
use crate::training::{evaluate, make_samples, train, SampleSet};
use crate::transformer::Checkpoint;

#[derive(Parser)]
#[command(
    name = "povl",
    version,
    about = "Variable-length-observation trajectory prediction and potential-field MPC for highway merging"
)]
pub struct Cli {
    /// Path to a TOML config; missing keys use the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    Cv,
    Povl,
    Gt,
}

impl From<PredictorArg> for PredictorKind {
    fn from(value: PredictorArg) -> Self {
        match value {
            PredictorArg::Cv => PredictorKind::Cv,
            PredictorArg::Povl => PredictorKind::Povl,
            PredictorArg::Gt => PredictorKind::Gt,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and downsample a raw tracks CSV to the canonical 5 fps form.
    Ingest(IngestArgs),
    /// Generate deterministic synthetic merging scenarios.
    Generate(GenerateArgs),
    /// Train the prediction model on scenario tracks.
    Train(TrainArgs),
    /// Emit trajectory predictions for every eligible anchor of a tracks file.
    Predict(PredictArgs),
    /// Plan one scenario closed-loop and dump the applied signals.
    Plan(PlanArgs),
    /// Run scenarios closed-loop and collect planning metrics.
    Simulate(SimulateArgs),
    /// Produce the evaluation tables (prediction RMSE, bucketed planning
    /// comparison, potential-field slices).
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Input frame rate; must be a multiple of 5.
    #[arg(long, default_value_t = 25)]
    fps_in: u32,
    /// Also cut merging scenarios out of the recording.
    #[arg(long)]
    extract_scenarios: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Override the configured traffic density.
    #[arg(long, value_enum)]
    density: Option<DensityArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DensityArg {
    Sparse,
    Medium,
    Dense,
}

impl From<DensityArg> for Density {
    fn from(value: DensityArg) -> Self {
        match value {
            DensityArg::Sparse => Density::Sparse,
            DensityArg::Medium => Density::Medium,
            DensityArg::Dense => Density::Dense,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scenario directories (or a single scenario directory).
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Canonical 5 fps tracks CSV.
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Observation length in steps.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=15))]
    t_obs: u32,
    /// Anchor stride in frames.
    #[arg(long, default_value_t = 5)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Scenario directory (scenario.json, map.json, tracks.csv).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    predictor: PredictorArg,
    /// Checkpoint, required for the learned predictor.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory of scenario directories.
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, value_enum)]
    predictor: PredictorArg,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Worker threads; defaults to the rayon global default.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Simulation run directories to compare in one bucketed table.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Checkpoint for the prediction-accuracy tables.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Held-out scenario directory for the prediction-accuracy tables.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Emit a sampled grid of the environment potential.
    #[arg(long)]
    field_slice: bool,
    /// Map for the field slice.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Obstacle positions "x,y" for the field slice.
    #[arg(long)]
    obstacle: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses and runs a full command line; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let (config, config_text) = match &cli.config {
        Some(path) => {
            let cfg = AppConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            let text = cfg.to_toml()?;
            (cfg, text)
        }
        None => {
            let cfg = AppConfig::default();
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    let config_sha = hex_digest(config_text.as_bytes());

    match cli.command {
        Command::Ingest(args) => cmd_ingest(args, &config, &config_sha, started),
        Command::Generate(args) => cmd_generate(args, &config, &config_sha, started),
        Command::Train(args) => cmd_train(args, &config, &config_sha, started),
        Command::Predict(args) => cmd_predict(args, &config, &config_sha, started),
        Command::Plan(args) => cmd_plan(args, &config, &config_sha, started),
        Command::Simulate(args) => cmd_simulate(args, &config, &config_sha, started),
        Command::Report(args) => cmd_report(args, &config, &config_sha, started),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written once into every output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub params: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    pub wall_seconds: f64,
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<InputDigest> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex_digest(&bytes),
    })
}

/// Creates the output directory; refuses to write into a non-empty one.
fn fresh_out_dir(path: &Path) -> Result<()> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty {
            bail!("output directory {} is not empty", path.display());
        }
    } else {
        std::fs::create_dir_all(path)?;
    }
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_sha: &str,
    params: BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config_sha.to_string(),
        params,
        inputs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn cmd_ingest(args: IngestArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let inputs = vec![file_digest(&args.tracks)?, file_digest(&args.map)?];

    let file = std::fs::File::open(&args.tracks)?;
    let tracks = ingest_tracks(file, args.fps_in)?;
    let map = Arc::new(MapModel::load(&args.map)?);

    let mut out = std::fs::File::create(args.out.join("tracks.csv"))?;
    write_tracks_csv(&mut out, &tracks)?;
    map.save(&args.out.join("map.json"))?;

    let mut params = BTreeMap::new();
    params.insert("fps_in".into(), args.fps_in.to_string());
    params.insert("tracks".into(), tracks.len().to_string());

    if args.extract_scenarios {
        let scenarios = extract_merging_scenarios(&tracks, &map, &config.extract);
        for scenario in &scenarios {
            scenario.save_dir(&args.out.join(&scenario.name))?;
        }
        params.insert("scenarios".into(), scenarios.len().to_string());
        println!("extracted {} merging scenarios", scenarios.len());
    }
    println!(
        "ingested {} tracks at {} fps -> {}",
        tracks.len(),
        TARGET_FPS,
        args.out.display()
    );
    write_manifest(&args.out, "ingest", sha, params, inputs, started)
}

fn cmd_generate(args: GenerateArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let mut gen_cfg = config.generator.clone();
    if let Some(d) = args.density {
        gen_cfg.density = d.into();
    }
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let scenario = generate_synthetic(&gen_cfg, seed)?;
        scenario.save_dir(&args.out.join(&scenario.name))?;
    }
    let mut params = BTreeMap::new();
    params.insert("seed".into(), args.seed.to_string());
    params.insert("count".into(), args.count.to_string());
    params.insert("density".into(), format!("{:?}", gen_cfg.density));
    println!("generated {} scenarios -> {}", args.count, args.out.display());
    write_manifest(&args.out, "generate", sha, params, Vec::new(), started)
}

/// Loads every scenario directory under `root` (or `root` itself).
fn load_scenarios(root: &Path) -> Result<Vec<Scenario>> {
    if root.join("scenario.json").exists() {
        return Ok(vec![Scenario::load_dir(root)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("scenario.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scenario directories under {}", root.display());
    }
    dirs.iter().map(|d| Ok(Scenario::load_dir(d)?)).collect()
}

fn scenario_inputs(root: &Path) -> Result<Vec<InputDigest>> {
    let mut inputs = Vec::new();
    if root.join("scenario.json").exists() {
        for name in ["scenario.json", "map.json", "tracks.csv"] {
            inputs.push(file_digest(&root.join(name))?);
        }
        return Ok(inputs);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("scenario.json").exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        for name in ["scenario.json", "map.json", "tracks.csv"] {
            inputs.push(file_digest(&dir.join(name))?);
        }
    }
    Ok(inputs)
}

fn cmd_train(args: TrainArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let inputs = scenario_inputs(&args.scenarios)?;
    let scenarios = load_scenarios(&args.scenarios)?;

    let mut set = SampleSet::default();
    for scenario in &scenarios {
        let part = make_samples(&scenario.tracks, &scenario.map, &config.model, &config.samples);
        set.samples.extend(part.samples);
    }
    println!(
        "training on {} samples from {} scenarios",
        set.len(),
        scenarios.len()
    );
    let outcome = train(&set, config.model, &config.training)?;

    Checkpoint::from_model(&outcome.model).save(&args.out.join("checkpoint.json"))?;
    let mut w = csv::Writer::from_path(args.out.join("loss_curve.csv"))?;
    w.write_record(["batch", "nll"])?;
    for (batch, loss) in &outcome.loss_curve {
        w.write_record([batch.to_string(), loss.to_string()])?;
    }
    w.flush()?;

    let final_loss = outcome.loss_curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!("final batch NLL: {final_loss:.4}");

    let mut params = BTreeMap::new();
    params.insert("samples".into(), set.len().to_string());
    params.insert("batches".into(), config.training.max_batches.to_string());
    params.insert("seed".into(), config.training.seed.to_string());
    write_manifest(&args.out, "train", sha, params, inputs, started)
}

fn cmd_predict(args: PredictArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let inputs = vec![
        file_digest(&args.model)?,
        file_digest(&args.tracks)?,
        file_digest(&args.map)?,
    ];
    let model = Checkpoint::load(&args.model)?.into_model()?;
    let map = MapModel::load(&args.map)?;
    let tracks = ingest_tracks(std::fs::File::open(&args.tracks)?, TARGET_FPS)?;
    let predictor = PovlPredictor::new(model);
    let t_obs = args.t_obs as usize;

    let mut w = csv::Writer::from_path(args.out.join("predictions.csv"))?;
    w.write_record(["id", "frame", "step", "x", "y", "cxx", "cxy", "cyy"])?;
    let mut emitted = 0usize;
    for track in tracks.iter() {
        let mut local = t_obs as i64 - 1;
        while local < track.frames.len() as i64 {
            let frame = track.start_frame + local;
            if let Ok(pred) = predictor.predict(&tracks, &map, track.id, frame, t_obs) {
                for (k, (p, c)) in pred.points.iter().zip(&pred.cov).enumerate() {
                    w.write_record([
                        track.id.to_string(),
                        frame.to_string(),
                        (k + 1).to_string(),
                        p.x.to_string(),
                        p.y.to_string(),
                        c[0].to_string(),
                        c[1].to_string(),
                        c[2].to_string(),
                    ])?;
                }
                emitted += 1;
            }
            local += args.stride.max(1) as i64;
        }
    }
    w.flush()?;
    println!("wrote predictions for {emitted} anchors");
    let mut params = BTreeMap::new();
    params.insert("t_obs".into(), t_obs.to_string());
    params.insert("stride".into(), args.stride.to_string());
    params.insert("anchors".into(), emitted.to_string());
    let _ = config;
    write_manifest(&args.out, "predict", sha, params, inputs, started)
}

fn build_predictor(
    kind: PredictorArg,
    model_path: Option<&PathBuf>,
) -> Result<(Predictor, Vec<InputDigest>)> {
    match kind {
        PredictorArg::Cv => Ok((Predictor::Cv, Vec::new())),
        PredictorArg::Gt => Ok((Predictor::Gt, Vec::new())),
        PredictorArg::Povl => {
            let path = model_path
                .context("--model is required for the learned predictor")?;
            let digest = file_digest(path)?;
            let model = Checkpoint::load(path)?.into_model()?;
            Ok((Predictor::Povl(Box::new(PovlPredictor::new(model))), vec![digest]))
        }
    }
}

fn sim_options(config: &AppConfig) -> SimOptions {
    SimOptions {
        planner: config.planner.clone(),
        potential: config.potential,
        vehicle: config.vehicle,
        features: config.features,
        metrics: config.metrics.clone(),
    }
}

fn cmd_plan(args: PlanArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let mut inputs = scenario_inputs(&args.scenario)?;
    let (predictor, model_inputs) = build_predictor(args.predictor, args.model.as_ref())?;
    inputs.extend(model_inputs);

    let scenario = Scenario::load_dir(&args.scenario)?;
    let result = simulate_scenario(&scenario, &predictor, &sim_options(config))?;

    let mut w = csv::Writer::from_path(args.out.join("plan.csv"))?;
    w.write_record([
        "step", "t", "x", "u", "y", "v", "psi", "r", "force", "steer", "cost_ev", "cost_env",
        "cost_ref",
    ])?;
    for (k, control) in result.applied.iter().enumerate() {
        let s = &result.states[k + 1];
        let b = result.plans[k].breakdown[0];
        w.write_record([
            k.to_string(),
            ((scenario.t0_frame + k as i64 + 1) as f64 * crate::scene::DT).to_string(),
            s.x.to_string(),
            s.u.to_string(),
            s.y.to_string(),
            s.v.to_string(),
            s.psi.to_string(),
            s.r.to_string(),
            control.force.to_string(),
            control.steer.to_string(),
            b.ev.to_string(),
            b.env.to_string(),
            b.reference.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "planned {} steps with {} (failures: {})",
        result.applied.len(),
        result.predictor,
        result.solver_failures
    );
    let mut params = BTreeMap::new();
    params.insert("predictor".into(), result.predictor.to_string());
    write_manifest(&args.out, "plan", sha, params, inputs, started)
}

fn cmd_simulate(args: SimulateArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    fresh_out_dir(&args.out)?;
    let mut inputs = scenario_inputs(&args.scenarios)?;
    let (predictor, model_inputs) = build_predictor(args.predictor, args.model.as_ref())?;
    inputs.extend(model_inputs);
    let scenarios = load_scenarios(&args.scenarios)?;
    let opts = sim_options(config);

    let run = || -> Result<Vec<SimResult>> {
        scenarios
            .par_iter()
            .map(|s| Ok(simulate_scenario(s, &predictor, &opts)?))
            .collect()
    };
    // Ordered collect keeps the aggregation identical for any worker count.
    let results: Vec<SimResult> = match args.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(run),
        None => run(),
    }?;

    let mut steps = csv::Writer::from_path(args.out.join("steps.csv"))?;
    steps.write_record([
        "scenario",
        "step",
        "bucket_distance",
        "ittc_sum",
        "ittc_count",
        "jerk",
        "force_n",
    ])?;
    let mut ego = csv::Writer::from_path(args.out.join("ego.csv"))?;
    ego.write_record(["scenario", "step", "x", "u", "y", "v", "psi", "r", "force", "steer"])?;
    let mut summary = csv::Writer::from_path(args.out.join("summary.csv"))?;
    summary.write_record(["scenario", "ittc", "jerk", "force_kn", "solver_failures"])?;

    let mut all_records: Vec<StepRecord> = Vec::new();
    for result in &results {
        for (k, m) in result.step_metrics.iter().enumerate() {
            let rec = m.to_record();
            steps.write_record([
                result.scenario.clone(),
                k.to_string(),
                rec.bucket_distance.map(|d| d.to_string()).unwrap_or_default(),
                rec.ittc_sum.to_string(),
                rec.ittc_count.to_string(),
                rec.jerk.map(|j| j.to_string()).unwrap_or_default(),
                rec.force_n.to_string(),
            ])?;
            all_records.push(rec);
        }
        for (k, control) in result.applied.iter().enumerate() {
            let s = &result.states[k + 1];
            ego.write_record([
                result.scenario.clone(),
                k.to_string(),
                s.x.to_string(),
                s.u.to_string(),
                s.y.to_string(),
                s.v.to_string(),
                s.psi.to_string(),
                s.r.to_string(),
                control.force.to_string(),
                control.steer.to_string(),
            ])?;
        }
        let safety: Vec<crate::metrics::SafetyStep> = Vec::new();
        let _ = safety;
        let scenario_ittc = {
            let sum: f64 = result.step_metrics.iter().map(|m| m.ittc_contributions.iter().sum::<f64>()).sum();
            let n: usize = result.step_metrics.iter().map(|m| m.ittc_contributions.len()).sum();
            if n > 0 {
                sum / n as f64
            } else {
                0.0
            }
        };
        let jerk = jerk_mean(&result.velocities(), crate::scene::DT).unwrap_or(0.0);
        let force = force_mean(&result.forces_n());
        summary.write_record([
            result.scenario.clone(),
            scenario_ittc.to_string(),
            jerk.to_string(),
            force.to_string(),
            result.solver_failures.to_string(),
        ])?;
    }
    steps.flush()?;
    ego.flush()?;
    summary.flush()?;

    let rows = aggregate_records(&all_records, &config.metrics);
    let mut buckets = csv::Writer::from_path(args.out.join("buckets.csv"))?;
    buckets.write_record(["edge_m", "steps", "ittc_x100", "jerk", "force_kn"])?;
    for row in &rows {
        buckets.write_record([
            row.edge.to_string(),
            row.steps.to_string(),
            row.ittc_x100.map(|v| v.to_string()).unwrap_or_default(),
            row.jerk.map(|v| v.to_string()).unwrap_or_default(),
            row.force_kn.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    buckets.flush()?;

    println!(
        "simulated {} scenarios with {}",
        results.len(),
        predictor.kind()
    );
    let mut params = BTreeMap::new();
    params.insert("predictor".into(), predictor.kind().to_string());
    params.insert("scenarios".into(), results.len().to_string());
    if let Some(w) = args.workers {
        params.insert("workers".into(), w.to_string());
    }
    write_manifest(&args.out, "simulate", sha, params, inputs, started)
}

fn cmd_report(args: ReportArgs, config: &AppConfig, sha: &str, started: Instant) -> Result<()> {
    if args.runs.is_empty() && args.model.is_none() && !args.field_slice {
        bail!("report needs --runs, --model + --scenarios, or --field-slice");
    }
    fresh_out_dir(&args.out)?;
    let mut inputs = Vec::new();
    let mut params = BTreeMap::new();

    // Prediction accuracy tables.
    if let Some(model_path) = &args.model {
        let scen_root = args
            .scenarios
            .as_ref()
            .context("--scenarios is required with --model")?;
        inputs.push(file_digest(model_path)?);
        inputs.extend(scenario_inputs(scen_root)?);
        let model = Checkpoint::load(model_path)?.into_model()?;
        let scenarios = load_scenarios(scen_root)?;

        let mut horizon_rows: Vec<(f64, f64, f64)> = Vec::new();
        let mut obs_rows: Vec<(usize, f64, f64)> = Vec::new();
        // Pool anchors across scenarios by concatenating the reports,
        // weighting by anchor count.
        let mut reports = Vec::new();
        for scenario in &scenarios {
            reports.push(evaluate(&model, &scenario.tracks, &scenario.map, &config.eval)?);
        }
        let total: usize = reports.iter().map(|r| r.anchors).sum();
        for (h, _) in crate::training::HORIZON_STEPS.iter().enumerate() {
            let povl = weighted(&reports, total, |r| r.povl_by_horizon[h]);
            let cv = weighted(&reports, total, |r| r.cv_by_horizon[h]);
            horizon_rows.push(((h + 1) as f64, povl, cv));
        }
        for (i, t_obs) in (2..=15).enumerate() {
            let povl = weighted(&reports, total, |r| r.by_obslength[i].povl_rmse);
            let cv = weighted(&reports, total, |r| r.by_obslength[i].cv_rmse);
            obs_rows.push((t_obs, povl, cv));
        }

        let mut w = csv::Writer::from_path(args.out.join("rmse_by_horizon.csv"))?;
        w.write_record(["horizon_s", "povl_rmse_m", "cv_rmse_m"])?;
        for (h, povl, cv) in horizon_rows {
            w.write_record([h.to_string(), povl.to_string(), cv.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(args.out.join("rmse_by_obslength.csv"))?;
        w.write_record(["t_obs_steps", "povl_rmse_m", "cv_rmse_m"])?;
        for (t, povl, cv) in obs_rows {
            w.write_record([t.to_string(), povl.to_string(), cv.to_string()])?;
        }
        w.flush()?;
        params.insert("eval_anchors".into(), total.to_string());
    }

    // Bucketed planning comparison across runs.
    if !args.runs.is_empty() {
        let mut per_run: Vec<(String, Vec<StepRecord>)> = Vec::new();
        for run_dir in &args.runs {
            inputs.push(file_digest(&run_dir.join("steps.csv"))?);
            let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(
                run_dir.join("manifest.json"),
            )?)?;
            let label = manifest
                .params
                .get("predictor")
                .cloned()
                .unwrap_or_else(|| run_dir.display().to_string());
            per_run.push((label, read_step_records(&run_dir.join("steps.csv"))?));
        }
        // Table rows ordered like the comparison tables: gt, cv, povl.
        per_run.sort_by_key(|(label, _)| match label.as_str() {
            "gt" => 0,
            "cv" => 1,
            "povl" => 2,
            _ => 3,
        });

        let edges = &config.metrics.bucket_edges;
        let mut w = csv::Writer::from_path(args.out.join("planning_by_bucket.csv"))?;
        let mut header = vec!["metric".to_string(), "predictor".to_string()];
        header.extend(edges.iter().map(|e| format!("<{e}m")));
        w.write_record(&header)?;

        let tables: Vec<(String, Vec<crate::metrics::BucketRow>)> = per_run
            .iter()
            .map(|(label, recs)| (label.clone(), aggregate_records(recs, &config.metrics)))
            .collect();
        let metric_cols: [(&str, fn(&crate::metrics::BucketRow) -> Option<f64>); 3] = [
            ("ittc_x100", |r| r.ittc_x100),
            ("jerk", |r| r.jerk),
            ("force_kn", |r| r.force_kn),
        ];
        for (metric, getter) in metric_cols {
            for (label, rows) in &tables {
                let mut record = vec![metric.to_string(), label.clone()];
                record.extend(
                    rows.iter()
                        .map(|r| getter(r).map(|v| v.to_string()).unwrap_or_default()),
                );
                w.write_record(&record)?;
            }
            let cv = tables.iter().find(|(l, _)| l == "cv");
            let povl = tables.iter().find(|(l, _)| l == "povl");
            if let (Some((_, cv_rows)), Some((_, povl_rows))) = (cv, povl) {
                let mut record = vec![metric.to_string(), "rel_improvement_pct".to_string()];
                record.extend(cv_rows.iter().zip(povl_rows).map(|(c, p)| {
                    match (getter(c), getter(p)) {
                        (Some(c), Some(p)) if c != 0.0 => {
                            relative_improvement(c, p).to_string()
                        }
                        _ => String::new(),
                    }
                }));
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        params.insert("runs".into(), args.runs.len().to_string());
    }

    // Potential-field slice for plotting.
    if args.field_slice {
        let map_path = args.map.as_ref().context("--map is required with --field-slice")?;
        inputs.push(file_digest(map_path)?);
        let map = MapModel::load(map_path)?;
        let obstacles: Vec<Obstacle> = args
            .obstacle
            .iter()
            .map(|s| -> Result<Obstacle> {
                let (x, y) = s
                    .split_once(',')
                    .with_context(|| format!("obstacle '{s}' is not 'x,y'"))?;
                Ok(Obstacle::stationary(nalgebra::Point2::new(
                    x.trim().parse()?,
                    y.trim().parse()?,
                )))
            })
            .collect::<Result<_>>()?;

        let mut w = csv::Writer::from_path(args.out.join("field_slice.csv"))?;
        w.write_record(["x", "y", "u_env"])?;
        let origin = map.paths.origin();
        for i in 0..=200 {
            let x = origin.x - 100.0 + i as f64;
            for j in 0..=60 {
                let y = origin.y - 15.0 + j as f64 * 0.5;
                let v = u_env(nalgebra::Point2::new(x, y), &obstacles, &map, &config.potential);
                w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        params.insert("field_obstacles".into(), obstacles.len().to_string());
    }

    println!("report written to {}", args.out.display());
    write_manifest(&args.out, "report", sha, params, inputs, started)
}

fn weighted<F: Fn(&crate::training::PredictionReport) -> f64>(
    reports: &[crate::training::PredictionReport],
    total: usize,
    f: F,
) -> f64 {
    reports
        .iter()
        .map(|r| f(r) * r.anchors as f64 / total as f64)
        .sum()
}

fn read_step_records(path: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    let mut reader = csv::Reader::from_path(path)?;
    for record in reader.records() {
        let record = record?;
        let parse_opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        out.push(StepRecord {
            bucket_distance: parse_opt(&record[2]),
            ittc_sum: record[3].parse()?,
            ittc_count: record[4].parse()?,
            jerk: parse_opt(&record[5]),
            force_n: record[6].parse()?,
        });
    }
    Ok(out)
}
