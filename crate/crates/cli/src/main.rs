use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scoreloc::harness::{
    evaluate, generate_synthetic_world, novelty_binning, quality_predictor, standard_predictor, sweep_correspondence_quality,
    sweep_reservoir_count, warped_predictor, write_csv, Config, CorrespondenceMode, EvalReport, PipelineVariant, RelocaliseOptions,
    RelocaliserState, SyntheticWorld, WorldSpec, DEFAULT_NOVELTY_EDGES,
};
use scoreloc::io::{load_sequence, save_sequence, SequenceFormat};
use scoreloc::predictor::{PredictionStore, Predictor, SyntheticPredictorConfig};
use scoreloc::RigidPose;

const PREDICTOR_FILE: &str = "predictor.json";
const WORLD_FILE: &str = "world.json";

#[derive(Parser)]
#[command(name = "scoreloc", version, about = "Online RGB-D relocalisation from scene coordinate predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write its train/test sequences.
    SynthGen(SynthGenArgs),
    /// Train reservoirs and the scene model online from a sequence.
    Train(TrainArgs),
    /// Estimate poses for frames of a sequence.
    Relocalise(RelocaliseArgs),
    /// Relocalise a sequence and report accuracy and timings.
    Evaluate(EvaluateArgs),
    /// Success rate as the reservoir count shrinks below the occupied-cell count.
    SweepReservoirs(SweepReservoirsArgs),
    /// Success rate against the fraction of good correspondences.
    SweepQuality(SweepQualityArgs),
    /// Success rate binned by distance from the training trajectory.
    NoveltyReport(NoveltyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Standard,
    Warped,
    Quality,
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    points: usize,
    #[arg(long, default_value_t = 200)]
    train_frames: usize,
    #[arg(long, default_value_t = 50)]
    test_frames: usize,
    #[arg(long, default_value_t = 0.6)]
    max_test_offset: f64,
}

impl WorldArgs {
    fn spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            point_count: self.points,
            train_frames: self.train_frames,
            test_frames: self.test_frames,
            max_test_offset: self.max_test_offset,
            ..WorldSpec::default()
        }
    }
}

#[derive(Args)]
struct SynthGenArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, value_enum, default_value = "standard")]
    predictor: PredictorKind,
    #[arg(long, default_value_t = 1)]
    predictor_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SourceArgs {
    /// Sequence directory.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long, default_value = "synthetic_native")]
    format: SequenceFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Key-value config file; preset defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic predictor JSON written by `synth-gen`.
    #[arg(long, conflicts_with = "predictions")]
    predictor: Option<PathBuf>,
    /// Directory of per-frame prediction files.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    state: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    state: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    /// Override refinement settings from a config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use raw predictions instead of reservoir modes.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct RelocaliseArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Only this frame index.
    #[arg(long)]
    frame: Option<u32>,
    /// JSON output; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Per-frame CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Stage timing CSV table.
    #[arg(long)]
    timing_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepReservoirsArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reservoir counts as multiples of the occupied-cell count.
    #[arg(long, value_delimiter = ',', default_value = "2,1,0.5,0.25,0.125")]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepQualityArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.5,0.75,1")]
    fractions: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoveltyArgs {
    #[arg(long)]
    state: PathBuf,
    /// Training sequence, for its poses.
    #[arg(long)]
    train: PathBuf,
    /// Test sequence.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "synthetic_native")]
    format: SequenceFormat,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train(a),
        Command::Relocalise(a) => relocalise(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::SweepReservoirs(a) => sweep_reservoirs(a),
        Command::SweepQuality(a) => sweep_quality(a),
        Command::NoveltyReport(a) => novelty_report(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::indoor()),
    }
}

fn read_sequence(dir: &Path, format: SequenceFormat) -> Result<Vec<scoreloc::FrameRecord>> {
    load_sequence(dir, format).with_context(|| format!("reading sequence {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn predictor_for(world: &SyntheticWorld, kind: PredictorKind, seed: u64) -> SyntheticPredictorConfig {
    match kind {
        PredictorKind::Standard => standard_predictor(world, seed),
        PredictorKind::Warped => warped_predictor(world, seed),
        PredictorKind::Quality => quality_predictor(world, seed),
    }
}

#[derive(Serialize)]
struct WorldSummary<'a> {
    spec: &'a WorldSpec,
    surfaces: usize,
    train_frames: usize,
    test_frames: usize,
    test_offsets: &'a [f64],
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let world = generate_synthetic_world(&a.world.spec());
    let predictor = predictor_for(&world, a.predictor, a.predictor_seed);
    fs::create_dir_all(&a.out)?;
    save_sequence(&world.train, &a.out.join("train"), SequenceFormat::SyntheticNative)?;
    save_sequence(&world.test, &a.out.join("test"), SequenceFormat::SyntheticNative)?;
    write_json(&predictor, Some(&a.out.join(PREDICTOR_FILE)))?;
    write_json(
        &WorldSummary {
            spec: &world.spec,
            surfaces: world.surfaces.len(),
            train_frames: world.train.len(),
            test_frames: world.test.len(),
            test_offsets: &world.test_offsets,
        },
        Some(&a.out.join(WORLD_FILE)),
    )?;
    eprintln!("wrote {} train and {} test frames to {}", world.train.len(), world.test.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let predictor = match (&a.predictor, &a.predictions) {
        (Some(p), None) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Predictor::Synthetic(serde_json::from_str(&text)?)
        }
        (None, Some(dir)) => Predictor::Files(PredictionStore::new(dir)),
        _ => bail!("give exactly one of --predictor or --predictions"),
    };
    let frames = read_sequence(&a.source.sequence, a.source.format)?;
    let mut state = RelocaliserState::new(config, predictor)?;
    state.train_online(&frames)?;
    state.save(&a.state).with_context(|| format!("writing {}", a.state.display()))?;
    eprintln!(
        "trained on {} frames: {} occupied cells, {} reservoirs, {} model points",
        frames.len(),
        state.occupied_cells(),
        state.assigned_reservoirs(),
        state.model.len()
    );
    Ok(())
}

fn open_state(run: &RunArgs) -> Result<(RelocaliserState, RelocaliseOptions)> {
    let mut state = RelocaliserState::load(&run.state).with_context(|| format!("reading {}", run.state.display()))?;
    if let Some(p) = &run.config {
        state.config = load_config(Some(p))?;
    }
    let options = RelocaliseOptions {
        mode: if run.raw { CorrespondenceMode::Raw } else { CorrespondenceMode::Adapted },
        filter: None,
    };
    Ok((state, options))
}

#[derive(Serialize)]
struct PoseOutput {
    index: u32,
    pose: Option<[[f64; 4]; 4]>,
    failure: Option<String>,
    total_ms: Option<f64>,
}

fn matrix(p: &RigidPose) -> [[f64; 4]; 4] {
    let m = p.to_matrix4();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn relocalise(a: RelocaliseArgs) -> Result<()> {
    let (state, options) = open_state(&a.run)?;
    let frames = read_sequence(&a.run.source.sequence, a.run.source.format)?;
    let selected: Vec<_> = frames.iter().filter(|f| a.frame.is_none_or(|i| f.index == i)).collect();
    if selected.is_empty() {
        bail!("no matching frames in {}", a.run.source.sequence.display());
    }
    let out: Vec<PoseOutput> = selected
        .into_iter()
        .map(|f| match state.relocalise(f, &options) {
            Ok(r) => PoseOutput {
                index: f.index,
                pose: Some(matrix(&r.pose)),
                failure: None,
                total_ms: Some(r.timings.total),
            },
            Err(e) => PoseOutput {
                index: f.index,
                pose: None,
                failure: Some(e.to_string()),
                total_ms: None,
            },
        })
        .collect();
    write_json(&out, a.out.as_deref())
}

#[derive(Serialize)]
struct FrameRow {
    index: u32,
    success: bool,
    translation_error: Option<f64>,
    rotation_error: Option<f64>,
    total_ms: Option<f64>,
}

#[derive(Serialize)]
struct TimingRow {
    stage: &'static str,
    ms: f64,
}

fn frame_rows(report: &EvalReport) -> Vec<FrameRow> {
    report
        .frames
        .iter()
        .map(|f| FrameRow {
            index: f.index,
            success: f.success,
            translation_error: f.error.map(|e| e.translation_error),
            rotation_error: f.error.map(|e| e.angular_error),
            total_ms: f.timings.map(|t| t.total),
        })
        .collect()
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (state, options) = open_state(&a.run)?;
    let frames = read_sequence(&a.run.source.sequence, a.run.source.format)?;
    let report = evaluate(&state, &frames, &options);
    write_json(&report, Some(&a.report))?;
    if let Some(p) = &a.csv {
        write_csv(&frame_rows(&report), p)?;
    }
    if let Some(p) = &a.timing_csv {
        let rows: Vec<TimingRow> = report.timing.rows().into_iter().map(|(stage, ms)| TimingRow { stage, ms }).collect();
        write_csv(&rows, p)?;
    }
    println!(
        "success {:.1}% (5cm/5deg), median {:.4} m / {:.3} deg, {:.1} ms/frame",
        100.0 * report.success_rate_5cm5deg,
        report.median_translation,
        report.median_rotation,
        report.timing.total
    );
    Ok(())
}

fn sweep_reservoirs(a: SweepReservoirsArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let world = generate_synthetic_world(&a.world.spec());
    let rows = sweep_reservoir_count(&world, &config, &standard_predictor(&world, 1), &a.ratios)?;
    write_csv(&rows, &a.out)?;
    for r in &rows {
        println!("N={:>8} occupied={} success={:.1}%", r.reservoir_count, r.occupied_cells, 100.0 * r.success_rate);
    }
    Ok(())
}

fn sweep_quality(a: SweepQualityArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let world = generate_synthetic_world(&a.world.spec());
    let rows = sweep_correspondence_quality(&world, &config, &quality_predictor(&world, 1), &a.fractions, &PipelineVariant::STANDARD)?;
    write_csv(&rows, &a.out)?;
    for r in &rows {
        println!("{:<22} good={:.2} success={:.1}%", r.variant, r.good_fraction, 100.0 * r.success_rate);
    }
    Ok(())
}

#[derive(Serialize)]
struct NoveltyRow {
    max_translation_cm: Option<f64>,
    max_rotation_deg: Option<f64>,
    count: usize,
    successes: usize,
    success_rate: f64,
}

fn novelty_report(a: NoveltyArgs) -> Result<()> {
    let state = RelocaliserState::load(&a.state).with_context(|| format!("reading {}", a.state.display()))?;
    let train = read_sequence(&a.train, a.format)?;
    let test = read_sequence(&a.test, a.format)?;
    let report = evaluate(&state, &test, &RelocaliseOptions::default());
    let train_poses: Vec<RigidPose> = train.iter().map(|f| f.pose).collect();
    let test_poses: Vec<RigidPose> = test.iter().map(|f| f.pose).collect();
    let successes: Vec<bool> = report.frames.iter().map(|f| f.success).collect();
    let binning = novelty_binning(&train_poses, &test_poses, &successes, &DEFAULT_NOVELTY_EDGES);
    let rows: Vec<NoveltyRow> = binning
        .bins
        .iter()
        .map(|b| NoveltyRow {
            max_translation_cm: b.limit.map(|l| l.0),
            max_rotation_deg: b.limit.map(|l| l.1),
            count: b.count,
            successes: b.successes,
            success_rate: b.success_rate,
        })
        .collect();
    write_csv(&rows, &a.out)?;
    for r in &rows {
        let label = r.max_translation_cm.map_or("beyond".to_string(), |t| format!("<= {t} cm"));
        println!("{label:>10}: {}/{} ({:.1}%)", r.successes, r.count, 100.0 * r.success_rate);
    }
    Ok(())
}
