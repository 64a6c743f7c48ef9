use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prp_locate::em::EmOptions;
use prp_locate::harness::{
    self, batch_em_locate, compare, derive_seed, evaluate, generate_dataset, render_example, to_canonical_json,
    train_on_dataset, write_comparison_csv, Config, Dataset, EvalReport, Method, Split,
};
use prp_locate::prp::{extract_prp, PRPField};
use prp_locate::room::{read_manifest, SignalSource};
use prp_locate::stft::stft;
use prp_locate::unfolded::{load_checkpoint, save_checkpoint, write_curves_csv, Example};
use prp_locate::{ArrayGeometry, MultichannelAudio, Position, RoomSpec, Scene};

const DATA_ENV: &str = "PRP_LOCATE_DATA";

#[derive(Parser)]
#[command(name = "prp-locate", version, about = "Multi-speaker localization from pairwise relative phase ratios")]
struct Cli {
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sample-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset, or render a single scene with --single.
    Simulate(SimulateArgs),
    /// Multichannel WAV -> cached PRP features.
    Features(FeaturesArgs),
    /// Batch EM + Scan-to-Locate on one feature file.
    EmLocate(EmLocateArgs),
    /// Train the unfolded network on a dataset.
    Train(TrainArgs),
    /// Run a trained network on one feature file.
    Infer(InferArgs),
    /// Evaluate a method on a dataset split.
    Eval(EvalArgs),
    /// Compare two evaluation reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Render one scene (mixture.wav, scene.json, geometry.json) instead of a dataset.
    #[arg(long)]
    single: bool,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Also store every mixture as WAV.
    #[arg(long)]
    audio: bool,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Room and array, from a scene sidecar or from explicit geometry + room size.
#[derive(Args)]
struct GeometryArgs {
    /// Scene JSON as written by `simulate --single`.
    #[arg(long, conflicts_with_all = ["geometry", "room"])]
    scene: Option<PathBuf>,
    /// JSON list of microphone positions in channel order.
    #[arg(long, requires = "room")]
    geometry: Option<PathBuf>,
    /// Room size "L,W,H" in meters.
    #[arg(long)]
    room: Option<String>,
}

#[derive(Args)]
struct EmLocateArgs {
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    grid_res: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Plain S-cluster mixture without the outlier component.
    #[arg(long)]
    no_outlier: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResultsArgs {
    /// Root of the results tree (<root>/<experiment>/<timestamp>/).
    #[arg(long, default_value = "results")]
    results: PathBuf,
    #[arg(long)]
    experiment: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint weights path; the manifest goes next to it as .json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    results: ResultsArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    BatchEm,
    Unfolded,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, required_if_eq("method", "unfolded"))]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    results: ResultsArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Directory for comparison.json and comparison.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&config, cli.jobs, a),
        Command::Features(a) => features(&config, a),
        Command::EmLocate(a) => em_locate(&config, a),
        Command::Train(a) => train(&config, cli.jobs, a),
        Command::Infer(a) => infer(&config, a),
        Command::Eval(a) => eval(&config, cli.jobs, a),
        Command::Compare(a) => compare_reports(a),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(manifest) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
        let files = read_manifest(Path::new(&manifest)).with_context(|| format!("reading {DATA_ENV}"))?;
        config.protocol.signals = SignalSource::Manifest { files };
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, to_canonical_json(value)?).with_context(|| format!("writing {}", path.display()))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            print!("{}", to_canonical_json(value)?);
            Ok(())
        }
    }
}

/// `<root>/<experiment>/<UTC timestamp>/`, created with the config in it.
fn results_dir(args: &ResultsArgs, default_name: &str, config: &Config) -> Result<PathBuf> {
    let name = args.experiment.as_deref().unwrap_or(default_name);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let dir = args.results.join(name).join(stamp);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), config)?;
    Ok(dir)
}

fn simulate(config: &Config, jobs: usize, a: &SimulateArgs) -> Result<()> {
    let mut config = config.clone();
    if a.single {
        let (_, scene) = harness::plan_sample(&config, Split::Test, 0)?;
        let (_, audio) = render_example(&config, &scene)?;
        std::fs::create_dir_all(&a.out)?;
        audio.write_wav(&a.out.join("mixture.wav"))?;
        write_json(&a.out.join("scene.json"), &scene)?;
        write_json(&a.out.join("geometry.json"), &scene.array.mic_positions())?;
        eprintln!("wrote {}", a.out.display());
        return Ok(());
    }
    let sizes = &mut config.dataset;
    sizes.train = a.train.unwrap_or(sizes.train);
    sizes.val = a.val.unwrap_or(sizes.val);
    sizes.test = a.test.unwrap_or(sizes.test);
    sizes.store_audio |= a.audio;
    let pool = harness::thread_pool(jobs)?;
    let ds = generate_dataset(&config, &a.out, pool.as_ref())?;
    eprintln!("wrote {} samples to {}", ds.manifest.samples.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct FeatureSummary {
    frames: usize,
    bins: usize,
    first_bin: usize,
    pairs: usize,
    valid: usize,
}

fn features(config: &Config, a: &FeaturesArgs) -> Result<()> {
    let audio = MultichannelAudio::read_wav(&a.audio)?;
    let stft_config = prp_locate::stft::StftConfig {
        sample_rate: audio.sample_rate,
        ..config.stft
    };
    let prp = extract_prp(&stft(&audio, &stft_config)?, &config.features)?;
    prp.write(&a.out)?;
    emit(
        None,
        &FeatureSummary {
            frames: prp.num_frames(),
            bins: prp.num_bins(),
            first_bin: prp.layout.first_bin,
            pairs: prp.num_pairs(),
            valid: prp.num_valid(),
        },
    )
}

fn parse_room(text: &str) -> Result<RoomSpec> {
    let dims: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad --room {text:?}"))?;
    let [l, w, h] = dims[..] else {
        bail!("--room needs three comma-separated dimensions, got {text:?}");
    };
    let room = RoomSpec::new(l, w, h, 0.0);
    room.validate()?;
    Ok(room)
}

fn load_geometry(g: &GeometryArgs) -> Result<(RoomSpec, ArrayGeometry, Vec<Position>)> {
    if let Some(path) = &g.scene {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scene: Scene = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok((scene.room, scene.array.clone(), scene.source_positions()));
    }
    let (Some(path), Some(room)) = (&g.geometry, &g.room) else {
        bail!("need --scene, or --geometry with --room");
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mics: Vec<Position> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((parse_room(room)?, ArrayGeometry::from_mic_positions(&mics)?, Vec::new()))
}

fn example_for(prp: PRPField, g: &GeometryArgs) -> Result<Example> {
    let (room, array, sources) = load_geometry(g)?;
    if array.num_pairs() != prp.num_pairs() {
        bail!("features have {} pairs, geometry has {}", prp.num_pairs(), array.num_pairs());
    }
    Ok(Example { prp, room, array, sources })
}

fn em_locate(config: &Config, a: &EmLocateArgs) -> Result<()> {
    let ex = example_for(PRPField::read(&a.features)?, &a.geometry)?;
    let mut baseline = config.baseline.clone();
    baseline.em = EmOptions {
        max_iters: a.iters.unwrap_or(baseline.em.max_iters),
        tol: a.tol.unwrap_or(baseline.em.tol),
        ..baseline.em
    };
    baseline.grid_resolution = a.grid_res.unwrap_or(baseline.grid_resolution);
    baseline.restarts = a.restarts.unwrap_or(baseline.restarts);
    baseline.outlier &= !a.no_outlier;
    if baseline.restarts == 0 {
        bail!("--restarts must be at least 1");
    }
    let speakers = a.speakers.unwrap_or(config.protocol.num_speakers);
    let cands = config.candidates.fixed(&ex.room, speakers, derive_seed(config.seed, &[0xc11]), 0);
    let loc = batch_em_locate(&ex, &cands, &baseline, &config.candidates, derive_seed(config.seed, &[0xc12]))?;
    emit(a.out.as_deref(), &loc)
}

fn train(config: &Config, jobs: usize, a: &TrainArgs) -> Result<()> {
    let mut config = config.clone();
    config.training.epochs = a.epochs.unwrap_or(config.training.epochs);
    let dataset = Dataset::open(&a.dataset)?;
    let dir = results_dir(&a.results, "train", &config)?;
    let started = std::time::Instant::now();
    let outcome = train_on_dataset(&dataset, &config, Some(&a.out), jobs, |s| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_rmse {:.3} m  ({:.0} s)",
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.val_rmse,
            started.elapsed().as_secs_f64()
        );
    })?;
    write_curves_csv(&dir.join("curves.csv"), &outcome.curves)?;
    // make sure the selected weights are on disk even if no epoch improved
    save_checkpoint(&a.out, &outcome.model, config.seed, outcome.best_epoch)?;
    eprintln!("best epoch {}; checkpoint {}; results {}", outcome.best_epoch, a.out.display(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Inference {
    positions: Vec<Position>,
}

fn infer(config: &Config, a: &InferArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let ex = example_for(PRPField::read(&a.features)?, &a.geometry)?;
    let cands = config.candidates.fixed(&ex.room, model.num_speakers, derive_seed(config.seed, &[0xc11]), 0);
    let positions = model.infer(&ex.prp, &ex.room, &cands)?;
    emit(a.out.as_deref(), &Inference { positions })
}

fn eval(config: &Config, jobs: usize, a: &EvalArgs) -> Result<()> {
    let dataset = Dataset::open(&a.dataset)?;
    let loaded = match (a.method, &a.checkpoint) {
        (MethodArg::Unfolded, Some(p)) => Some(load_checkpoint(p)?.0),
        (MethodArg::Unfolded, None) => bail!("--checkpoint is required for the unfolded method"),
        (MethodArg::BatchEm, _) => None,
    };
    let method = match &loaded {
        Some(m) => Method::Unfolded(m),
        None => Method::BatchEm,
    };
    let pool = harness::thread_pool(jobs)?;
    let report = evaluate(&dataset, a.split, &method, config, pool.as_ref())?;
    let dir = results_dir(&a.results, &format!("eval-{}", method.name()), config)?;
    write_json(&dir.join("report.json"), &report)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    eprintln!(
        "{} on {}: rmse {:.3} m, >0.5 m {:.1}% ({} samples)",
        method.name(),
        a.split.name(),
        report.overall.rmse,
        report.overall.pct_over_half_meter,
        report.overall.n_samples
    );
    for (k, s) in &report.by_t60 {
        eprintln!("  {k}: rmse {:.3} m, >0.5 m {:.1}%", s.rmse, s.pct_over_half_meter);
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn compare_reports(a: &CompareArgs) -> Result<()> {
    let cmp = compare(&read_report(&a.a)?, &read_report(&a.b)?)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("comparison.json"), &cmp)?;
    write_comparison_csv(&a.out.join("comparison.csv"), &cmp)?;
    eprintln!(
        "{} vs {}: rmse {:.3} -> {:.3} m ({:+.1}%), sign test p = {:.4}",
        cmp.method_a,
        cmp.method_b,
        cmp.overall.rmse_a,
        cmp.overall.rmse_b,
        -cmp.overall.relative_reduction_pct,
        cmp.sign_test.p_value
    );
    Ok(())
}
