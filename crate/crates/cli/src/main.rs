//! `handpose`: dataset generation, detection, training, evaluation and
//! calibration from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use handpose_core::calib::{
    format_extrinsics, parse_correspondences, parse_extrinsics, parse_intrinsics, parse_points3d, project_joint_set, solve_pnp_with,
    synchronize_streams, PnpOptions, TimedSample,
};
use handpose_core::detect::DetectorThresholds;
use handpose_core::heatmap::{decode_argmax, encode_joint, GaussianSpec, Heatmap, Keypoint};
use handpose_core::net::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use handpose_core::net::{build_network, train, AdamConfig, NetworkConfig, Objective, TrainConfig};
use handpose_core::pipeline::detect_eval::{count_range, run_detect, segmentation_samples, skeletons_for, SkeletonNoise, SkeletonSource};
use handpose_core::pipeline::manifest::Split;
use handpose_core::pipeline::pnm::{read_image, write_image, ImageBuffer};
use handpose_core::pipeline::pose_eval::{crop_split, default_pck_thresholds, evaluate_pose, PoseTraining, Variant};
use handpose_core::pipeline::reports::{decisions_csv, mjpe_csv, pck_csv, pck_svg, sweep_csv};
use handpose_core::pipeline::synth::{generate_synthetic_dataset, oracle_skeleton, SynthOptions};
use handpose_core::pipeline::{load_dataset, save_dataset};
use handpose_core::skeleton::default_hand_topology;
use handpose_core::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "handpose", version, about = "Skeleton-conditioned hand pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Render the ground-truth skeleton of every record as a PGM.
    Rasterize(RasterizeArgs),
    /// Encode one joint as a Gaussian heatmap PGM.
    Encode(EncodeArgs),
    /// Print the argmax location of a heatmap PGM.
    Decode(DecodeArgs),
    /// Hand detection with IOU, classification scores and a presence-count sweep.
    Detect(DetectArgs),
    /// Train a pose or segmentation network.
    Train(TrainArgs),
    /// Evaluate a pose network: MJPE and PCK.
    Eval(EvalArgs),
    /// Estimate camera extrinsics from 3D-2D correspondences.
    Calibrate(CalibrateArgs),
    /// Project 3D points through a calibration.
    Project(ProjectArgs),
    /// Pair two timestamped streams.
    Sync(SyncArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 21)]
    joints: usize,
    /// Fraction of images without a hand.
    #[arg(long, default_value_t = 0.0)]
    absent_fraction: f64,
    /// Background noise amplitude.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long, allow_hyphen_values = true)]
    x: f64,
    #[arg(long, allow_hyphen_values = true)]
    y: f64,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 128.0)]
    reference_resolution: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["oracle", "params"]))]
struct DetectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use ground-truth skeletons.
    #[arg(long)]
    oracle: bool,
    /// Segmentation checkpoint to predict skeletons with.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Corrupt oracle skeletons with seeded noise.
    #[arg(long, requires = "oracle")]
    noisy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Foreground threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 300)]
    presence_count: usize,
    #[arg(long, default_value_t = 50)]
    sweep_start: usize,
    #[arg(long, default_value_t = 1500)]
    sweep_end: usize,
    #[arg(long, default_value_t = 50)]
    sweep_step: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to resume from and write to; created when missing.
    #[arg(long)]
    params: PathBuf,
    /// multi+skeleton, multi, single-scale or segmentation.
    #[arg(long, default_value = "multi+skeleton")]
    variant: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Optional per-epoch loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value = "multi+skeleton")]
    variant: String,
    #[arg(long)]
    out: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Plain text, one `X Y Z u v` line per correspondence.
    #[arg(long)]
    correspondences: PathBuf,
    /// Plain text `fx fy cx cy`.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Receives the 12 extrinsic numbers, `R` row-major then `t`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    intrinsics: PathBuf,
    /// Extrinsics as written by `calibrate`.
    #[arg(long)]
    extrinsics: PathBuf,
    /// Plain text, one `X Y Z` line per point.
    #[arg(long)]
    points: PathBuf,
    /// Receives one `u v` line per point.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyncArgs {
    /// CSV with `timestamp,payload_id` rows, sorted by time.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Largest accepted offset, in the streams' time unit (milliseconds).
    #[arg(long, default_value_t = 20.0)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let filter = std::env::var("HANDPOSE_LOG").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Rasterize(a) => rasterize(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Detect(a) => detect(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Project(a) => project(a),
        Command::Sync(a) => sync(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let opts = SynthOptions {
        resolution: a.resolution,
        joint_count: a.joints,
        absent_fraction: a.absent_fraction,
        pixel_noise: a.noise,
        ..Default::default()
    };
    let (manifest, images) = generate_synthetic_dataset(a.n, &opts, a.seed)?;
    save_dataset(&a.out, &manifest, &images)?;
    log::info!("wrote {} records to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn rasterize(a: RasterizeArgs) -> Result<()> {
    let (manifest, _) = load_dataset(&a.manifest)?;
    let topo = default_hand_topology(manifest.joint_count)?;
    for r in &manifest.records {
        let skel = oracle_skeleton(r, &topo)?;
        let img = ImageBuffer::from_float(&handpose_core::detect::FloatImage::new(skel.width, skel.height, 1, skel.values)?)?;
        let stem = Path::new(&r.image_path).file_stem().and_then(|s| s.to_str()).unwrap_or("skeleton");
        let path = a.out.join(format!("{stem}.pgm"));
        fs::create_dir_all(&a.out)?;
        write_image(&img, &path)?;
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let spec = GaussianSpec { sigma: a.sigma, reference_resolution: a.reference_resolution };
    let map = encode_joint(Keypoint::new(a.x, a.y), a.resolution, a.resolution, spec)?;
    let img = ImageBuffer::new(
        a.resolution,
        a.resolution,
        1,
        map.values().iter().map(|v| (v * 255.0).round() as u8).collect(),
    )?;
    write(&a.out, img.encode())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let img = read_image(&a.input)?;
    if img.channels != 1 {
        return Err(Error::Format("heatmaps are single-channel (P5)".into()));
    }
    let map = Heatmap::from_values(img.width, img.height, img.data.iter().map(|&v| f64::from(v) / 255.0).collect())?;
    let p = decode_argmax(&map);
    println!("{} {}", p.x, p.y);
    Ok(())
}

#[derive(Serialize)]
struct DetectSummary {
    records: usize,
    presence_count: usize,
    mean_iou: f64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    score_auc: Option<f64>,
    best_presence_count: Option<usize>,
}

fn detect(a: DetectArgs) -> Result<()> {
    let (manifest, images) = load_dataset(&a.manifest)?;
    let topo = default_hand_topology(manifest.joint_count)?;
    let ckpt = a.params.as_deref().map(load_checkpoint).transpose()?;
    let source = match (&ckpt, a.noisy) {
        (Some(c), _) => {
            if !matches!(c.objective, Objective::Segmentation(_)) {
                return Err(Error::Config("detection needs a segmentation checkpoint".into()));
            }
            SkeletonSource::Model(&c.params)
        }
        (None, true) => SkeletonSource::NoisyOracle { noise: SkeletonNoise::default(), seed: a.seed },
        (None, false) => SkeletonSource::Oracle,
    };
    let skeletons = skeletons_for(&manifest, &images, &topo, &source)?;
    let th = DetectorThresholds { foreground_threshold: a.threshold, presence_count: a.presence_count };
    let counts = count_range(a.sweep_start, a.sweep_end, a.sweep_step)?;
    let report = run_detect(&manifest, &skeletons, &th, &counts)?;
    let best = report
        .sweep
        .iter()
        .filter(|r| r.auc.is_finite())
        .fold(None::<&handpose_core::pipeline::detect_eval::SweepRow>, |b, r| match b {
            Some(b) if b.auc >= r.auc => Some(b),
            _ => Some(r),
        })
        .map(|r| r.presence_count);
    let summary = DetectSummary {
        records: manifest.records.len(),
        presence_count: a.presence_count,
        mean_iou: report.mean_iou,
        accuracy: report.metrics.accuracy,
        precision: report.metrics.precision,
        recall: report.metrics.recall,
        f1: report.metrics.f1,
        score_auc: report.score_auc,
        best_presence_count: best,
    };
    fs::create_dir_all(&a.out)?;
    write(&a.out.join("decisions.csv"), decisions_csv(&manifest, &report.decisions)?)?;
    write(&a.out.join("sweep.csv"), sweep_csv(&report.sweep)?)?;
    write(&a.out.join("report.json"), to_json(&summary)?)?;
    log::info!("mean IOU {:.4}, accuracy {:.4}", report.mean_iou, report.metrics.accuracy);
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (manifest, images) = load_dataset(&a.manifest)?;
    let topo = default_hand_topology(manifest.joint_count)?;
    let existing = a.params.exists();
    let resume = existing.then(|| load_checkpoint(&a.params)).transpose()?;
    let optimizer = AdamConfig { learning_rate: a.lr, ..Default::default() };
    let base = TrainConfig { epochs: a.epochs, batch_size: a.batch_size, seed: a.seed, optimizer, ..Default::default() };

    let (ckpt, trace) = if a.variant == "segmentation" {
        let objective = Objective::Segmentation(Default::default());
        let params = match resume {
            Some(c) if c.objective == objective => c.params,
            Some(_) => return Err(Error::Config("checkpoint was not trained for segmentation".into())),
            None => {
                let cfg = NetworkConfig {
                    image_channels: 3,
                    use_skeleton: false,
                    base_channels: a.base_channels,
                    joint_count: 1,
                    input_resolution: a.resolution,
                };
                build_network(&cfg, a.seed)?
            }
        };
        let samples = segmentation_samples(&manifest, &images, Some(Split::Train), &topo, &params.config)?;
        if samples.is_empty() {
            return Err(Error::Eval("no training records".into()));
        }
        let out = train(params, &samples, &TrainConfig { objective: objective.clone(), ..base })?;
        (Checkpoint { params: out.params, objective }, out.loss_trace)
    } else {
        let variant: Variant = a.variant.parse()?;
        let setup = PoseTraining { base_channels: a.base_channels, resolution: a.resolution, train: base, ..Default::default() };
        let params = match resume {
            Some(c) => {
                variant.check(&c.params, &c.objective)?;
                c.params
            }
            None => build_network(&setup.network_config(variant, manifest.joint_count), a.seed)?,
        };
        let res = params.config.input_resolution;
        let crops = crop_split(&manifest, &images, Some(Split::Train), &topo, res)?;
        if crops.is_empty() {
            return Err(Error::Eval("no hand-present training records".into()));
        }
        let (params, trace) = setup.fit_from(params, variant, &crops, a.seed)?;
        (Checkpoint { params, objective: variant.objective() }, trace)
    };

    if let Some(path) = &a.trace {
        let rows: String = trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
        write(path, format!("epoch,loss\n{rows}"))?;
    }
    if a.epochs == 0 && existing {
        log::info!("no epochs requested; {} left untouched", a.params.display());
        return Ok(());
    }
    if let Some(parent) = a.params.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &a.params)?;
    if let Some(l) = trace.last() {
        log::info!("final epoch loss {l:.6e}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    variant: String,
    samples: usize,
    mjpe: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let ckpt = load_checkpoint(&a.params)?;
    variant.check(&ckpt.params, &ckpt.objective)?;
    let (manifest, images) = load_dataset(&a.manifest)?;
    let topo = default_hand_topology(manifest.joint_count)?;
    let split = parse_split(&a.split)?;
    let crops = crop_split(&manifest, &images, split, &topo, ckpt.params.config.input_resolution)?;
    let report = evaluate_pose(&ckpt.params, &ckpt.objective, &crops, &default_pck_thresholds())?;
    let names: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| r.hand_present && (split.is_none() || r.split == split))
        .map(|r| r.image_path.clone())
        .collect();
    fs::create_dir_all(&a.out)?;
    write(&a.out.join("pck.csv"), pck_csv(&report.pck)?)?;
    write(&a.out.join("pck.svg"), pck_svg(&report.pck, &format!("PCK, {variant}"))?)?;
    write(&a.out.join("mjpe.csv"), mjpe_csv(&names, &report.per_sample)?)?;
    let summary = EvalSummary { variant: variant.to_string(), samples: crops.len(), mjpe: report.mjpe };
    write(&a.out.join("summary.json"), to_json(&summary)?)?;
    println!("mjpe {}", report.mjpe);
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Tags parse errors with the file they came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let corr = in_file(&a.correspondences, parse_correspondences(&read_text(&a.correspondences)?))?;
    let intr = in_file(&a.intrinsics, parse_intrinsics(&read_text(&a.intrinsics)?))?;
    let report = solve_pnp_with(&corr, &intr, &PnpOptions::default())?;
    write(&a.out, format_extrinsics(&report.extrinsics))?;
    println!("rms {}", report.rms);
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let intr = in_file(&a.intrinsics, parse_intrinsics(&read_text(&a.intrinsics)?))?;
    let extr = in_file(&a.extrinsics, parse_extrinsics(&read_text(&a.extrinsics)?))?;
    let pts = in_file(&a.points, parse_points3d(&read_text(&a.points)?))?;
    let projected = project_joint_set(&pts, &intr, &extr)?;
    let out: String = projected.iter().map(|p| format!("{} {}\n", p.x, p.y)).collect();
    write(&a.out, out)
}

fn read_stream(path: &Path) -> Result<Vec<TimedSample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize::<TimedSample>()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse { line: i + 2, message: format!("{}: {e}", path.display()) }))
        .collect()
}

fn sync(a: SyncArgs) -> Result<()> {
    let (sa, sb) = (read_stream(&a.a)?, read_stream(&a.b)?);
    let pairs = synchronize_streams(&sa, &sb, a.tolerance)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["a_id", "b_id", "a_time", "b_time", "offset"]).map_err(err)?;
    for (i, j) in pairs {
        let (x, y) = (&sa[i], &sb[j]);
        let row = [x.payload_id.clone(), y.payload_id.clone(), x.timestamp.to_string(), y.timestamp.to_string(), (y.timestamp - x.timestamp).to_string()];
        w.write_record(&row).map_err(err)?;
    }
    write(&a.out, w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}
