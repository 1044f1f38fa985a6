use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dsgwn_core::cascade::{CandidateWindow, Cascade};
use dsgwn_core::config::PipelineConfig;
use dsgwn_core::fitting::MID_GRAY;
use dsgwn_core::gabor::GwnBuildReport;
use dsgwn_core::imaging::Image;
use dsgwn_core::model::{DeformableModel, GlobalPose};
use dsgwn_core::pipeline::{self, DetectionResult, ScoredResult};
use dsgwn_core::synth::{self, build_face_model, SyntheticFaceSpec, TemplateField, TruthRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Deformable symmetric wavelet-network face model pipeline.
#[derive(Parser)]
#[command(name = "dsgwn", version, about)]
struct Cli {
    /// Configuration file (TOML or JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomness in the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic face images with ground-truth pose records.
    Synth {
        /// Number of images.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Model JSON to render; built from the procedural face if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the configured noise level.
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Render every image at the identity pose (plus noise).
        #[arg(long, default_value_t = false)]
        static_pose: bool,
    },
    /// Build the wavelet-network face model.
    BuildGwn {
        /// Grayscale face patch (PGM/PNG); procedural face if absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overrides the configured wavelet count.
        #[arg(long)]
        wavelets: Option<usize>,
    },
    /// Train the candidate-window cascade on synthetic data.
    TrainCascade {
        /// Model JSON; built from the procedural face if absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Detect faces in images.
    Detect {
        /// Input images (PGM/PNG).
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write overlay PNGs for the best detection per image.
        #[arg(long, default_value_t = false)]
        overlays: bool,
    },
    /// Track a face through an ordered directory of frames.
    Track {
        /// Directory of frames, processed in file-name order.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write overlay PNGs for tracked frames.
        #[arg(long, default_value_t = false)]
        overlays: bool,
    },
    /// Score detection results against ground truth.
    Eval {
        /// Truth records (truth.json from `synth`).
        #[arg(long)]
        truth: PathBuf,
        /// Detection records (detections.json from `detect`).
        #[arg(long)]
        results: PathBuf,
    },
}

/// Per-image entry of detections.json.
#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    id: String,
    image: String,
    results: Vec<DetectionResult>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;

    match &cli.command {
        Command::Synth {
            count,
            model,
            noise_sigma,
            static_pose,
        } => synth_command(
            &cli,
            &config,
            *count,
            model.as_deref(),
            *noise_sigma,
            *static_pose,
        ),
        Command::BuildGwn { input, wavelets } => {
            build_gwn_command(&cli, &config, input.as_deref(), *wavelets)
        }
        Command::TrainCascade { model } => train_cascade_command(&cli, &config, model.as_deref()),
        Command::Detect {
            images,
            cascade,
            model,
            overlays,
        } => detect_command(&cli, &config, images, cascade, model, *overlays),
        Command::Track {
            frames,
            cascade,
            model,
            overlays,
        } => track_command(&cli, &config, frames, cascade, model, *overlays),
        Command::Eval { truth, results } => eval_command(&cli, truth, results),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Builds the default face model for this config and seed.
fn default_model(config: &PipelineConfig, seed: u64) -> Result<(DeformableModel, GwnBuildReport)> {
    Ok(build_face_model(
        config.model.template_size,
        config.model.wavelets,
        seed,
        &config.model.build,
    )?)
}

fn model_from(path: Option<&Path>, config: &PipelineConfig, seed: u64) -> Result<DeformableModel> {
    match path {
        Some(p) => read_json(p),
        None => Ok(default_model(config, seed)?.0),
    }
}

fn synth_command(
    cli: &Cli,
    config: &PipelineConfig,
    count: usize,
    model: Option<&Path>,
    noise_sigma: Option<f64>,
    static_pose: bool,
) -> Result<()> {
    let model = model_from(model, config, cli.seed)?;
    let template = TemplateField::from_network(&model.base, config.synth.supersample);
    let sc = &config.synth;
    let sigma = noise_sigma.unwrap_or(sc.noise_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut records: Vec<TruthRecord> = Vec::with_capacity(count);

    for i in 0..count {
        let pose = if static_pose {
            GlobalPose::identity()
        } else {
            synth::face_pose(
                rng.random_range(sc.scale_min..=sc.scale_max),
                rng.random_range(-sc.rotation_max..=sc.rotation_max),
                rng.random_range(-sc.translation_max..=sc.translation_max),
                rng.random_range(-sc.translation_max..=sc.translation_max),
                rng.random_range(-sc.perspective_max..=sc.perspective_max),
                rng.random_range(-sc.perspective_max..=sc.perspective_max),
            )?
        };
        let spec = SyntheticFaceSpec {
            pose,
            noise_sigma: sigma,
            width: sc.width,
            height: sc.height,
            seed: cli.seed.wrapping_add(1 + i as u64),
        };
        let (img, mut record) =
            synth::synth_generate(&template, &spec).with_context(|| format!("image {i}"))?;
        record.id = format!("synth-{i:04}");
        img.save_png(cli.out.join(format!("{}.png", record.id)))?;
        records.push(record);
    }
    write_json(&cli.out.join("truth.json"), &records)?;
    println!(
        "wrote {count} images and truth.json to {}",
        cli.out.display()
    );
    Ok(())
}

fn build_gwn_command(
    cli: &Cli,
    config: &PipelineConfig,
    input: Option<&Path>,
    wavelets: Option<usize>,
) -> Result<()> {
    let n = wavelets.unwrap_or(config.model.wavelets);
    let (model, report) = match input {
        Some(path) => {
            let patch = Image::load(path)?
                .resize_bilinear(config.model.template_size, config.model.template_size)
                .normalize_patch();
            let signal = synth::template_signal(&patch);
            let (gwn, report) =
                dsgwn_core::gabor::build_gwn(&signal, n, cli.seed, &config.model.build)?;
            (DeformableModel::from_base(gwn)?, report)
        }
        None => build_face_model(config.model.template_size, n, cli.seed, &config.model.build)?,
    };

    write_json(&cli.out.join("model.json"), &model)?;
    write_json(&cli.out.join("model_report.json"), &report)?;
    let recon = model.base.reconstruct();
    let display = Image::from_vec(
        recon.width(),
        recon.height(),
        recon.data().iter().map(|v| v + MID_GRAY).collect(),
    );
    display.save_png(cli.out.join("model_recon.png"))?;
    println!(
        "built {}-wavelet model: energy {:.6} -> {:.6} ({} rounds, converged: {})",
        model.base.len(),
        report.initial_energy,
        report.final_energy,
        report.energies.len() - 1,
        report.converged
    );
    Ok(())
}

fn train_cascade_command(cli: &Cli, config: &PipelineConfig, model: Option<&Path>) -> Result<()> {
    let model = model_from(model, config, cli.seed)?;
    let template = TemplateField::from_network(&model.base, 4);
    let base_scale =
        model.base.template_width as f64 / dsgwn_core::cascade::CANONICAL_WINDOW as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed ^ 0x9e3779b97f4a7c15);
    let mut positives = Vec::with_capacity(config.training.positives);
    for _ in 0..config.training.positives {
        positives.push(synth::positive_patch(&template, base_scale, &mut rng)?);
    }
    let mut miner = synth::negative_miner(&model, cli.seed);
    let mut train_config = config.training.cascade.clone();
    train_config.seed = cli.seed;
    let (cascade, report) = dsgwn_core::cascade::train_cascade_mined(
        &positives,
        &mut miner,
        config.training.negatives,
        config.training.negatives * 400,
        &train_config,
    )?;
    write_json(&cli.out.join("cascade.json"), &cascade)?;
    write_json(&cli.out.join("cascade_report.json"), &report)?;
    println!(
        "trained {} stages from a pool of {} features",
        cascade.stages.len(),
        report.pool_size
    );
    for (i, stage) in report.stages.iter().enumerate() {
        println!(
            "  stage {i}: {} learners, detection {:.3}, false positives {:.3}",
            stage.learners, stage.train_detection_rate, stage.train_false_positive_rate
        );
    }
    Ok(())
}

fn detect_command(
    cli: &Cli,
    config: &PipelineConfig,
    images: &[PathBuf],
    cascade: &Path,
    model: &Path,
    overlays: bool,
) -> Result<()> {
    let cascade: Cascade = read_json(cascade)?;
    let model: DeformableModel = read_json(model)?;
    let mut records = Vec::new();
    for path in images {
        let img = Image::load(path).with_context(|| format!("loading {}", path.display()))?;
        let results = pipeline::detect(&img, &cascade, &model, &config.detect, &config.fit)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        if overlays {
            if let Some(best) = results.first() {
                pipeline::emit_overlay(&img, best, cli.out.join(format!("{id}_overlay.png")))?;
            }
        }
        println!("{}: {} detection(s)", path.display(), results.len());
        records.push(DetectionRecord {
            id,
            image: path.display().to_string(),
            results,
        });
    }
    write_json(&cli.out.join("detections.json"), &records)?;
    Ok(())
}

fn sorted_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pgm")
            )
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        bail!("no .png/.pgm frames in {}", dir.display());
    }
    Ok(frames)
}

fn track_command(
    cli: &Cli,
    config: &PipelineConfig,
    frames: &Path,
    cascade: &Path,
    model: &Path,
    overlays: bool,
) -> Result<()> {
    let cascade: Cascade = read_json(cascade)?;
    let model: DeformableModel = read_json(model)?;
    let frames = sorted_frames(frames)?;
    let states = pipeline::track(
        &frames,
        &cascade,
        &model,
        &config.detect,
        &config.fit,
        &config.track,
    )?;
    if overlays {
        for (path, state) in frames.iter().zip(&states) {
            let (Some(report), Ok(img)) = (&state.report, Image::load(path)) else {
                continue;
            };
            let Some(pose) = &state.pose else { continue };
            let result = DetectionResult {
                window: pose_window(&model, pose, &img),
                verify_score: 0.0,
                pose: *pose,
                cost: state.cost,
                report: report.clone(),
            };
            pipeline::emit_overlay(
                &img,
                &result,
                cli.out.join(format!("frame_{:04}_overlay.png", state.frame)),
            )?;
        }
    }
    let lost = states.iter().filter(|s| s.lost).count();
    println!("tracked {} frames, {} lost", states.len(), lost);
    write_json(&cli.out.join("track.json"), &states)?;
    Ok(())
}

/// Square window implied by a tracked pose, for overlay drawing.
fn pose_window(
    model: &DeformableModel,
    pose: &dsgwn_core::model::PoseParams,
    img: &Image,
) -> CandidateWindow {
    let side = (model.base.template_width as f64 / pose.scale).round() as usize;
    let side = side.clamp(4, img.width().min(img.height()));
    let cx = pose.cx + (img.width() as f64 - 1.0) / 2.0;
    let cy = pose.cy + (img.height() as f64 - 1.0) / 2.0;
    let x = (cx - side as f64 / 2.0).round().max(0.0) as usize;
    let y = (cy - side as f64 / 2.0).round().max(0.0) as usize;
    CandidateWindow::new(
        x.min(img.width() - side),
        y.min(img.height() - side),
        side,
    )
}

fn eval_command(cli: &Cli, truth: &Path, results: &Path) -> Result<()> {
    let truths: Vec<TruthRecord> = read_json(truth)?;
    let records: Vec<DetectionRecord> = read_json(results)?;
    let scored: Vec<ScoredResult> = records
        .iter()
        .filter_map(|r| {
            r.results.first().map(|best| ScoredResult {
                id: r.id.clone(),
                window: best.window,
                pose: best.pose,
            })
        })
        .collect();
    let report = pipeline::evaluate(&truths, &scored)?;
    write_json(&cli.out.join("metrics.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}
