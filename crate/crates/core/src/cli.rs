//! Command-line front end: train, eval, infer, ablate, config inspection and
//! synthetic data generation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{resolve, ResolvedConfig, RunConfig, Source};
use crate::error::Error;
use crate::evalkit::{evaluate_dataset, load_dataset, load_sequence_pairs, match_descriptors, EvalReport, Subset};
use crate::experiments::ablation_table;
use crate::plot;
use crate::raster::Image;
use crate::trainer::{read_log, AblationVariant, Corpus, Trainer};

pub const ENV_OUTPUT_DIR: &str = "KPNET_OUTPUT_DIR";
pub const ENV_DEVICE: &str = "KPNET_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "kpnet", version, about = "Self-supervised keypoint detection and description")]
pub struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, global = true, env = ENV_DEVICE, default_value = "cpu")]
    pub device: String,
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct OutputArg {
    /// Output directory.
    #[arg(long, short, env = ENV_OUTPUT_DIR, default_value = "kpnet_out")]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train KeyPointNet (and IO-Net) on a directory of images.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArg,
        /// Ablation variant V0..V4.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an HPatches-layout dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArg,
        /// Evaluation resolution as HxW, e.g. 240x320.
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Number of RANSAC seeds (0..N).
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_enum)]
        subset: Option<SubsetArg>,
        /// Write match images for the first N pairs.
        #[arg(long, default_value_t = 0)]
        plots: usize,
    },
    /// Detect keypoints in one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 300)]
        top_k: usize,
        /// Resize to HxW before inference (default: the image size rounded down to multiples of 8).
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long, value_enum, default_value = "binary")]
        format: KeypointFormat,
        #[command(flatten)]
        output: OutputArg,
    },
    /// Train all five ablation variants and evaluate each.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArg,
    },
    /// Inspect the merged configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Generate synthetic data.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print every field with its value and origin.
    Show {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Validate and print the merged TOML.
    Dump {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthAction {
    /// Procedural training images.
    Corpus {
        #[command(flatten)]
        output: OutputArg,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value = "240x320")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sequences in the HPatches layout with known homographies.
    Hpatches {
        #[command(flatten)]
        output: OutputArg,
        #[arg(long, default_value_t = 3)]
        illumination: usize,
        #[arg(long, default_value_t = 3)]
        viewpoint: usize,
        #[arg(long, default_value = "480x640")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    Illumination,
    Viewpoint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KeypointFormat {
    Binary,
    Text,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => CliError::Usage(format!("{e:#}")),
            _ => CliError::Runtime(e),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> CliResult<[usize; 2]> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("size `{s}` must look like HxW")))?;
    let h = h.trim().parse().map_err(|_| usage(format!("bad height in `{s}`")))?;
    let w = w.trim().parse().map_err(|_| usage(format!("bad width in `{s}`")))?;
    Ok([h, w])
}

fn resolve_config(args: &ConfigArgs, extra: Vec<String>) -> CliResult<ResolvedConfig> {
    if let Some(p) = &args.config {
        if !p.is_file() {
            return Err(usage(format!("config file {} not found", p.display())));
        }
    }
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    Ok(resolve(args.config.as_deref(), &overrides)?)
}

fn write_snapshot(dir: &Path, resolved: &ResolvedConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("run_config.toml");
    std::fs::write(&path, resolved.config.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn cmd_train(
    corpus: &Path,
    config: &ConfigArgs,
    output: &Path,
    ablation: Option<&str>,
    resume: Option<&Path>,
) -> CliResult<()> {
    require_dir(corpus, "corpus")?;
    let extra = ablation.map(|a| vec![format!("train.ablation_variant=\"{}\"", a.to_ascii_uppercase())]).unwrap_or_default();
    let resolved = resolve_config(config, extra)?;
    write_snapshot(output, &resolved)?;
    let cfg = resolved.config.clone();
    let corpus = Corpus::scan(corpus)?;
    log::info!("training {} on {} images, {} epochs", cfg.train.ablation_variant, corpus.len(), cfg.train.epochs);
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let summary = trainer.fit(&corpus, Some(output), |r, _| {
        if r.step % 50 == 0 {
            log::info!(
                "step {} epoch {} total {:.4} loc {:.4} desc {:.4} score {:.4} io {:.4} ({:.0} ms)",
                r.step,
                r.epoch,
                r.losses.total,
                r.losses.loc,
                r.losses.desc,
                r.losses.score,
                r.losses.io,
                r.elapsed_ms
            );
        }
    })?;
    let reports = read_log(&output.join("train_log.jsonl"))?;
    plot::loss_curve_svg(&reports, &output.join("loss_curve.svg"))?;
    println!(
        "trained {} steps ({} skipped); {} checkpoints in {}",
        summary.steps,
        summary.skipped_steps,
        summary.checkpoints.len(),
        output.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_string_pretty(report).context("serialising report")?;
    std::fs::write(dir.join("report.json"), json).context("writing report.json")?;
    std::fs::write(dir.join("report.txt"), report.table()).context("writing report.txt")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    config: &ConfigArgs,
    output: &Path,
    resolution: Option<&str>,
    top_k: Option<usize>,
    seeds: Option<u64>,
    subset: Option<SubsetArg>,
    plots: usize,
) -> CliResult<()> {
    require_dir(dataset, "dataset")?;
    let mut extra = Vec::new();
    if let Some(r) = resolution {
        let [h, w] = parse_size(r)?;
        extra.push(format!("eval.resolution=[{h}, {w}]"));
    }
    if let Some(k) = top_k {
        extra.push(format!("eval.top_k={k}"));
    }
    if let Some(n) = seeds {
        let list: Vec<String> = (0..n).map(|s| s.to_string()).collect();
        extra.push(format!("eval.seeds=[{}]", list.join(", ")));
    }
    let resolved = resolve_config(config, extra)?;
    write_snapshot(output, &resolved)?;
    let eval = resolved.config.eval.clone();
    let model = Checkpoint::load(checkpoint)?.model(None)?;
    let subset = subset.map(|s| match s {
        SubsetArg::Illumination => Subset::Illumination,
        SubsetArg::Viewpoint => Subset::Viewpoint,
    });
    let start = Instant::now();
    let report = evaluate_dataset(&model, dataset, subset, &eval)?;
    let secs = start.elapsed().as_secs_f64();
    let images = report.pairs.len() * 2;
    if images > 0 {
        log::info!("evaluated {} pairs in {:.1}s ({:.1} images/s)", report.pairs.len(), secs, images as f64 / secs);
    }
    write_report(&report, output)?;
    print!("{}", report.table());
    if plots > 0 {
        let dir = output.join("matches");
        std::fs::create_dir_all(&dir).context("creating match plot directory")?;
        let (sequences, _) = load_dataset(dataset, subset)?;
        let mut written = 0;
        'outer: for seq in &sequences {
            for p in load_sequence_pairs(seq, eval.resolution)? {
                if written == plots {
                    break 'outer;
                }
                let a = model.detect(&p.source, eval.top_k)?;
                let b = model.detect(&p.target, eval.top_k)?;
                let m = match_descriptors(&a.descriptors, &b.descriptors, a.dim);
                let img = plot::match_image(&p.source, &p.target, &a, &b, &m, &p.homography, eval.correctness_threshold);
                img.save(&dir.join(format!("{}_{}.png", p.sequence, p.index)))?;
                written += 1;
            }
        }
    }
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    top_k: usize,
    resolution: Option<&str>,
    format: KeypointFormat,
    output: &Path,
) -> CliResult<()> {
    let model = Checkpoint::load(checkpoint)?.model(None)?;
    let img = Image::load(image)?;
    let [h, w] = match resolution {
        Some(r) => parse_size(r)?,
        None => [img.height / 8 * 8, img.width / 8 * 8],
    };
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(usage(format!("resolution {h}x{w} must be nonzero and divisible by 8")));
    }
    let img = if (img.height, img.width) == (h, w) { img } else { img.resize(h, w) };
    let cells = (h / 8) * (w / 8);
    if top_k > cells {
        return Err(usage(format!("--top-k {top_k} exceeds the {cells} cells of a {h}x{w} image")));
    }
    let start = Instant::now();
    let kp = model.detect(&img, top_k)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    log::info!("inference at {h}x{w}: {ms:.1} ms ({:.1} FPS)", 1e3 / ms);
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let kp_path = match format {
        KeypointFormat::Binary => output.join(format!("{stem}.kps")),
        KeypointFormat::Text => output.join(format!("{stem}.kps.txt")),
    };
    let file = std::fs::File::create(&kp_path).with_context(|| format!("creating {}", kp_path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    match format {
        KeypointFormat::Binary => kp.write_binary(&mut w),
        KeypointFormat::Text => kp.write_text(&mut w),
    }
    .with_context(|| format!("writing {}", kp_path.display()))?;
    plot::keypoint_overlay(&img, &kp).save(&output.join(format!("{stem}_keypoints.png")))?;
    println!("{} keypoints written to {}", kp.len(), kp_path.display());
    Ok(())
}

fn cmd_ablate(corpus: &Path, dataset: &Path, config: &ConfigArgs, output: &Path) -> CliResult<()> {
    require_dir(corpus, "corpus")?;
    require_dir(dataset, "dataset")?;
    let resolved = resolve_config(config, Vec::new())?;
    write_snapshot(output, &resolved)?;
    let images = Corpus::scan(corpus)?;
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let run = || -> CliResult<crate::evalkit::Summary> {
            let mut cfg: RunConfig = resolved.config.clone();
            cfg.train.ablation_variant = variant;
            if resolved.source("model.cross_border") == Some(Source::Default) {
                cfg.model.cross_border = variant.cross_border();
            }
            if resolved.source("model.descriptor_upsample") == Some(Source::Default) {
                cfg.model.descriptor_upsample = variant.descriptor_upsample();
            }
            cfg.validate()?;
            let dir = output.join(variant.to_string());
            let mut trainer = Trainer::new(cfg.clone())?;
            trainer.fit(&images, Some(&dir), |_, _| {})?;
            let report = evaluate_dataset(&trainer.model, dataset, None, &cfg.eval)?;
            write_report(&report, &dir)?;
            Ok(report.overall().clone())
        };
        log::info!("ablation variant {variant}");
        let row = run().map_err(|e| match e {
            CliError::Usage(m) => m,
            CliError::Runtime(e) => format!("{e:#}"),
        });
        rows.push((variant, row));
    }
    let table = ablation_table(&rows, &resolved.config.eval.homography_thresholds);
    std::fs::write(output.join("ablation.txt"), &table).context("writing ablation.txt")?;
    print!("{table}");
    if rows.iter().any(|(_, r)| r.is_err()) {
        return Err(CliError::Runtime(anyhow!("some ablation variants failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(usage(format!("device `{}` is not available; this build supports `cpu` only", cli.device)));
    }
    match cli.command {
        Command::Train { corpus, config, output, ablation, resume } => {
            cmd_train(&corpus, &config, &output.output, ablation.as_deref(), resume.as_deref())
        }
        Command::Eval { checkpoint, dataset, config, output, resolution, top_k, seeds, subset, plots } => cmd_eval(
            &checkpoint,
            &dataset,
            &config,
            &output.output,
            resolution.as_deref(),
            top_k,
            seeds,
            subset,
            plots,
        ),
        Command::Infer { checkpoint, image, top_k, resolution, format, output } => {
            cmd_infer(&checkpoint, &image, top_k, resolution.as_deref(), format, &output.output)
        }
        Command::Ablate { corpus, dataset, config, output } => cmd_ablate(&corpus, &dataset, &config, &output.output),
        Command::Config { action } => {
            match action {
                ConfigAction::Show { config } => print!("{}", resolve_config(&config, Vec::new())?.describe()?),
                ConfigAction::Dump { config } => print!("{}", resolve_config(&config, Vec::new())?.config.to_toml()?),
            }
            Ok(())
        }
        Command::Synth { action } => {
            match action {
                SynthAction::Corpus { output, count, size, seed } => {
                    let [h, w] = parse_size(&size)?;
                    let paths = crate::synthetic::write_corpus(&output.output, count, h, w, seed)?;
                    println!("wrote {} images to {}", paths.len(), output.output.display());
                }
                SynthAction::Hpatches { output, illumination, viewpoint, size, seed } => {
                    let [h, w] = parse_size(&size)?;
                    crate::synthetic::write_hpatches(&output.output, illumination, viewpoint, h, w, seed)?;
                    println!("wrote {} sequences to {}", illumination + viewpoint, output.output.display());
                }
            }
            Ok(())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}
