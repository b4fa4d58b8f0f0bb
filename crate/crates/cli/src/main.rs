//! `muralfill`: prepare data, train, evaluate, inpaint and serve.

mod overrides;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use muralfill_core::data::{make_fixture_set, prepare_dataset, DatasetManifest, ExtractorChoice, MaskLibrary, PrepareConfig, SplitTag};
use muralfill_core::evaluation::{evaluate_manifest, EvalOptions, Lpips, MaskSource};
use muralfill_core::models::ModelBundle;
use muralfill_core::raster::encode_rgb_png;
use muralfill_core::training::{train, TrainConfig, TrainOptions};
use muralfill_core::{LineDrawing, LineProvenance, Mask, MuralSource, RatioBin, RawMural};
use muralfill_service::{AppState, Registry};

use overrides::parse_assignment;

#[derive(Parser)]
#[command(name = "muralfill", version, about = "Line-drawing guided two-stage mural inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter murals, derive line drawings and write a dataset manifest.
    Prepare(PrepareArgs),
    /// Write a synthetic fixture dataset.
    Fixtures(FixturesArgs),
    /// Run two-stage training.
    Train(TrainArgs),
    /// Score a model on the validation split per mask-ratio bin.
    Eval(EvalArgs),
    /// Inpaint one image.
    Inpaint(InpaintArgs),
    /// Start the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of raw murals.
    #[arg(long)]
    input: PathBuf,
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with prepare settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    spatial_sigma: Option<f64>,
    #[arg(long)]
    range_sigma: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Directory of supplied line drawings named `<id>.png`.
    #[arg(long)]
    lines_dir: Option<PathBuf>,
    /// Use precomputed edge responses from this directory instead of Sobel + NMS.
    #[arg(long)]
    response_dir: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Any other setting as `key=value`.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (`manifest.toml`) or its directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for checkpoints, the log and the final model.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stop_after_step: Option<u64>,
    #[arg(long)]
    skip_validation: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<u32>,
    #[arg(long)]
    stage1_batch: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<u32>,
    #[arg(long)]
    stage2_batch: Option<usize>,
    #[arg(long)]
    masks_dir: Option<PathBuf>,
    /// Any other config key as `key=value`, e.g. `losses.weights.l1=2`.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for metrics.csv, summary.json and plot_data.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ratio bins in percent.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40, 50])]
    bins: Vec<u32>,
    /// Mask library; procedural masks are used when omitted.
    #[arg(long)]
    masks_dir: Option<PathBuf>,
    /// VGG-19 weights for LPIPS.
    #[arg(long, requires = "lpips_lin")]
    lpips_vgg: Option<PathBuf>,
    /// LPIPS linear heads.
    #[arg(long, requires = "lpips_vgg")]
    lpips_lin: Option<PathBuf>,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    image: PathBuf,
    /// 8-bit mask, 255 = missing.
    #[arg(long)]
    mask: PathBuf,
    /// 8-bit line drawing, 0 = stroke.
    #[arg(long)]
    line: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Model loaded at startup.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = muralfill_service::DEFAULT_MODEL)]
    model_name: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare(a) => prepare(a),
        Command::Fixtures(a) => fixtures(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Inpaint(a) => inpaint(a),
        Command::Serve(a) => serve(a),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(muralfill_core::data::MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Named flags first, then `--set` pairs, so `--set` wins.
fn flag_overrides(flags: &[(&str, Option<String>)], set: &[(String, String)]) -> Vec<(String, String)> {
    flags
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .chain(set.iter().cloned())
        .collect()
}

fn quoted(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("{}", p.display()))?,
        None => PrepareConfig::default(),
    };
    let sets = flag_overrides(
        &[
            ("source", a.source.as_ref().map(|s| format!("{s:?}"))),
            ("spatial_sigma", a.spatial_sigma.map(|v| v.to_string())),
            ("range_sigma", a.range_sigma.map(|v| v.to_string())),
            ("threshold", a.threshold.map(|v| v.to_string())),
            ("lines_dir", quoted(&a.lines_dir)),
            ("val_fraction", a.val_fraction.map(|v| v.to_string())),
        ],
        &a.set,
    );
    let mut cfg: PrepareConfig = overrides::apply(&base, &sets)?;
    if let Some(dir) = a.response_dir {
        cfg.extractor = ExtractorChoice::ResponseFiles { dir };
    }
    let m = prepare_dataset(&a.input, &a.out, &cfg)?;
    println!(
        "{} pairs ({} train, {} val), manifest {}",
        m.entries.len(),
        m.counts.train,
        m.counts.val,
        a.out.join(muralfill_core::data::MANIFEST_FILE).display()
    );
    Ok(())
}

fn fixtures(a: FixturesArgs) -> Result<()> {
    let m = make_fixture_set(&a.out, a.count, a.size, a.seed)?;
    println!("{} fixtures ({} train, {} val) under {}", m.entries.len(), m.counts.train, m.counts.val, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let sets = flag_overrides(
        &[
            ("seed", a.seed.map(|v| v.to_string())),
            ("lr_g", a.lr_g.map(|v| v.to_string())),
            ("lr_d", a.lr_d.map(|v| v.to_string())),
            ("stage1.epochs", a.stage1_epochs.map(|v| v.to_string())),
            ("stage1.batch", a.stage1_batch.map(|v| v.to_string())),
            ("stage2.epochs", a.stage2_epochs.map(|v| v.to_string())),
            ("stage2.batch", a.stage2_batch.map(|v| v.to_string())),
            ("data.masks_dir", quoted(&a.masks_dir)),
        ],
        &a.set,
    );
    let cfg: TrainConfig = overrides::apply(&base, &sets)?;
    cfg.validate()?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let manifest = DatasetManifest::load(&manifest_path(&a.manifest))?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?).with_context(|| a.out.display().to_string())?;
    let outcome = train(
        &manifest,
        &cfg,
        &TrainOptions {
            out_dir: a.out.clone(),
            resume: a.resume,
            stop_after_step: a.stop_after_step,
            skip_validation: a.skip_validation,
        },
    )?;
    let p = &outcome.trainer.state.progress;
    println!(
        "{} at step {} (stage {}), {} checkpoints, best validation PSNR {}",
        if outcome.finished { "finished" } else { "stopped" },
        p.step,
        p.stage,
        outcome.checkpoints.len(),
        p.best_val_psnr.map_or("n/a".to_string(), |v| format!("{v:.2} dB"))
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&manifest_path(&a.manifest))?;
    let bins = a
        .bins
        .iter()
        .map(|&p| RatioBin::from_percent(p).with_context(|| format!("{p} is not a ratio bin (10, 20, 30, 40 or 50)")))
        .collect::<Result<Vec<_>>>()?;
    let masks = match &a.masks_dir {
        None => MaskSource::Procedural,
        Some(dir) => {
            let first = manifest
                .entries(SplitTag::Val)
                .next()
                .context("the manifest has no validation entries")?;
            let (img, _) = manifest.load_pair(first)?;
            let m = bundle.config.size_multiple();
            let (h, w) = (img.height() / m * m, img.width() / m * m);
            MaskSource::Library(MaskLibrary::load_dir(dir, h, w)?)
        }
    };
    let lpips = match (&a.lpips_vgg, &a.lpips_lin) {
        (Some(v), Some(l)) => Some(Lpips::load(v, l)?),
        _ => None,
    };
    let report = evaluate_manifest(
        &bundle,
        &manifest,
        &EvalOptions {
            bins,
            seed: a.seed,
            masks,
        },
        lpips.as_ref(),
    )?;
    report.write(&a.out)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    for agg in &report.per_bin {
        println!(
            "{:>4}  n={:<4} mse {:.5}  psnr {}  ssim {:.4}",
            agg.ratio_bin.map_or("all".to_string(), |b| b.to_string()),
            agg.count,
            agg.mse,
            agg.psnr.map_or("inf".to_string(), |v| format!("{v:.2}")),
            agg.ssim
        );
    }
    println!("reports written to {}", a.out.display());
    Ok(())
}

fn inpaint(a: InpaintArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let image = RawMural::load(&a.image, MuralSource::Real)?;
    let mask = Mask::load(&a.mask)?;
    let line = LineDrawing::load(&a.line, LineProvenance::ManualCompleted)?;
    let dims = |what: &str, d: (usize, usize)| format!("{what} {}x{}", d.0, d.1);
    let sizes = [
        dims("image", (image.height(), image.width())),
        dims("mask", mask.dims()),
        dims("line", line.dims()),
    ];
    if mask.dims() != (image.height(), image.width()) || line.dims() != mask.dims() {
        bail!("input sizes differ: {}", sizes.join(", "));
    }
    if mask.is_empty() {
        log::warn!("the mask has no holes; the output equals the input");
    }
    let out = bundle.inpaint_pixels(image.pixels(), &line, &mask)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
    }
    std::fs::write(&a.out, encode_rgb_png(&out)?).with_context(|| a.out.display().to_string())?;
    println!("{} ({:.1}% filled)", a.out.display(), 100.0 * mask.hole_fraction());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut registry = Registry::new();
    if let Some(ckpt) = &a.checkpoint {
        registry.register(&a.model_name, ckpt)?;
        registry.load(&a.model_name)?;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(muralfill_service::serve(SocketAddr::new(a.host, a.port), AppState::new(registry)))?;
    Ok(())
}
