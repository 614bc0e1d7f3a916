//! The `segcam` command: data generation, training, evaluation, explanation,
//! layer sweeps, gradient self-checks and the HTTP service.
//!
//! Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use segcam::checkpoint::{Checkpoint, TrainingMeta};
use segcam::data::{self, DatasetSpec, CLASS_NAMES};
use segcam::explain::{layer_sweep, saliency_map, seg_grad_cam};
use segcam::graph::BackwardFault;
use segcam::gradcheck::{run_suite, GradCheckConfig};
use segcam::train::{self, TrainConfig};
use segcam::{pnm, render, ExplainRequest, Model, PixelSet, SegmentationNet, Tensor, UNetConfig};

#[derive(Debug, Parser)]
#[command(name = "segcam", version, about = "Seg-Grad-CAM workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a U-Net and write a checkpoint.
    Train(TrainArgs),
    /// Pixel accuracy and IoU of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for predicted masks (`<id>.pgm`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seg-Grad-CAM heatmap for one class, tap and pixel set.
    Explain {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        layer: String,
        /// Overlay image (PPM).
        #[arg(long)]
        out: PathBuf,
        /// Raw tap-resolution heatmap as CSV.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Input-gradient saliency overlay (PPM).
        #[arg(long)]
        saliency: Option<PathBuf>,
    },
    /// One overlay per tap plus report.csv.
    Sweep {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule in f64.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random draws per check.
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Serve the HTTP API (and optionally the explorer UI).
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// JSON-lines epoch log; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("pixels").required(true).multiple(false))]
struct Target {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long = "class")]
    class_id: usize,
    /// Single pixel `I,J`.
    #[arg(long, group = "pixels", value_parser = parse_point)]
    point: Option<(usize, usize)>,
    /// Inclusive rectangle `I0,J0,I1,J1`.
    #[arg(long, group = "pixels", value_parser = parse_rect)]
    rect: Option<[usize; 4]>,
    #[arg(long, group = "pixels")]
    all: bool,
    /// Every pixel predicted as this class.
    #[arg(long, group = "pixels")]
    predicted: Option<usize>,
}

impl Target {
    fn pixel_set(&self) -> PixelSet {
        if let Some((i, j)) = self.point {
            PixelSet::Single { i, j }
        } else if let Some([i0, j0, i1, j1]) = self.rect {
            PixelSet::Rect { i0, j0, i1, j1 }
        } else if let Some(class_id) = self.predicted {
            PixelSet::PredictedClass { class_id }
        } else {
            PixelSet::All
        }
    }

    fn load(&self) -> Result<(Model<f32>, Tensor<f32>)> {
        let ckpt = load_checkpoint(&self.ckpt)?;
        let bytes = fs::read(&self.image).with_context(|| format!("reading {}", self.image.display()))?;
        let image = pnm::read_ppm(&bytes).with_context(|| format!("decoding {}", self.image.display()))?;
        Ok((ckpt.model, image))
    }
}

fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated integers, got `{s}`"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a non-negative integer"))?;
    }
    Ok(out)
}

fn parse_point(s: &str) -> Result<(usize, usize), String> {
    parse_list::<2>(s).map(|[i, j]| (i, j))
}

fn parse_rect(s: &str) -> Result<[usize; 4], String> {
    parse_list::<4>(s)
}

/// Marks an error as a usage error (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, count, size, out } => gen_data(seed, count, size, &out),
        Command::Train(args) => train_cmd(&args),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, out.as_deref()),
        Command::Explain { target, layer, out, raw, saliency } => {
            explain(&target, &layer, &out, raw.as_deref(), saliency.as_deref())
        }
        Command::Sweep { target, out } => sweep(&target, &out),
        Command::Gradcheck { seed, seeds, corrupt_backward } => gradcheck(seed, seeds as usize, corrupt_backward),
        Command::Serve { ckpt, data, port, host, static_dir } => serve(&ckpt, &data, &host, port, static_dir),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(seed: u64, count: usize, size: usize, out: &Path) -> Result<()> {
    let spec = DatasetSpec { seed, count, size };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let samples = data::generate(&spec)?;
    let manifest = data::write_dataset(out, &spec, &samples)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: args.epochs as usize,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let config = UNetConfig {
        base_channels: args.base_channels,
        depth: args.depth,
        num_classes: CLASS_NAMES.len(),
        ..UNetConfig::default()
    };
    config.validate().map_err(|e| Usage(e.to_string()))?;

    let (manifest, samples) = data::read_dataset(&args.data)
        .with_context(|| format!("reading dataset {}", args.data.display()))?;
    config.check_input_size(manifest.size, manifest.size)?;
    let model = Model::init(config, args.seed)?;

    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut log = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut log_err = None;
    let (model, history) = train::train(model, &samples, &cfg, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  acc {:.4}  miou {:.4}",
            m.epoch, m.loss, m.pixel_accuracy, m.mean_iou
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing metrics log");
    }
    log.flush()?;

    let last = history.last().expect("at least one epoch");
    let ckpt = Checkpoint {
        model,
        class_names: manifest.class_names.clone(),
        training: Some(TrainingMeta {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            samples: samples.len(),
            image_size: manifest.size,
            final_loss: last.loss,
            final_pixel_accuracy: last.pixel_accuracy,
            final_mean_iou: last.mean_iou,
        }),
    };
    ckpt.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("pixel accuracy {:.4}", last.pixel_accuracy);
    println!("mean IoU {:.4}", last.mean_iou);
    Ok(())
}

fn eval(ckpt: &Path, data_dir: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let (_, samples) = data::read_dataset(data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let predictions = train::predict_all(&ckpt.model, &samples)?;
    let mut cm = train::ConfusionMatrix::new(ckpt.model.num_classes());
    for (pred, s) in predictions.iter().zip(&samples) {
        cm.add(pred.ids(), s.mask.ids())?;
    }
    let m = cm.metrics();
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (pred, s) in predictions.iter().zip(&samples) {
            fs::write(dir.join(format!("{}.pgm", s.id)), pnm::write_pgm(pred))?;
        }
    }
    println!("pixel accuracy {:.4}", m.pixel_accuracy);
    println!("mean IoU {:.4}", m.mean_iou);
    for (c, iou) in m.per_class_iou.iter().enumerate() {
        let name = ckpt.class_names.get(c).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => println!("  IoU {c} {name}: {v:.4}"),
            None => println!("  IoU {c} {name}: n/a"),
        }
    }
    Ok(())
}

/// Row-major CSV, one tap row per line, shortest round-trip float text.
fn raw_csv(raw: &Tensor<f32>) -> Result<String> {
    let [_, w] = raw.dims2("raw_csv")?;
    let mut s = String::new();
    for row in raw.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, pnm::write_ppm(image)?).with_context(|| format!("writing {}", path.display()))
}

fn explain(target: &Target, layer: &str, out: &Path, raw: Option<&Path>, saliency: Option<&Path>) -> Result<()> {
    let (model, image) = target.load()?;
    let request = ExplainRequest::new(target.class_id, layer, target.pixel_set());
    let heat = seg_grad_cam(&model, &image, &request)?;
    let mut overlay = render::colorize_overlay(&image, &heat.upsampled)?;
    if let Some((i, j)) = target.point {
        overlay = render::mark_pixel(&overlay, i, j)?;
    }
    let sal = match saliency {
        Some(_) => Some(render::colorize_overlay(&image, &saliency_map(&model, &image, &request)?)?),
        None => None,
    };
    write_ppm(out, &overlay)?;
    if let Some(path) = raw {
        fs::write(path, raw_csv(&heat.raw)?).with_context(|| format!("writing {}", path.display()))?;
    }
    if let (Some(path), Some(sal)) = (saliency, sal) {
        write_ppm(path, &sal)?;
    }
    let [u, v] = heat.raw.dims2("explain")?;
    println!(
        "{} class {} {}: tap {u}x{v}, max raw {:e}",
        layer,
        target.class_id,
        request.pixel_set,
        heat.raw.max_value()
    );
    Ok(())
}

fn sweep(target: &Target, out: &Path) -> Result<()> {
    let (model, image) = target.load()?;
    let ps = target.pixel_set();
    let rows = layer_sweep(&model, &image, target.class_id, &ps)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut report = String::from("tap,tap_height,tap_width,max_raw,logit_similarity,edge_similarity\n");
    for row in &rows {
        let h = &row.heatmap;
        let mut overlay = render::colorize_overlay(&image, &h.upsampled)?;
        if let Some((i, j)) = target.point {
            overlay = render::mark_pixel(&overlay, i, j)?;
        }
        write_ppm(&out.join(format!("{}.ppm", h.tap)), &overlay)?;
        let [u, v] = h.raw.dims2("sweep")?;
        report.push_str(&format!(
            "{},{u},{v},{},{},{}\n",
            h.tap,
            h.raw.max_value(),
            row.logit_similarity,
            row.edge_similarity
        ));
        println!(
            "{:<18} logit {:+.3}  edge {:+.3}",
            h.tap, row.logit_similarity, row.edge_similarity
        );
    }
    fs::write(out.join("report.csv"), report)?;
    Ok(())
}

fn gradcheck(seed: u64, seeds: usize, corrupt: bool) -> Result<()> {
    let cfg = GradCheckConfig {
        seed,
        seeds,
        fault: corrupt.then_some(BackwardFault::ReluPassThrough),
        ..GradCheckConfig::default()
    };
    let report = run_suite(&cfg)?;
    for c in &report.categories {
        println!(
            "{:<12} max rel error {:.3e}  ({} checks, {} skipped at kinks)",
            c.name, c.max_rel_error, c.checks, c.skipped_kinks
        );
    }
    println!(
        "max rel error {:.3e} (tolerance {:e}), {:.1}s",
        report.max_rel_error(),
        report.tolerance,
        report.elapsed.as_secs_f64()
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn serve(ckpt: &Path, data_dir: &Path, host: &str, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let state = segcam_service::AppState::load(ckpt, data_dir)
        .with_context(|| format!("loading {} with {}", ckpt.display(), data_dir.display()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let app = segcam_service::router(Arc::new(state), static_dir);
        segcam_service::serve(listener, app).await?;
        Ok(())
    })
}
