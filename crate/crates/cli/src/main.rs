use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use mono3d::backbone::Variant;
use mono3d::checkpoint;
use mono3d::config::{RunConfig, ThresholdSet};
use mono3d::eval::evaluate_split;
use mono3d::geometry::CameraCalib;
use mono3d::gradsuite::{run_suite, ComponentCheck, GRAD_EPS, GRAD_TOLERANCE};
use mono3d::kitti::{frame_id, parse_calib_file, read_ppm, write_ppm, write_predictions, KittiDir};
use mono3d::model::Detector;
use mono3d::nn::ParamStore;
use mono3d::render::{overlay, PREDICTION_COLOR};
use mono3d::tensor::{OpKind, Tensor};
use mono3d::train::{loss_csv, synth_dataset, train, TrainError};

#[derive(Parser)]
#[command(name = "mono3d", version, about = "Monocular 3D object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand; they override values from `--config`.
#[derive(Args)]
struct Common {
    /// Flat JSON run config; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["desk", "b1", "b2"])]
    variant: Option<String>,
    /// Skip the attention branch of every encoder block.
    #[arg(long, global = true)]
    no_attention: bool,
    #[arg(long, global = true, value_parser = ["official", "relaxed"])]
    thresholds: Option<String>,
    /// Maximum number of heatmap peaks per image.
    #[arg(long, global = true, value_name = "INT")]
    k: Option<usize>,
    /// Minimum heatmap peak value.
    #[arg(long, global = true, value_name = "REAL")]
    score_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every op and of the desk network.
    Gradcheck {
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt the backward rule of one op (negative control).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train the desk model on synthetic scenes.
    TrainToy {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Detect objects and write KITTI predictions plus overlays.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// KITTI-style directory (image_2/, calib/); every frame is processed.
        #[arg(long, value_name = "DIR", conflicts_with = "image")]
        data: Option<PathBuf>,
        /// Single PPM image; needs --calib.
        #[arg(long, value_name = "PATH", requires = "calib")]
        image: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "image")]
        calib: Option<PathBuf>,
    },
    /// AP|R40 of a prediction directory against KITTI-style ground truth.
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        /// Directory with label_2/ and calib/.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Render synthetic scenes as a KITTI-style directory.
    Synth {
        #[arg(long)]
        images: Option<usize>,
    },
}

/// Error with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Check(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gradcheck { .. } => "gradcheck",
        Command::TrainToy { .. } => "train-toy",
        Command::Infer { .. } => "infer",
        Command::Eval { .. } => "eval",
        Command::Synth { .. } => "synth",
    }
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    cfg.command = Some(command_name(&cli.command).to_string());
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.parse::<Variant>().map_err(|e| usage(anyhow!(e)))?;
    }
    if c.no_attention {
        cfg.attention_enabled = false;
    }
    if let Some(t) = &c.thresholds {
        cfg.thresholds = if t == "relaxed" { ThresholdSet::Relaxed } else { ThresholdSet::Official };
    }
    if let Some(k) = c.k {
        cfg.k = k;
    }
    if let Some(s) = c.score_threshold {
        cfg.score_threshold = s;
    }
    match &cli.command {
        Command::TrainToy { epochs, images, batch_size } => {
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.num_images = images.unwrap_or(cfg.num_images);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
        }
        Command::Infer { checkpoint, data, .. } => {
            cfg.checkpoint = checkpoint.clone().or(cfg.checkpoint);
            cfg.data_dir = data.clone().or(cfg.data_dir);
        }
        Command::Eval { pred, data } => {
            cfg.pred_dir = pred.clone().or(cfg.pred_dir);
            cfg.data_dir = data.clone().or(cfg.data_dir);
        }
        Command::Synth { images } => cfg.num_images = images.unwrap_or(cfg.num_images),
        Command::Gradcheck { .. } => {}
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let p = cfg.out_dir.join("config.json");
    fs::write(&p, cfg.to_json()).with_context(|| format!("writing {}", p.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck(cfg: &RunConfig, seeds: u64, fault: Option<&str>) -> Outcome {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf).map(|k| k.name()).collect();
            usage(anyhow!("unknown op `{name}` (one of: {})", names.join(", ")))
        })?),
    };
    if seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let start = Instant::now();
    let mut worst: Vec<(ComponentCheck, u64)> = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds {
        let checks = run_suite(seed, fault).map_err(|e| anyhow!("seed {seed}: {e}"))?;
        for c in checks {
            match worst.iter_mut().find(|(w, _)| w.name == c.name) {
                Some((w, s)) => {
                    let (checked, skipped) = (w.checked + c.checked, w.skipped + c.skipped);
                    if c.max_rel_error > w.max_rel_error {
                        *w = c;
                        *s = seed;
                    }
                    w.checked = checked;
                    w.skipped = skipped;
                }
                None => worst.push((c, seed)),
            }
        }
    }
    let mut report = format!("eps {GRAD_EPS:e}, tolerance {GRAD_TOLERANCE:e}, seeds {}..{}\n", cfg.seed, cfg.seed + seeds);
    report.push_str(&format!("{:<16} {:>12} {:>8} {:>8}  {:<6} worst sample\n", "component", "max_rel_err", "checked", "skipped", "status"));
    let mut failed = Vec::new();
    for (c, seed) in &worst {
        let status = if c.passed() { "ok" } else { "FAIL" };
        if !c.passed() {
            failed.push(c.name.clone());
        }
        report.push_str(&format!(
            "{:<16} {:>12.3e} {:>8} {:>8}  {:<6} seed {seed} {} (analytic {:.6e}, numeric {:.6e})\n",
            c.name, c.max_rel_error, c.checked, c.skipped, status, c.worst, c.worst_values.0, c.worst_values.1
        ));
    }
    report.push_str(&format!("elapsed {:.1} s\n", start.elapsed().as_secs_f64()));
    print!("{report}");
    write(&cfg.out_dir.join("gradcheck.txt"), &report)?;
    if failed.is_empty() {
        println!("all {} components passed", worst.len());
        Ok(())
    } else {
        Err(Failure::Check(anyhow!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn train_toy(cfg: &RunConfig) -> Outcome {
    let data = synth_dataset(&cfg.scene(), cfg.seed);
    let dir = KittiDir::new(cfg.out_dir.join("train"));
    for (i, (img, lab)) in data.images.iter().zip(&data.labels).enumerate() {
        dir.save_frame(&frame_id(i), img, lab, &data.calib).context("saving training frame")?;
    }
    let model = cfg.model();
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &model, cfg.seed).context("building model")?;
    println!(
        "training {} ({} parameters) on {} images of {}×{} for {} epochs",
        model.variant,
        store.num_scalars(),
        data.len(),
        cfg.image_height,
        cfg.image_width,
        cfg.epochs
    );
    let start = Instant::now();
    let every = (cfg.epochs / 20).max(1);
    let tc = cfg.train();
    let result = train(&det, &mut store, &data, &tc, |r| {
        if r.epoch % every == 0 || r.epoch + 1 == tc.epochs {
            println!(
                "epoch {:>4}  lr {:.3e}  heatmap {:.4}  depth {:.4}  weights ({:.2}, {:.2}, {:.2})  {:.0} s",
                r.epoch,
                r.lr,
                r.terms[0],
                r.terms[7],
                r.weights[0],
                r.weights[3],
                r.weights[7],
                start.elapsed().as_secs_f64()
            );
        }
    });
    let history = match result {
        Ok(h) => h,
        Err(e @ TrainError::NonFinite { .. }) => return Err(Failure::Check(anyhow!(e))),
        Err(e) => return Err(Failure::Check(anyhow!(e).context("training"))),
    };
    write(&cfg.out_dir.join("loss.csv"), loss_csv(&history))?;
    let ckpt = cfg.out_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt, &store, &model).context("saving checkpoint")?;
    let first = history[0].terms[0];
    let last = history.last().expect("at least one epoch").terms[0];
    println!("heatmap loss {first:.4} → {last:.4} ({:.1}% of epoch 0)", 100.0 * last / first);
    println!("wrote {}, {} and {}", ckpt.display(), cfg.out_dir.join("loss.csv").display(), dir.root.display());
    Ok(())
}

/// `(id, image, calib)` triples to run inference on.
fn infer_inputs(cfg: &RunConfig, image: Option<&Path>, calib: Option<&Path>) -> anyhow::Result<Vec<(String, Tensor, CameraCalib)>> {
    if let (Some(img), Some(cal)) = (image, calib) {
        let bytes = fs::read(img).with_context(|| format!("reading {}", img.display()))?;
        let t = read_ppm(&bytes).with_context(|| format!("decoding {}", img.display()))?;
        let text = fs::read_to_string(cal).with_context(|| format!("reading {}", cal.display()))?;
        let c = parse_calib_file(&text).with_context(|| format!("parsing {}", cal.display()))?;
        let id = img.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        return Ok(vec![(id, t, c)]);
    }
    if let Some(root) = &cfg.data_dir {
        let dir = KittiDir::new(root);
        let mut out = Vec::new();
        for id in dir.frame_ids()? {
            out.push((id.clone(), dir.load_image(&id)?, dir.load_calib(&id)?));
        }
        if out.is_empty() {
            bail!("no images in {}", dir.root.join("image_2").display());
        }
        return Ok(out);
    }
    let data = synth_dataset(&cfg.scene(), cfg.seed);
    Ok(data.images.into_iter().enumerate().map(|(i, t)| (frame_id(i), t, data.calib.clone())).collect())
}

fn infer(cfg: &RunConfig, image: Option<&Path>, calib: Option<&Path>) -> Outcome {
    let ckpt = cfg.checkpoint.clone().ok_or_else(|| usage(anyhow!("infer needs --checkpoint")))?;
    let model = cfg.model();
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &model, cfg.seed).context("building model")?;
    checkpoint::load(&ckpt, &mut store, &model).with_context(|| format!("loading {}", ckpt.display()))?;
    let inputs = infer_inputs(cfg, image, calib)?;
    let opts = cfg.decode();
    let mut total = 0;
    for (id, img, cal) in &inputs {
        let s = img.shape();
        let inf = det.detect(&store, img, cal, &opts).with_context(|| format!("frame {id}"))?;
        let pred = write_predictions(&inf.detections, cal, (s[1], s[2]));
        write(&cfg.out_dir.join("pred").join(format!("{id}.txt")), &pred.text)?;
        let boxes: Vec<_> = inf.detections.iter().map(|d| d.to_box3d()).collect();
        let ov = overlay(img, &boxes, cal, PREDICTION_COLOR);
        write(&cfg.out_dir.join("overlay").join(format!("{id}.ppm")), write_ppm(&ov).context("encoding overlay")?)?;
        println!(
            "{id}: {} detections ({} peaks, {} not lifted, {} not written)",
            inf.detections.len(),
            inf.peaks.len(),
            inf.dropped,
            pred.skipped
        );
        total += inf.detections.len();
    }
    println!("{total} detections in {} frames; predictions in {}", inputs.len(), cfg.out_dir.join("pred").display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Outcome {
    let pred = cfg.pred_dir.clone().ok_or_else(|| usage(anyhow!("eval needs --pred")))?;
    let data = cfg.data_dir.clone().ok_or_else(|| usage(anyhow!("eval needs --data")))?;
    let sets = [cfg.thresholds.config(), cfg.thresholds.other().config()];
    let res = evaluate_split(&pred, &data.join("label_2"), Some(&data.join("calib")), &sets).map_err(|e| Failure::Check(anyhow!(e)))?;
    for issue in &res.issues {
        eprintln!("warning: {issue}");
    }
    let mut table = format!("{} frames evaluated, {} issues\n", res.frames, res.issues.len());
    let mut records = String::new();
    for r in &res.reports {
        table.push_str(&r.to_table());
        records.push_str(&r.to_records());
    }
    print!("{table}");
    write(&cfg.out_dir.join("eval.txt"), &table)?;
    write(&cfg.out_dir.join("eval_records.txt"), &records)?;
    write(&cfg.out_dir.join("eval_issues.txt"), res.issues.join("\n") + "\n")?;
    Ok(())
}

fn synth(cfg: &RunConfig) -> Outcome {
    let data = synth_dataset(&cfg.scene(), cfg.seed);
    let dir = KittiDir::new(&cfg.out_dir);
    let mut objects = 0;
    for (i, (img, lab)) in data.images.iter().zip(&data.labels).enumerate() {
        dir.save_frame(&frame_id(i), img, lab, &data.calib).context("saving frame")?;
        objects += lab.len();
    }
    println!("wrote {} frames with {objects} objects to {}", data.len(), dir.root.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve(&cli)?;
    prepare_out(&cfg)?;
    match &cli.command {
        Command::Gradcheck { seeds, inject_fault } => gradcheck(&cfg, *seeds, inject_fault.as_deref()),
        Command::TrainToy { .. } => train_toy(&cfg),
        Command::Infer { image, calib, .. } => infer(&cfg, image.as_deref(), calib.as_deref()),
        Command::Eval { .. } => eval(&cfg),
        Command::Synth { .. } => synth(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}
