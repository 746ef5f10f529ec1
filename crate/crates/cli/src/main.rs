//! `tio`: data generation, training, evaluation and inference for the two-in-one depth model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use tio_core::data::{load_png_rgb, read_split, write_split, SceneConfig, Split};
use tio_core::disparity::disparity_to_depth_tensor;
use tio_core::eval::{evaluate, export_depth, mean_report, write_csv, D1Rule, DepthEval, EvalOptions, MetricRow, Mode};
use tio_core::network::Network;
use tio_core::tensor::io::Archive;
use tio_core::training::{checkpoint_mono_branch, checkpoint_rig, TrainConfig, Trainer};
use tio_core::{CameraRig, Tensor};

#[derive(Parser, Debug)]
#[command(name = "tio", version, about = "Two-in-one monocular/binocular depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Mono,
    Stereo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum D1Arg {
    Either,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a split of synthetic stereo scenes.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// TOML scene settings; defaults to 64×128 ground-plane-and-boxes scenes.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        b_min: f64,
        #[arg(long, default_value_t = 24.0)]
        b_max: f64,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `latest.tioc` in the configured checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint over a generated split and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Paths to evaluate; both when omitted.
        #[arg(long, value_enum)]
        mode: Vec<ModeArg>,
        #[arg(long)]
        csv_out: PathBuf,
        /// Depth cap in metres; defaults to the depth of the smallest disparity level.
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long, value_enum, default_value = "either")]
        d1: D1Arg,
        /// Also write one row per sample.
        #[arg(long)]
        per_sample: bool,
    },
    /// Depth from a single image.
    InferMono {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output stem: writes `<out>.tiot` and `<out>.png`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cap: Option<f64>,
    },
    /// Depth from a rectified stereo pair.
    InferStereo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cap: Option<f64>,
    },
}

struct Loaded {
    net: Network<f32>,
    archive: Archive<f32>,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let (net, archive) = Network::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok(Self { net, archive })
    }

    fn rig(&self) -> CameraRig {
        checkpoint_rig(&self.archive).unwrap_or_default()
    }

    fn cap(&self, cap: Option<f64>) -> Result<f64> {
        let cap = cap.unwrap_or_else(|| self.rig().bf() / self.net.levels().min());
        if !(cap > 0.0 && cap.is_finite()) {
            bail!("depth cap must be positive, got {cap}");
        }
        Ok(cap)
    }
}

fn image_input(path: &Path) -> Result<Tensor<f32>> {
    let img = load_png_rgb(path).with_context(|| format!("reading {}", path.display()))?;
    let s = img.shape();
    if s[2] % 16 != 0 || s[3] % 16 != 0 {
        bail!("{}: image size {}×{} must be a multiple of 16", path.display(), s[2], s[3]);
    }
    Ok(img)
}

fn gen_data(count: usize, seed: u64, out: &Path, split: SplitArg, scene: Option<&Path>, range: (f64, f64)) -> Result<()> {
    let cfg: SceneConfig = match scene {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SceneConfig::default(),
    };
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    write_split(&cfg, out, count, seed, split, range)?;
    info!("wrote {count} {} samples to {}", split.name(), out.display());
    Ok(())
}

fn train(config: &Path, resume: bool) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let data = cfg.training_data::<f32>().context("loading training data")?;
    let latest = cfg.checkpoint_dir.as_ref().map(|d| d.join("latest.tioc"));
    let mut trainer = match (&latest, resume) {
        (Some(p), true) if p.exists() => {
            info!("resuming from {}", p.display());
            Trainer::resume(cfg, data, p)?
        }
        (_, true) => bail!("--resume needs an existing latest.tioc in the checkpoint directory"),
        _ => Trainer::new(cfg, data)?,
    };
    trainer.train(|s| {
        let parts: Vec<String> = s.means.iter().map(|((step, name), v)| format!("{}:{name}={v:.5}", step.id())).collect();
        info!("epoch {} {}", s.epoch, parts.join(" "));
    })?;
    if trainer.cfg.checkpoint_dir.is_none() {
        log::warn!("no checkpoint_dir configured; the trained weights were not saved");
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, modes: &[ModeArg], csv_out: &Path, cap: Option<f64>, d1: D1Arg, per_sample: bool) -> Result<()> {
    let m = Loaded::open(checkpoint)?;
    let samples = read_split::<f32>(data).with_context(|| format!("reading split {}", data.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", data.display());
    }
    let opts = EvalOptions {
        depth: DepthEval { cap: m.cap(cap)?, ..Default::default() },
        d1: match d1 {
            D1Arg::Either => D1Rule::Either,
            D1Arg::Both => D1Rule::Both,
        },
        ..Default::default()
    };
    let modes = if modes.is_empty() { vec![ModeArg::Mono, ModeArg::Stereo] } else { modes.to_vec() };
    let mut rows = Vec::new();
    for mode in modes {
        let mode = match mode {
            ModeArg::Mono => Mode::Mono,
            ModeArg::Stereo => Mode::Stereo,
        };
        let per = evaluate(&m.net, &samples, mode, checkpoint_mono_branch(&m.archive), &opts)?;
        let reports: Vec<_> = per.iter().map(|r| r.report()).collect();
        let mean = mean_report(&reports)?;
        info!("{mode}: abs_rel {:.4} rmse {:.4} a1 {:.4} epe {:.4} d1 {:.4}", mean.abs_rel, mean.rmse, mean.a1, mean.epe, mean.d1);
        rows.push(MetricRow::new("all".into(), mode, mean));
        if per_sample {
            rows.extend(per);
        }
    }
    if let Some(dir) = csv_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(fs::File::create(csv_out)?, &rows)?;
    Ok(())
}

fn write_depth(m: &Loaded, disp: &Tensor<f32>, out: &Path, cap: Option<f64>) -> Result<()> {
    let depth = disparity_to_depth_tensor(disp, &m.rig())?;
    export_depth(out, &depth, m.cap(cap)?)?;
    info!("wrote {} and {}", out.with_extension("tiot").display(), out.with_extension("png").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { count, seed, out, split, scene, b_min, b_max } => {
            gen_data(count, seed, &out, split, scene.as_deref(), (b_min, b_max))
        }
        Command::Train { config, resume } => train(&config, resume),
        Command::Eval { checkpoint, data, mode, csv_out, cap, d1, per_sample } => {
            eval(&checkpoint, &data, &mode, &csv_out, cap, d1, per_sample)
        }
        Command::InferMono { checkpoint, image, out, cap } => {
            let m = Loaded::open(&checkpoint)?;
            let disp = m.net.predict_mono(&image_input(&image)?, checkpoint_mono_branch(&m.archive))?;
            write_depth(&m, &disp, &out, cap)
        }
        Command::InferStereo { checkpoint, left, right, out, cap } => {
            let m = Loaded::open(&checkpoint)?;
            let (l, r) = (image_input(&left)?, image_input(&right)?);
            if l.shape() != r.shape() {
                bail!("left and right images differ in size");
            }
            let disp = m.net.predict_stereo(&l, &r)?;
            write_depth(&m, &disp, &out, cap)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
