use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use specsplat::appearance::{AppearanceField, AppearanceMode};
use specsplat::imaging::Image;
use specsplat::io::checkpoint::{load_checkpoint, save_checkpoint, Model};
use specsplat::io::config::{parse_rgb, RunConfig, Variant};
use specsplat::io::dataset::{load_nerf_synthetic, Dataset, Split};
use specsplat::io::init::reset_appearance;
use specsplat::io::pipeline::{initial_gaussians, initial_model, render_model, train_model};
use specsplat::io::synth::{generate_aniso_scene, write_scene, AnisoSceneSpec};
use specsplat::scene::Scene;
use specsplat::trainer::{log_to_csv, psnr, ssim, LogRecord};

const THREADS_ENV: &str = "SPECSPLAT_THREADS";

#[derive(Parser)]
#[command(name = "specsplat", version, about = "Gaussian splatting with an anisotropic spherical Gaussian appearance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Anchor,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a NeRF-synthetic style dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum)]
        c2f: Option<Switch>,
        #[arg(long)]
        tau_g: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Background color as r,g,b in [0, 1].
        #[arg(long)]
        background: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
        /// Write the training log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one dataset camera from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        camera_index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset providing the cameras; defaults to the one used for training.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Print per-view PSNR and SSIM of a checkpoint as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train SH-only and ASG-field models with matched budgets and compare them.
    AblateAsg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the procedural anisotropic scene as a dataset.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train {
            data,
            out,
            config,
            variant,
            c2f,
            tau_g,
            seed,
            background,
            iters,
            log,
        } => {
            let mut run = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(v) = variant {
                run.variant = match v {
                    VariantArg::Vanilla => Variant::Vanilla,
                    VariantArg::Anchor => Variant::Anchor,
                };
            }
            if let Some(s) = c2f {
                run.train.c2f_enabled = matches!(s, Switch::On);
            }
            if let Some(t) = tau_g {
                run.train.densify_threshold = t;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            if let Some(b) = background {
                run.train.background = parse_rgb(&b).map_err(anyhow::Error::msg).context("--background")?;
            }
            if let Some(n) = iters {
                run.train.total_iters = n;
                if run.train.c2f_tau > n {
                    run.train.c2f_tau = n;
                }
            }
            train_cmd(run, &data, &out, log.as_deref())
        }
        Command::Render {
            ckpt,
            camera_index,
            out,
            data,
            split,
        } => render_cmd(&ckpt, camera_index, &out, data.as_deref(), split.into()),
        Command::Eval { ckpt, data, split } => eval_cmd(&ckpt, &data, split.into()),
        Command::AblateAsg {
            data,
            config,
            iters,
            seed,
        } => ablate_cmd(&data, config.as_deref(), iters, seed),
        Command::GenScene { seed, out, resolution } => {
            let mut spec = AnisoSceneSpec::default();
            if let Some(r) = resolution {
                spec.width = r;
                spec.height = r;
            }
            let scene = generate_aniso_scene(seed, &spec)?;
            write_scene(&out, &scene)?;
            println!(
                "wrote {} train and {} test views of {}x{} to {}",
                scene.train.len(),
                scene.eval.len(),
                spec.width,
                spec.height,
                out.display()
            );
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path, background: [f64; 3]) -> Result<Dataset> {
    Ok(load_nerf_synthetic(dir, background)?)
}

fn progress(total: usize, every: usize) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| {
        if r.iteration.is_multiple_of(every) || r.iteration == total {
            let p = r.psnr_holdout.map(|p| format!(" holdout PSNR {p:.2} dB")).unwrap_or_default();
            eprintln!(
                "iter {:>6}/{total} loss {:.5} gaussians {} at {}x{}{p}",
                r.iteration, r.loss, r.num_gaussians, r.width, r.height
            );
        }
    }
}

fn train_cmd(mut run: RunConfig, data: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let data = data.canonicalize().with_context(|| format!("{}", data.display()))?;
    run.data_dir = Some(data.clone());
    run.train.validate()?;
    let dataset = load_dataset(&data, run.train.background)?;
    let views = dataset.views(Split::Train);
    let holdout = dataset.views(Split::Test);
    let model = initial_model(&run, Some(&data))?;
    let start = Instant::now();
    let mut obs = progress(run.train.total_iters, run.train.eval_interval);
    let (ckpt, log) = train_model(model, &views, &holdout, &run, &mut obs)?;
    save_checkpoint(out, &ckpt)?;
    if let Some(p) = log_path {
        std::fs::write(p, log_to_csv(&log)).with_context(|| format!("{}", p.display()))?;
    }
    eprintln!("trained in {:.1} s, checkpoint {}", start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn render_cmd(ckpt_path: &Path, index: usize, out: &Path, data: Option<&Path>, split: Split) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let dir = match data.map(Path::to_path_buf).or_else(|| ckpt.config.data_dir.clone()) {
        Some(d) => d,
        None => bail!("{} records no dataset; pass --data", ckpt_path.display()),
    };
    let dataset = load_dataset(&dir, ckpt.config.train.background)?;
    let frames = dataset.frames(split);
    let Some(frame) = frames.get(index) else {
        bail!("camera index {index} out of range, the split has {} cameras", frames.len());
    };
    render_model(&ckpt.model, &frame.camera, ckpt.config.train.background).save_png(out)?;
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn eval_cmd(ckpt_path: &Path, data: &Path, split: Split) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let bg = ckpt.config.train.background;
    let dataset = load_dataset(data, bg)?;
    let frames = dataset.frames(split);
    if frames.is_empty() {
        bail!("{}: the split has no frames", data.display());
    }
    println!("view,file_path,psnr,ssim");
    let (mut total_p, mut total_s) = (0.0, 0.0);
    for (i, f) in frames.iter().enumerate() {
        let img = Image::from(&render_model(&ckpt.model, &f.camera, bg)).clamped();
        let p = psnr(&img, &f.image)?;
        let s = ssim(&img, &f.image)?;
        total_p += p;
        total_s += s;
        println!("{i},{},{},{}", f.file_path, fmt_metric(p), fmt_metric(s));
    }
    let n = frames.len() as f64;
    println!("mean,,{},{}", fmt_metric(total_p / n), fmt_metric(total_s / n));
    Ok(())
}

/// Model results of one ablation arm.
struct Arm {
    psnr: f64,
    ssim: f64,
    gaussians: usize,
    seconds: f64,
}

fn ablate_cmd(data: &Path, config: Option<&Path>, iters: usize, seed: u64) -> Result<()> {
    let mut run = RunConfig::default();
    run.train.total_iters = iters;
    run.train.densify_enabled = false;
    run.train.c2f_enabled = false;
    run.train.seed = seed;
    if let Some(p) = config {
        let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
        run.apply_text(&text, p)?;
    }
    if run.variant != Variant::Vanilla {
        bail!("ablate-asg compares explicit-Gaussian models; set variant = vanilla");
    }
    let seed = run.train.seed;
    let dataset = load_dataset(data, run.train.background)?;
    let views = dataset.views(Split::Train);
    let holdout = dataset.views(Split::Test);
    let mut gs = initial_gaussians(&run, Some(data))?;
    reset_appearance(&mut gs, seed);

    let mut arms = Vec::new();
    for mode in [AppearanceMode::ShOnly, AppearanceMode::AsgField] {
        let mut arm_run = run.clone();
        arm_run.train.appearance = mode;
        let scene = Scene::new(gs.clone(), AppearanceField::new(mode, seed)?);
        let start = Instant::now();
        let mut obs = progress(arm_run.train.total_iters, arm_run.train.eval_interval);
        let (ckpt, _) = train_model(Model::Vanilla(scene), &views, &[], &arm_run, &mut obs)?;
        let seconds = start.elapsed().as_secs_f64();
        let (mut p, mut s) = (0.0, 0.0);
        for v in &holdout {
            let img = Image::from(&render_model(&ckpt.model, &v.camera, run.train.background)).clamped();
            p += psnr(&img, &v.image)?;
            s += ssim(&img, &v.image)?;
        }
        let n = holdout.len() as f64;
        let gaussians = match &ckpt.model {
            Model::Vanilla(scene) => scene.len(),
            Model::Anchor(_) => unreachable!("ablation trains explicit Gaussians"),
        };
        arms.push(Arm {
            psnr: p / n,
            ssim: s / n,
            gaussians,
            seconds,
        });
    }
    println!("model,psnr,ssim,gaussians,iterations,seconds");
    for (name, a) in ["sh", "asg"].iter().zip(&arms) {
        println!(
            "{name},{},{},{},{},{:.1}",
            fmt_metric(a.psnr),
            fmt_metric(a.ssim),
            a.gaussians,
            run.train.total_iters,
            a.seconds
        );
    }
    println!("asg_minus_sh_db,{:.4}", arms[1].psnr - arms[0].psnr);
    Ok(())
}
