//! The `rvarnet` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and data errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Array4, Axis};
use num_complex::Complex;

use crate::config::Config;
use crate::data::{generate_dataset, read_volume, write_volume, Manifest, Split, Volume, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::evaluation::{default_zoom, evaluate_dataset, split_paths, write_figure, zero_filled_recon, EvaluationReport, Method};
use crate::model::{ModelInput, RecurrentVarNet};
use crate::operators::{apply_mask, fft2c};
use crate::sampling::generate_mask;
use crate::seed::derive_seed;
use crate::training::trainer::{train_loop, TrainOptions, LATEST_CHECKPOINT};
use crate::training::Checkpoint;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const TAG_RECON: u64 = 0xC0;

#[derive(Parser, Debug)]
#[command(name = "rvarnet", version, about = "Recurrent variational network for accelerated multi-coil MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file; defaults apply to every key it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed` from the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a synthetic dataset and write its volumes and manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes best.ckpt, latest.ckpt and metrics.log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (default: `<data.root>/manifest.json`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from `<out>/latest.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        total_iters: Option<u64>,
        #[arg(long)]
        no_ser: bool,
        #[arg(long)]
        no_rsi: bool,
        #[arg(long)]
        share_weights: bool,
        #[arg(long)]
        time_steps: Option<usize>,
        #[arg(long)]
        recurrent_layers: Option<usize>,
        /// Print the training loss every this many iterations (0: never).
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Reconstruct every slice of a volume from sub-sampled k-space.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fully sampled input volume.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        acceleration: f64,
        /// Also write reference | zero-filled | model figures here.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Evaluate reconstruction methods on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `zero-filled` or a checkpoint path; may be repeated.
        #[arg(long, required = true)]
        method: Vec<String>,
        /// Dataset manifest or a single volume file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Acceleration factors (default: `train.accelerations`).
        #[arg(long, value_delimiter = ',')]
        accelerations: Option<Vec<f64>>,
    },
}

/// Loads the configuration, applies the seed override, validates it and prints
/// it.
fn resolve(common: &Common, edit: impl FnOnce(&mut Config)) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    edit(&mut cfg);
    cfg.validate()?;
    cfg.require_seed()?;
    println!("# resolved configuration\n{}", cfg.to_toml_string());
    Ok(cfg)
}

fn manifest_path(cfg: &Config, data: &Option<PathBuf>) -> PathBuf {
    data.clone()
        .unwrap_or_else(|| Path::new(&cfg.data.root).join(MANIFEST_NAME))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = resolve(common, |_| {})?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.root));
    let m = generate_dataset(&cfg.data, cfg.require_seed()?, &out)?;
    let count = |s| m.entries(s).count();
    println!(
        "wrote {} volumes (train {}, val {}, test {}) to {}",
        m.volumes.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    println!(
        "slices: {}  coils: {}  shape: {}x{}  sigma: {}",
        m.total_slices(),
        cfg.data.coils,
        cfg.data.shape[0],
        cfg.data.shape[1],
        cfg.data.sigma
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    data: &Option<PathBuf>,
    resume: bool,
    total_iters: Option<u64>,
    no_ser: bool,
    no_rsi: bool,
    share_weights: bool,
    time_steps: Option<usize>,
    recurrent_layers: Option<usize>,
    log_every: u64,
) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(n) = total_iters {
            c.train.total_iters = n;
        }
        c.model.use_ser &= !no_ser;
        c.model.use_rsi &= !no_rsi;
        c.model.share_weights |= share_weights;
        if let Some(t) = time_steps {
            c.model.time_steps = t;
        }
        if let Some(l) = recurrent_layers {
            c.model.recurrent_layers = l;
        }
    })?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = Manifest::load(&manifest_path(&cfg, data))?;
    let train = crate::data::load_split(&manifest, Split::Train)?;
    let val = crate::data::load_split(&manifest, Split::Val)?;
    let resume = if resume {
        Some(Checkpoint::load(&out.join(LATEST_CHECKPOINT))?)
    } else {
        None
    };
    if let Some(ck) = &resume {
        println!("resuming from iteration {}", ck.iteration);
    }
    let mut on_step = |iter: u64, loss: f64| {
        if log_every > 0 && (iter + 1).is_multiple_of(log_every) {
            println!("iteration {} loss {loss:.6}", iter + 1);
        }
    };
    let mut on_validate = |iter: u64, r: &crate::training::ValidationReport| {
        let per: Vec<String> = r.per_acceleration.iter().map(|(a, s)| format!("R={a}: {s:.4}")).collect();
        println!("validation at {iter}: SSIM {:.4} ({})", r.mean_ssim, per.join(", "));
    };
    let outcome = train_loop(
        &train,
        &val,
        &cfg,
        TrainOptions {
            out_dir: Some(&out),
            resume,
            on_step: Some(&mut on_step),
            on_validate: Some(&mut on_validate),
        },
    )?;
    println!(
        "finished at iteration {}; parameters: {}; best validation SSIM: {}",
        outcome.latest.iteration,
        outcome.latest.params.count(),
        outcome.latest.best_val_ssim.map_or("n/a".to_string(), |s| format!("{s:.4}"))
    );
    Ok(())
}

/// Loads a checkpoint as a model; the checkpoint's own configuration wins for
/// the model architecture.
pub fn load_model(path: &Path) -> Result<(RecurrentVarNet<f32>, Config)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let net = RecurrentVarNet::from_params(ck.config.model.clone(), ck.params)?;
    Ok((net, ck.config))
}

/// Reconstructions are stored as single-coil volumes whose RSS image is the
/// reconstruction, so they can be read back like any other volume.
pub fn images_to_volume(images: &[ndarray::Array2<f32>], seed: u64) -> Result<Volume> {
    let (ny, nx) = images.first().map(|i| i.dim()).ok_or_else(|| Error::EmptyDataset("no slices".into()))?;
    let mut kspace = Array4::<Complex<f32>>::zeros((images.len(), 1, ny, nx));
    for (s, img) in images.iter().enumerate() {
        let plane = img.mapv(|v| Complex::new(v, 0.0)).insert_axis(Axis(0));
        let k: Array3<Complex<f32>> = fft2c(&plane)?;
        kspace.index_axis_mut(Axis(0), s).assign(&k);
    }
    Ok(Volume { kspace, sigma: 0.0, seed })
}

fn cmd_reconstruct(common: &Common, checkpoint: &Path, input: &Path, r: f64, png: &Option<PathBuf>) -> Result<()> {
    let (net, ck_cfg) = load_model(checkpoint)?;
    let cfg = resolve(common, |c| {
        if common.config.is_none() {
            *c = Config {
                seed: common.seed.or(ck_cfg.seed),
                ..ck_cfg.clone()
            };
        }
        c.model = ck_cfg.model.clone();
    })?;
    if !(r >= 1.0) {
        return Err(Error::Config(format!("--acceleration must be >= 1, got {r}")));
    }
    let seed = cfg.require_seed()?;
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("reconstruct needs --out <file>".into()))?;
    let vol = read_volume(input)?;
    let mut recons = Vec::with_capacity(vol.n_slices());
    for s in 0..vol.n_slices() {
        let full = vol.slice(s);
        let mask = generate_mask(
            cfg.sampling.kind,
            full.spatial(),
            r,
            cfg.sampling.center_radius,
            derive_seed(seed, &[TAG_RECON, s as u64]),
        )?;
        let sampled = apply_mask(&full, &mask)?;
        let x = net.forward(&ModelInput { kspace: sampled.clone(), mask })?.image;
        if let Some(dir) = png {
            let reference = vol.reference(s)?;
            let zf = zero_filled_recon(&sampled)?;
            write_figure(
                &dir.join(format!("slice_{s:03}.png")),
                &[&reference, &zf, &x],
                Some(default_zoom(reference.dim())),
            )?;
        }
        recons.push(x);
    }
    write_volume(&out, &images_to_volume(&recons, seed)?)?;
    println!("wrote {} reconstructed slices to {}", recons.len(), out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
    }
}

fn cmd_evaluate(
    common: &Common,
    methods: &[String],
    data: &Option<PathBuf>,
    split: &str,
    accelerations: &Option<Vec<f64>>,
) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(a) = accelerations {
            c.train.accelerations = a.clone();
        }
    })?;
    let split = parse_split(split)?;
    let path = manifest_path(&cfg, data);
    let volumes = if path.extension().is_some_and(|e| e == "json") {
        split_paths(&Manifest::load(&path)?, split)
    } else {
        vec![path]
    };
    if volumes.is_empty() {
        return Err(Error::EmptyDataset(format!("no {split} volumes")));
    }
    let mut report = EvaluationReport::default();
    for m in methods {
        let loaded;
        let method = if m == "zero-filled" {
            Method::ZeroFilled
        } else {
            loaded = load_model(Path::new(m))?.0;
            Method::Model {
                name: m.clone(),
                net: &loaded,
            }
        };
        report.merge(evaluate_dataset(&volumes, &method, &cfg.train.accelerations, &cfg)?);
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    report.write(&out)?;
    print!("{}", report.render_table());
    println!("report written to {}", out.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { common } => cmd_generate(common),
        Command::Train {
            common,
            data,
            resume,
            total_iters,
            no_ser,
            no_rsi,
            share_weights,
            time_steps,
            recurrent_layers,
            log_every,
        } => cmd_train(
            common,
            data,
            *resume,
            *total_iters,
            *no_ser,
            *no_rsi,
            *share_weights,
            *time_steps,
            *recurrent_layers,
            *log_every,
        ),
        Command::Reconstruct {
            common,
            checkpoint,
            input,
            acceleration,
            png,
        } => cmd_reconstruct(common, checkpoint, input, *acceleration, png),
        Command::Evaluate {
            common,
            method,
            data,
            split,
            accelerations,
        } => cmd_evaluate(common, method, data, split, accelerations),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
