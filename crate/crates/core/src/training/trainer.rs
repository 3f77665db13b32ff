//! Mini-batch training with validation-driven checkpointing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::SliceData;
use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelInput, RecurrentVarNet};
use crate::nn::{Bound, Graph, ParamStore};
use crate::operators::apply_mask;
use crate::real::Real;
use crate::sampling::generate_mask;
use crate::seed::derive_seed;
use crate::training::adam::Adam;
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::{loss_graph, max_of, ssim};
use crate::training::schedule::lr_at;

const TAG_BATCH: u64 = 0xB0;
const TAG_MASK: u64 = 0xB1;
const TAG_VAL: u64 = 0xB2;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const METRICS_LOG: &str = "metrics.log";

/// A sub-sampled input with its fully sampled reference.
#[derive(Clone, Debug)]
pub struct TrainSample<T: Real = f32> {
    pub id: String,
    pub input: ModelInput<T>,
    pub target: Array2<T>,
}

/// Sub-samples `slice` at acceleration `r` with a mask drawn from `mask_seed`.
pub fn make_sample(slice: &SliceData, r: f64, cfg: &Config, mask_seed: u64) -> Result<TrainSample> {
    let mask = generate_mask(
        cfg.sampling.kind,
        slice.kspace.spatial(),
        r,
        cfg.sampling.center_radius,
        mask_seed,
    )?;
    Ok(TrainSample {
        id: format!("{}@R{r}", slice.id),
        input: ModelInput {
            kspace: apply_mask(&slice.kspace, &mask)?,
            mask,
        },
        target: slice.reference.clone(),
    })
}

/// The batch used at iteration `iter`. It depends only on the seed and the
/// iteration, so interrupted runs resume on the same sequence.
pub fn draw_batch(slices: &[SliceData], cfg: &Config, seed: u64, iter: u64) -> Result<Vec<TrainSample>> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset("no training slices".into()));
    }
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_BATCH, iter]));
    (0..t.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..slices.len());
            let ri = rng.random_range(0..t.accelerations.len());
            let fresh: u64 = rng.random();
            let mask_seed = if t.fresh_masks {
                fresh
            } else {
                derive_seed(seed, &[TAG_MASK, idx as u64, ri as u64])
            };
            make_sample(&slices[idx], t.accelerations[ri], cfg, mask_seed)
        })
        .collect()
}

/// Loss value and parameter gradients for one sample.
pub fn sample_gradients<T: Real>(
    net: &RecurrentVarNet<T>,
    sample: &TrainSample<T>,
    w1: f64,
    w2: f64,
) -> Result<(f64, ParamStore<T>)> {
    let g = Graph::new();
    let p = Bound::new(&g, &net.params, true);
    let out = forward_graph(&p, &net.config, &sample.input)?;
    let loss = loss_graph(&g, &sample.target, out.image, w1, w2)?;
    let value = g.value(loss).data()[0].to_f64().unwrap();
    let mut grads = g.backward(loss);
    Ok((value, p.gradients(&mut grads)))
}

/// One optimizer update on the batch-averaged loss. Returns the mean loss.
pub fn train_step<T: Real>(
    net: &mut RecurrentVarNet<T>,
    opt: &mut Adam<T>,
    batch: &[TrainSample<T>],
    cfg: &Config,
    lr: f64,
    iteration: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let mut total = net.params.zeros_like();
    let mut loss = 0.0;
    for sample in batch {
        let (l, g) = sample_gradients(net, sample, cfg.train.w1, cfg.train.w2)?;
        if !l.is_finite() || !g.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                sample: sample.id.clone(),
            });
        }
        loss += l;
        for (name, acc) in total.iter_mut() {
            acc.add_assign(g.get(name).expect("gradient per parameter"));
        }
    }
    let n = batch.len() as f64;
    let mut scale = 1.0 / n;
    if cfg.train.grad_clip > 0.0 {
        let norm = total
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
            / n;
        if norm > cfg.train.grad_clip {
            scale *= cfg.train.grad_clip / norm;
        }
    }
    for (_, t) in total.iter_mut() {
        t.scale(T::lit(scale));
    }
    opt.update(&mut net.params, &total, lr);
    Ok(loss / n)
}

/// Mean validation SSIM per acceleration and pooled over all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub per_acceleration: Vec<(f64, f64)>,
    pub mean_ssim: f64,
}

/// Validation masks are fixed per (slice, acceleration) so that scores are
/// comparable across the run.
pub fn validate(net: &RecurrentVarNet<f32>, slices: &[SliceData], cfg: &Config) -> Result<ValidationReport> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset("no validation slices".into()));
    }
    let seed = cfg.require_seed()?;
    let mut per = Vec::new();
    let mut pooled = 0.0;
    for (ri, &r) in cfg.train.accelerations.iter().enumerate() {
        let mut sum = 0.0;
        for (i, slice) in slices.iter().enumerate() {
            let s = make_sample(slice, r, cfg, derive_seed(seed, &[TAG_VAL, i as u64, ri as u64]))?;
            let out = net.forward(&s.input)?;
            sum += ssim(&s.target, &out.image, max_of(&s.target))?;
        }
        pooled += sum;
        per.push((r, sum / slices.len() as f64));
    }
    Ok(ValidationReport {
        per_acceleration: per,
        mean_ssim: pooled / (slices.len() * cfg.train.accelerations.len()) as f64,
    })
}

/// Where and how a run reports.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints and the metrics log go here when set.
    pub out_dir: Option<&'a Path>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint<f32>>,
    /// Called after every iteration with `(iteration, loss)`.
    pub on_step: Option<&'a mut dyn FnMut(u64, f64)>,
    /// Called after every validation.
    pub on_validate: Option<&'a mut dyn FnMut(u64, &ValidationReport)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub latest: Checkpoint<f32>,
    pub best: Option<Checkpoint<f32>>,
    /// Training loss of every iteration run in this call.
    pub losses: Vec<f64>,
}

fn append_metrics(dir: &Path, iteration: u64, loss: f64, report: &ValidationReport) -> Result<()> {
    let path = dir.join(METRICS_LOG);
    let mut line = format!("iteration={iteration} loss={loss:.6}");
    for (r, s) in &report.per_acceleration {
        line.push_str(&format!(" ssim_r{r}={s:.6}"));
    }
    line.push_str(&format!(" ssim_mean={:.6}\n", report.mean_ssim));
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::io(&path, e))
}

/// Runs `cfg.train.total_iters` iterations (counting those already in a
/// resumed checkpoint), validating every `validate_every` iterations and at
/// the end. The best checkpoint by pooled validation SSIM and the latest one
/// are kept in memory and, with `out_dir`, on disk.
pub fn train_loop(
    train: &[SliceData],
    val: &[SliceData],
    cfg: &Config,
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split has no slices".into()));
    }
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let t = &cfg.train;
    let (mut net, mut opt, start, mut best_ssim) = match opts.resume.take() {
        Some(ck) => {
            let net = RecurrentVarNet::from_params(cfg.model.clone(), ck.params)?;
            let opt = ck
                .optimizer
                .unwrap_or_else(|| Adam::new(&net.params, t.adam_beta1, t.adam_beta2, t.adam_eps));
            (net, opt, ck.iteration, ck.best_val_ssim)
        }
        None => {
            let net = RecurrentVarNet::<f32>::new(cfg.model.clone(), seed)?;
            let opt = Adam::new(&net.params, t.adam_beta1, t.adam_beta2, t.adam_eps);
            (net, opt, 0, None)
        }
    };
    let mut best = match (opts.out_dir, best_ssim) {
        (Some(dir), Some(_)) if dir.join(BEST_CHECKPOINT).exists() => {
            Some(Checkpoint::load(&dir.join(BEST_CHECKPOINT))?)
        }
        _ => None,
    };
    let snapshot = |net: &RecurrentVarNet<f32>, opt: &Adam<f32>, iteration: u64, best: Option<f64>| Checkpoint {
        config: cfg.clone(),
        iteration,
        best_val_ssim: best,
        params: net.params.clone(),
        optimizer: Some(opt.clone()),
    };

    let mut losses = Vec::new();
    let mut window = (0.0, 0usize);
    for iter in start..t.total_iters {
        let batch = draw_batch(train, cfg, seed, iter)?;
        let loss = train_step(&mut net, &mut opt, &batch, cfg, lr_at(iter, t), iter)?;
        losses.push(loss);
        window = (window.0 + loss, window.1 + 1);
        if let Some(cb) = opts.on_step.as_mut() {
            cb(iter, loss);
        }
        let done = iter + 1;
        let last = done == t.total_iters;
        if !val.is_empty() && (done % t.validate_every == 0 || last) {
            let report = validate(&net, val, cfg)?;
            let mean_loss = window.0 / window.1 as f64;
            window = (0.0, 0);
            if let Some(dir) = opts.out_dir {
                append_metrics(dir, done, mean_loss, &report)?;
            }
            if let Some(cb) = opts.on_validate.as_mut() {
                cb(done, &report);
            }
            if best_ssim.is_none_or(|b| report.mean_ssim > b) {
                best_ssim = Some(report.mean_ssim);
                let ck = snapshot(&net, &opt, done, best_ssim);
                if let Some(dir) = opts.out_dir {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
                best = Some(ck);
            }
        }
        if let Some(dir) = opts.out_dir {
            if done % t.checkpoint_every == 0 && !last {
                snapshot(&net, &opt, done, best_ssim).save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
    }
    let latest = snapshot(&net, &opt, start.max(t.total_iters), best_ssim);
    if let Some(dir) = opts.out_dir {
        latest.save(&dir.join(LATEST_CHECKPOINT))?;
    }
    Ok(TrainOutcome { latest, best, losses })
}
