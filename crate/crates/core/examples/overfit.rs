//! Fits the reduced model to a single noiseless slice and reports the loss
//! trajectory and final SSIM.

use rvarnet::data::{simulate_volume, SliceData};
use rvarnet::training::{make_sample, ssim, train_loop, TrainOptions};
use rvarnet::Config;
use std::time::Instant;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> rvarnet::Result<()> {
    let mut cfg = Config::default();
    cfg.seed = Some(env("SEED", 7));
    cfg.model.time_steps = 4;
    cfg.model.recurrent_layers = 2;
    cfg.model.hidden_channels = 32;
    cfg.train.batch_size = 1;
    cfg.train.accelerations = vec![5.0];
    cfg.train.fresh_masks = false;
    cfg.train.total_iters = env("ITERS", 500);
    cfg.train.lr_peak = env("LR", 5e-4);
    cfg.train.warmup_iters = env("WARMUP", 1000);
    cfg.train.validate_every = 1_000_000;
    cfg.train.checkpoint_every = 1_000_000;

    let vol = simulate_volume((64, 64), 4, 1, 0.0, 11)?;
    let slice = SliceData {
        id: "overfit".into(),
        kspace: vol.slice(0),
        reference: vol.reference(0)?,
    };
    let slices = vec![slice];
    let start = Instant::now();
    let mut log = |it: u64, loss: f64| {
        if it % 25 == 0 {
            println!("iter {it:4} loss {loss:.5} t {:.1}s", start.elapsed().as_secs_f64());
        }
    };
    let out = train_loop(
        &slices,
        &slices,
        &cfg,
        TrainOptions {
            on_step: Some(&mut log),
            ..TrainOptions::default()
        },
    )?;
    let net = rvarnet::RecurrentVarNet::from_params(cfg.model.clone(), out.latest.params)?;
    let seed = cfg.require_seed()?;
    let sample = make_sample(&slices[0], 5.0, &cfg, rvarnet::seed::derive_seed(seed, &[0xB1, 0, 0]))?;
    let pred = net.forward(&sample.input)?.image;
    let range = slices[0].reference.iter().cloned().fold(0f32, f32::max) as f64;
    println!(
        "first {:.5} last {:.5} ratio {:.4} ssim {:.4}",
        out.losses[0],
        out.losses.last().unwrap(),
        out.losses.last().unwrap() / out.losses[0],
        ssim(&slices[0].reference, &pred, range)?
    );
    Ok(())
}
