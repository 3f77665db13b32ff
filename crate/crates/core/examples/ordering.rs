//! Trains the reduced model on a small synthetic dataset and compares it with
//! the zero-filled baseline on the test split.

use rvarnet::data::{generate_dataset, load_split, Split};
use rvarnet::evaluation::{evaluate_dataset, split_paths, Method};
use rvarnet::training::{train_loop, TrainOptions};
use rvarnet::{Config, RecurrentVarNet};
use std::time::Instant;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> rvarnet::Result<()> {
    let mut cfg = Config::default();
    cfg.seed = Some(env("SEED", 3));
    cfg.model.time_steps = 4;
    cfg.model.recurrent_layers = 2;
    cfg.model.hidden_channels = env("CH", 32);
    cfg.train.batch_size = env("BATCH", 1);
    cfg.train.total_iters = env("ITERS", 2000);
    cfg.train.lr_peak = env("LR", 1e-3);
    cfg.train.warmup_iters = env("WARMUP", 50);
    cfg.train.validate_every = 500;
    cfg.train.checkpoint_every = 1_000_000;

    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&cfg.data, cfg.require_seed()?, dir.path())?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    let start = Instant::now();
    let mut log = |it: u64, loss: f64| {
        if it % 100 == 0 {
            println!("iter {it:5} loss {loss:.5} t {:.0}s", start.elapsed().as_secs_f64());
        }
    };
    let mut on_val = |it: u64, r: &rvarnet::training::ValidationReport| println!("val {it} {:?}", r.per_acceleration);
    let out = train_loop(
        &train,
        &val,
        &cfg,
        TrainOptions {
            on_step: Some(&mut log),
            on_validate: Some(&mut on_val),
            ..TrainOptions::default()
        },
    )?;
    let best = out.best.unwrap_or(out.latest);
    let net = RecurrentVarNet::from_params(cfg.model.clone(), best.params)?;
    let test = split_paths(&manifest, Split::Test);
    let mut report = evaluate_dataset(&test, &Method::ZeroFilled, &[5.0, 10.0], &cfg)?;
    report.merge(evaluate_dataset(&test, &Method::Model { name: "model".into(), net: &net }, &[5.0, 10.0], &cfg)?);
    println!("{}", report.render_table());
    Ok(())
}
