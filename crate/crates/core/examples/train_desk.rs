//! Generates a small dataset, pretrains the prior encoder, trains the full
//! model for a few steps and reports the validation loss before and after.
//!
//! `cargo run --release --example train_desk -- [steps] [sequences]`

use std::time::Instant;

use h4d::netcore::{Model, ModelConfig};
use h4d::synth::{generate, Dataset, SynthConfig};
use h4d::train::{pretrain_prior, train_loop, LossWeights, PriorConfig, TrainConfig, TrainData, TrainSession};

fn main() -> h4d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let sequences: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(24);

    let dir = std::env::temp_dir().join("h4d_train_desk");
    let synth = SynthConfig {
        sequences,
        val_sequences: (sequences / 6).max(1),
        ..SynthConfig::default()
    };
    let t = Instant::now();
    generate(&synth, &dir, None)?;
    println!("generated {sequences} sequences in {:.1}s", t.elapsed().as_secs_f64());
    let ds = Dataset::open(&dir)?;
    let data = TrainData::load(&ds, None, None)?;

    let mut model = Model::new(ModelConfig::desk(), 0)?;
    println!("parameters: {}", model.store.n_scalars());
    let t = Instant::now();
    let prior = pretrain_prior(&mut model, &data, &PriorConfig { steps: steps * 2, ..PriorConfig::default() })?;
    println!(
        "prior L1 {:.4} -> {:.4} in {:.1}s",
        prior[0],
        prior.last().unwrap(),
        t.elapsed().as_secs_f64()
    );

    let cfg = TrainConfig {
        steps,
        lr: 1e-3,
        warmup: steps / 10,
        ..TrainConfig::default()
    };
    let mut session = TrainSession::new(model, &cfg);
    let out = train_loop(&mut session, &data, &cfg, &LossWeights::default(), Some(&dir.join("run")))?;
    println!(
        "val loss {:.4} -> {:.4} over {steps} steps in {:.1}s",
        out.val_initial.unwrap(),
        out.val_final.unwrap(),
        out.seconds
    );
    println!("final terms {:?}", out.val_terms_final.unwrap());
    Ok(())
}
