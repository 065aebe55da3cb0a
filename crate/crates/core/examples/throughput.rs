//! Times one training step (forward and backward) of the default model on
//! a synthetic sample at a chosen grid size.
//!
//! `cargo run --release --example throughput -- 64`

use std::time::Instant;

use sifm::fusion::FusionConfig;
use sifm::gradcore::Tape;
use sifm::icegrid::{make_sample, synth_generate, SynthConfig};
use sifm::spatialcodec::CodecConfig;
use sifm::trainer::{forward_sifm, init_model, loss_multi, ModelConfig};

fn main() -> sifm::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let series = synth_generate(&SynthConfig { height: size, width: size, num_days: 400, ..SynthConfig::default() })?;
    let sample = make_sample(&series, 200)?;
    let cfg = ModelConfig::new(size, size, CodecConfig::default(), FusionConfig::default());
    let mut store = init_model::<f32>(&cfg, 1)?;
    println!("parameters: {}", store.numel());
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let preds = forward_sifm(&mut tape, &store, &cfg, &sample.inputs)?;
        let loss = loss_multi(&mut tape, &preds, &sample.targets)?;
        let t1 = Instant::now();
        tape.backward(loss)?;
        store.zero_grad();
        store.accumulate_grads(&tape)?;
        let t2 = Instant::now();
        println!(
            "loss {:.5}  forward {:.3}s  backward {:.3}s  tape nodes {}",
            tape.value(loss)[0],
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            tape.len()
        );
    }
    Ok(())
}
