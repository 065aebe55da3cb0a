//! Trains one configuration on synthetic data and compares it with
//! persistence: `learn SIZE DAYS EPOCHS MAX_TRAIN [MODE] [BACKBONE]`.

use std::time::Instant;

use sifm::fusion::{Backbone, FusionConfig};
use sifm::icegrid::{synth_generate, SynthConfig};
use sifm::spatialcodec::CodecConfig;
use sifm::trainer::{evaluate_model, evaluate_persistence, train, GranularityMode, ModelConfig, TrainConfig};

fn main() -> sifm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (size, days, epochs, max_train) = (num(0, 16), num(1, 3650), num(2, 5), num(3, 0));
    let mode =
        args.get(4).and_then(|s| GranularityMode::ALL.into_iter().find(|m| m.name() == s)).unwrap_or(GranularityMode::Multi);
    let backbone = args.get(5).and_then(|s| Backbone::ALL.into_iter().find(|b| b.name() == s)).unwrap_or(Backbone::Variate);
    let series = synth_generate(&SynthConfig { height: size, width: size, num_days: days, ..SynthConfig::default() })?;
    let model = ModelConfig::new(size, size, CodecConfig::default(), FusionConfig { backbone, ..FusionConfig::default() });
    let cfg = TrainConfig { epochs, max_train_samples: max_train, granularity_mode: mode, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train(&series, &model, &cfg)?;
    for e in &out.log {
        println!("epoch {:>3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("trained in {:.1}s, best epoch {}", t0.elapsed().as_secs_f64(), out.best_epoch);
    let ev = evaluate_model(&out.params, &out.model, &series, &out.split.test)?;
    let base = evaluate_persistence(&series, &out.split.test, mode)?;
    for &g in mode.active() {
        let (m, p) = (ev.rmse(g).unwrap(), base.rmse(g).unwrap());
        println!("{:<8} model {:.5}  persistence {:.5}  gain {:+.1}%", g.name(), m, p, 100.0 * (1.0 - m / p));
    }
    Ok(())
}
