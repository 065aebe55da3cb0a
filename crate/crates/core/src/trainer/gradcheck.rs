use super::config::ModelConfig;
use super::model::{forward_sifm, init_model, loss_multi};
use crate::error::Result;
use crate::gradcore::check::{check_param_gradients, jitter, single_precision_error, Objective, ParamCheck};
use crate::gradcore::{ParamStore, Scalar, Tape, Var};
use crate::icegrid::{make_sample, synth_generate, valid_anchors, MultiGranularitySample, SynthConfig};

/// Spread of the parameter jitter applied before checking.
pub const MICRO_JITTER: f64 = 0.1;

struct MicroLoss {
    cfg: ModelConfig,
    sample: MultiGranularitySample,
}

impl Objective for MicroLoss {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let preds = forward_sifm(tape, store, &self.cfg, &self.sample.inputs)?;
        loss_multi(tape, &preds, &self.sample.targets)
    }
}

/// End-to-end gradient audit of the micro model.
#[derive(Debug, Clone)]
pub struct MicroCheck {
    /// f64 analytic vs central-difference error per parameter tensor.
    pub params: Vec<ParamCheck>,
    /// f32 vs f64 analytic gradient error over all parameters.
    pub single_precision: f64,
}

impl MicroCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// Checks the multi-granularity loss of [`ModelConfig::micro`] on one
/// synthetic sample, probing `entries` coordinates of every tensor.
pub fn micro_gradcheck(entries: usize, seed: u64) -> Result<MicroCheck> {
    let cfg = ModelConfig::micro();
    let series = synth_generate(&SynthConfig {
        height: cfg.height,
        width: cfg.width,
        num_days: 400,
        rng_seed: seed,
        ..SynthConfig::default()
    })?;
    let anchor = valid_anchors(&series, 1)[0];
    let obj = MicroLoss { sample: make_sample(&series, anchor)?, cfg };
    let mut store = init_model::<f64>(&obj.cfg, seed)?;
    jitter(&mut store, MICRO_JITTER, seed ^ 0x6a77);
    let params = check_param_gradients(&store, |t, s| obj.build(t, s), Some(entries), seed)?;
    let single_precision = single_precision_error(&store, &obj)?;
    Ok(MicroCheck { params, single_precision })
}
