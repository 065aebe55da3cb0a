use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TrainConfig};
use super::model::{forward_sifm, init_model, loss_multi};
use crate::error::{Result, SifmError};
use crate::gradcore::{adam_step, AdamState, ParamStore, Tape, Var};
use crate::icegrid::{chronological_split, make_sample, MultiGranularitySample, SampleSplit, SicSeries};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run. `params` are the best-validation parameters;
/// `optimizer` is the state after the last epoch actually run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: AdamState<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub split: SampleSplit,
}

fn sample_loss(
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    sample: &MultiGranularitySample,
) -> Result<(Var, f64)> {
    let preds = forward_sifm(tape, store, cfg, &sample.inputs)?;
    let loss = loss_multi(tape, &preds, &sample.targets)?;
    let value = f64::from(tape.value(loss)[0]);
    if !value.is_finite() {
        return Err(SifmError::Domain(format!("non-finite loss at anchor {}", sample.anchor_t)));
    }
    Ok((loss, value))
}

/// Mean loss over `anchors` without updating anything.
pub fn mean_loss(store: &ParamStore<f32>, cfg: &ModelConfig, series: &SicSeries, anchors: &[i64]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(SifmError::Range("no anchors to evaluate".into()));
    }
    let mut total = 0.0;
    for &a in anchors {
        total += sample_loss(&mut Tape::inference(), store, cfg, &make_sample(series, a)?)?.1;
    }
    Ok(total / anchors.len() as f64)
}

/// Trains on the chronological split of `series`. The model's granularity
/// mode is taken from `cfg`.
pub fn train(series: &SicSeries, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let split = chronological_split(series, cfg.anchor_stride)?;
    train_on_split(series, &split, model, cfg)
}

pub fn train_on_split(series: &SicSeries, split: &SampleSplit, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(series, split, model, cfg, |_| {})
}

/// [`train_on_split`] with a callback after every epoch.
pub fn train_observed(
    series: &SicSeries,
    split: &SampleSplit,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    model.mode = cfg.granularity_mode;
    model.validate()?;
    if (series.height(), series.width()) != (model.height, model.width) {
        return Err(SifmError::Dimension(format!(
            "{}x{} series for a {}x{} model",
            series.height(),
            series.width(),
            model.height,
            model.width
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(SifmError::Range("training needs at least one train and one validation anchor".into()));
    }

    let mut params = init_model::<f32>(&model, cfg.rng_seed)?;
    let mut opt = AdamState::for_store(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x0005_eed0_fa11);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order = split.train.clone();

    for epoch in 1..=cfg.epochs {
        order.clone_from(&split.train);
        order.shuffle(&mut rng);
        if cfg.max_train_samples > 0 {
            order.truncate(cfg.max_train_samples);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grad();
            for &a in batch {
                let mut tape = Tape::new();
                let (loss, value) = sample_loss(&mut tape, &params, &model, &make_sample(series, a)?)?;
                tape.backward(loss)?;
                params.accumulate_grads(&tape)?;
                total += value;
            }
            params.scale_grads(1.0 / batch.len() as f32);
            adam_step(&mut params, &mut opt)?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&params, &model, series, &split.val)?;
        let entry = EpochLog { epoch, train_loss, val_loss };
        on_epoch(&entry);
        log.push(entry);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        } else if epoch - best.2 >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, params, best_epoch) = best;
    Ok(TrainOutcome { model, params, optimizer: opt, log, best_epoch, split: split.clone() })
}
