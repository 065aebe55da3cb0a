use super::*;
use crate::error::SifmError;
use crate::fusion::Backbone;
use crate::gradcore::check::jitter;
use crate::gradcore::{ParamStore, Tape};
use crate::icegrid::{make_sample, synth_generate, valid_anchors, GranularSet, Granularity, SicGrid, SicSeries, SynthConfig};
use crate::init::ParamSpec;

fn micro_series(days: usize, seed: u64) -> SicSeries {
    synth_generate(&SynthConfig { height: 8, width: 8, num_days: days, rng_seed: seed, ..SynthConfig::default() }).unwrap()
}

fn series16(days: usize, noise: f64) -> SicSeries {
    synth_generate(&SynthConfig { height: 16, width: 16, num_days: days, noise_std: noise, ..SynthConfig::default() }).unwrap()
}

fn model16() -> ModelConfig {
    ModelConfig::new(16, 16, Default::default(), Default::default())
}

#[test]
fn forward_shapes_and_determinism() {
    let cfg = ModelConfig::micro();
    let series = micro_series(400, 1);
    let sample = make_sample(&series, valid_anchors(&series, 1)[0]).unwrap();
    let store = init_model::<f32>(&cfg, 3).unwrap();
    let run = || {
        let mut tape = Tape::inference();
        let out = forward_sifm(&mut tape, &store, &cfg, &sample.inputs).unwrap();
        out.iter().map(|&(g, v)| (g, tape.shape(v).to_vec(), tape.value(v).to_vec())).collect::<Vec<_>>()
    };
    let a = run();
    let shapes: Vec<_> = a.iter().map(|(g, s, _)| (*g, s.clone())).collect();
    assert_eq!(
        shapes,
        vec![(Granularity::Daily, vec![7, 8, 8]), (Granularity::Weekly, vec![8, 8, 8]), (Granularity::Monthly, vec![6, 8, 8])]
    );
    let b = run();
    for ((_, _, x), (_, _, y)) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

fn constant_set(value: f64) -> GranularSet {
    GranularSet::from_fn(|g| Ok(vec![SicGrid::filled(4, 4, value); g.steps()])).unwrap()
}

fn preds_from(tape: &mut Tape<f64>, set: &GranularSet) -> Vec<(Granularity, crate::gradcore::Var)> {
    Granularity::ALL
        .iter()
        .map(|&g| {
            let data = set.get(g).iter().flat_map(|s| s.values.clone()).collect();
            (g, tape.constant(&[g.steps(), 4, 4], data).unwrap())
        })
        .collect()
}

#[test]
fn loss_of_exact_and_offset_predictions() {
    let target = constant_set(0.4);
    let mut tape = Tape::<f64>::inference();
    let p = preds_from(&mut tape, &target);
    let l = loss_multi(&mut tape, &p, &target).unwrap();
    assert_eq!(tape.value(l)[0], 0.0);
    let p = preds_from(&mut tape, &constant_set(0.5));
    let l = loss_multi(&mut tape, &p, &target).unwrap();
    assert!((tape.value(l)[0] - 0.01).abs() < 1e-15);
}

#[test]
fn loss_matches_per_cell_oracle() {
    let series = micro_series(400, 5);
    let anchors = valid_anchors(&series, 1);
    let a = make_sample(&series, anchors[0]).unwrap();
    let b = make_sample(&series, anchors[30]).unwrap();
    let mut tape = Tape::<f64>::inference();
    let preds: Vec<_> = Granularity::ALL
        .iter()
        .map(|&g| {
            let data = a.targets.get(g).iter().flat_map(|s| s.values.clone()).collect();
            (g, tape.constant(&[g.steps(), 8, 8], data).unwrap())
        })
        .collect();
    let l = loss_multi(&mut tape, &preds, &b.targets).unwrap();
    let mut oracle = 0.0;
    for g in Granularity::ALL {
        let (mut sum, mut n) = (0.0, 0usize);
        for (p, t) in a.targets.get(g).iter().zip(b.targets.get(g)) {
            for (x, y) in p.values.iter().zip(&t.values) {
                sum += (x - y) * (x - y);
                n += 1;
            }
        }
        oracle += sum / n as f64 / 3.0;
    }
    assert!((tape.value(l)[0] - oracle).abs() < 1e-12);
}

#[test]
fn single_mode_loss_is_the_single_mse() {
    let target = constant_set(0.2);
    let mut tape = Tape::<f64>::inference();
    let p = preds_from(&mut tape, &constant_set(0.5));
    let l = loss_multi(&mut tape, &p[1..2], &target).unwrap();
    assert!((tape.value(l)[0] - 0.09).abs() < 1e-15);
}

fn micro_grads(mode: GranularityMode, jitter_seed: Option<u64>) -> ParamStore<f64> {
    let mut cfg = ModelConfig::micro();
    cfg.mode = mode;
    let series = micro_series(400, 9);
    let sample = make_sample(&series, valid_anchors(&series, 1)[10]).unwrap();
    let mut store = init_model::<f64>(&cfg, 11).unwrap();
    if let Some(s) = jitter_seed {
        jitter(&mut store, 0.1, s);
    }
    let mut tape = Tape::new();
    let preds = forward_sifm(&mut tape, &store, &cfg, &sample.inputs).unwrap();
    let loss = loss_multi(&mut tape, &preds, &sample.targets).unwrap();
    tape.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate_grads(&tape).unwrap();
    store
}

#[test]
fn every_parameter_receives_gradient() {
    let store = micro_grads(GranularityMode::Multi, Some(12));
    let cfg = ModelConfig::micro();
    let (bh, bw, _) = cfg.codec.bottleneck_shape(8, 8);
    assert_eq!((bh, bw), (1, 1));
    let last = format!("stage{}.", cfg.codec.num_merge_stages);
    for (name, t) in store.iter() {
        let g = t.grad.as_ref().unwrap();
        // The 1x1 stage has one token per window, so its softmax is constant.
        if name.ends_with("rel_bias") && name.contains(&last) {
            assert!(g.iter().all(|&x| x == 0.0));
            continue;
        }
        assert!(g.iter().any(|&x| x != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn single_modes_leave_other_granularities_untouched() {
    for mode in [GranularityMode::DailyOnly, GranularityMode::WeeklyOnly, GranularityMode::MonthlyOnly] {
        let own = mode.active()[0];
        let store = micro_grads(mode, Some(13));
        for (name, t) in store.iter() {
            let g = t.grad.as_ref().unwrap();
            let other = Granularity::ALL.iter().any(|&o| {
                o != own
                    && (name.starts_with(&format!("fusion.embed.{}.", o.name()))
                        || name.starts_with(&format!("fusion.head.{}.", o.name())))
            });
            if other {
                assert!(g.iter().all(|&x| x == 0.0), "{mode:?} touched {name}");
            } else if name.starts_with("fusion.embed.") || name.starts_with("fusion.head.") {
                assert!(g.iter().any(|&x| x != 0.0), "{mode:?} left {name} dead");
            }
        }
    }
}

#[test]
fn codec_is_shared_across_modes() {
    let multi = model_param_specs(&ModelConfig::micro()).unwrap();
    for mode in GranularityMode::ALL {
        let mut cfg = ModelConfig::micro();
        cfg.mode = mode;
        assert_eq!(model_param_specs(&cfg).unwrap(), multi);
    }
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let check = micro_gradcheck(3, 21).unwrap();
    assert_eq!(check.params.len(), model_param_specs(&ModelConfig::micro()).unwrap().len());
    for c in &check.params {
        assert!(c.rel_err < 1e-6, "{}: {}", c.name, c.rel_err);
    }
    assert!(check.single_precision < 1e-4, "f32 error {}", check.single_precision);
}

fn block(c: usize, heads: usize, window: usize) -> usize {
    let attn = 3 * c * c + 3 * c + (2 * window - 1).pow(2) * heads + c * c + c;
    let mlp = c * 4 * c + 4 * c + 4 * c * c + c;
    attn + mlp + 4 * c
}

#[test]
fn default_manifest_matches_config_arithmetic() {
    let cfg = ModelConfig::new(64, 64, Default::default(), Default::default());
    let specs = model_param_specs(&cfg).unwrap();
    let (c0, td, d, ffn) = (32, 64, 128, 512);
    let pairs = 2 * (block(32, 2, 4) + block(64, 4, 4) + block(128, 8, 4));
    let flat = 8 * 8 * 128;
    let codec = (4 * c0 + c0)
        + (128 * 64 + 64)
        + (256 * 128 + 128)
        + (flat * td + td)
        + (td * flat + flat)
        + (128 * 256 + 256)
        + (64 * 128 + 128)
        + (c0 * 4 + 4)
        + 2 * pairs;
    let layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * ffn + ffn) + (ffn * d + d);
    let fusion = (21 * td * d + 3 * d) + 2 * layer + 2 * d + (d * 21 * td + 21 * td) + 4 * (td * td + td);
    let total: usize = specs.iter().map(ParamSpec::numel).sum();
    assert_eq!(total, codec + fusion);
    assert_eq!(total, 2_945_436);

    let store = init_model::<f32>(&cfg, 1).unwrap();
    let ckpt = Checkpoint { model: cfg, params: store, optimizer: None };
    let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
    let manifest: Vec<(String, Vec<usize>)> = back.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let expected: Vec<(String, Vec<usize>)> = specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    assert_eq!(manifest, expected);
}

fn forecast_bits(store: &ParamStore<f32>, cfg: &ModelConfig, inputs: &GranularSet) -> Vec<u64> {
    let out = predict(store, cfg, inputs).unwrap();
    Granularity::ALL.iter().flat_map(|&g| out.get(g).to_vec()).flat_map(|s| s.values).map(f64::to_bits).collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = ModelConfig::micro();
    let mut store = init_model::<f32>(&cfg, 4).unwrap();
    jitter(&mut store, 0.05, 8);
    let mut opt = crate::gradcore::AdamState::for_store(&store, 1e-3, 0.9, 0.999, 1e-8).unwrap();
    opt.step_count = 17;
    opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f32 * 1e-6);
    opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-9);
    let ckpt = Checkpoint { model: cfg.clone(), params: store.clone(), optimizer: Some(opt) };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let series = micro_series(400, 2);
    let inputs = make_sample(&series, valid_anchors(&series, 1)[3]).unwrap().inputs;
    assert_eq!(forecast_bits(&store, &cfg, &inputs), forecast_bits(&back.params, &back.model, &inputs));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = ModelConfig::micro();
    let ckpt = Checkpoint { model: cfg.clone(), params: init_model::<f32>(&cfg, 4).unwrap(), optimizer: None };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    for cut in [0, 3, 7, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(SifmError::Format { .. })), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(SifmError::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_checkpoint(&bad), Err(SifmError::Format { offset: 4, .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(SifmError::Format { .. })));

    let other = ModelConfig { fusion: crate::fusion::FusionConfig { d_model: 32, ..cfg.fusion.clone() }, ..cfg.clone() };
    let swapped = Checkpoint { model: other, params: ckpt.params.clone(), optimizer: None };
    assert!(matches!(decode_checkpoint(&encode_checkpoint(&swapped).unwrap()), Err(SifmError::Checkpoint(_))));
}

#[test]
fn two_epochs_on_a_short_series() {
    let series = series16(600, 0.05);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let out = train(&series, &model16(), &cfg).unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
    assert!(out.best_epoch >= 1 && out.best_epoch <= 2);
    let ev = evaluate_model(&out.params, &out.model, &series, &out.split.test).unwrap();
    assert_eq!(ev.reports.len(), 7 + 8 + 6 + 3);
}

#[test]
fn training_is_deterministic() {
    let series = series16(500, 0.05);
    let cfg = TrainConfig { epochs: 2, max_train_samples: 6, ..TrainConfig::default() };
    let a = train(&series, &model16(), &cfg).unwrap();
    let b = train(&series, &model16(), &cfg).unwrap();
    assert_eq!(a.log, b.log);
    let bits = |s: &ParamStore<f32>| {
        s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.params), bits(&b.params));
    let c = train(&series, &model16(), &TrainConfig { rng_seed: 7, ..cfg }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn training_loss_decreases_on_noise_free_data() {
    let series = series16(600, 0.0);
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let out = train(&series, &model16(), &cfg).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn early_stopping_and_bad_inputs() {
    let series = series16(600, 0.05);
    let cfg = TrainConfig { epochs: 6, early_stop_patience: 1, max_train_samples: 4, lr: 0.05, ..TrainConfig::default() };
    let out = train(&series, &model16(), &cfg).unwrap();
    assert!(out.log.len() <= 6);
    let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch - 1].val_loss, best);
    if out.log.len() < 6 {
        assert_eq!(out.log.len(), out.best_epoch + 1);
    }

    assert!(matches!(train(&series16(300, 0.05), &model16(), &TrainConfig::default()), Err(SifmError::Range(_))));
    assert!(matches!(train(&micro_series(600, 1), &model16(), &TrainConfig::default()), Err(SifmError::Dimension(_))));
    assert!(matches!(
        train(&series, &model16(), &TrainConfig { batch_size: 0, ..TrainConfig::default() }),
        Err(SifmError::Config(_))
    ));
}

#[test]
fn oracle_and_persistence_baselines() {
    let series = series16(600, 0.05);
    let anchors = &valid_anchors(&series, 7)[..4];
    let ev = evaluate_oracle(&series, anchors, GranularityMode::Multi).unwrap();
    assert_eq!(ev.reports.len(), 24);
    for r in &ev.reports {
        assert_eq!((r.rmse, r.mae, r.iiee, r.sie_dif, r.r2, r.nse), (0.0, 0.0, 0.0, 0.0, 1.0, 1.0));
    }
    assert!(ev.residuals.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
    let p = evaluate_persistence(&series, anchors, GranularityMode::WeeklyOnly).unwrap();
    assert_eq!(p.reports.len(), 9);
    assert!(p.rmse(Granularity::Weekly).unwrap() > 0.0);
    assert!(p.rmse(Granularity::Daily).is_none());
}

#[test]
fn ablation_matrix_shares_one_split() {
    let series = series16(500, 0.05);
    let cfg = TrainConfig { epochs: 1, max_train_samples: 2, ..TrainConfig::default() };
    let ab = run_ablation(&series, &model16(), &cfg, &DEFAULT_MATRIX, |_| {}).unwrap();
    assert_eq!(ab.runs.len(), 6);
    for r in &ab.runs {
        assert_eq!(r.outcome.split, ab.split);
        assert_eq!(r.outcome.model.mode, r.case.mode);
        assert_eq!(r.outcome.model.fusion.backbone, r.case.backbone);
        let expected: usize = r.case.mode.active().iter().map(|g| g.steps() + 1).sum();
        assert_eq!(r.evaluation.reports.len(), expected);
    }
    let labels: Vec<String> = ab.runs.iter().map(|r| r.case.label()).collect();
    assert_eq!(
        labels,
        ["multi_variate", "daily_only_variate", "weekly_only_variate", "monthly_only_variate", "multi_temporal", "multi_mixer"]
    );
    assert!(ab.run(AblationCase { mode: GranularityMode::Multi, backbone: Backbone::Mixer }).is_some());
}
