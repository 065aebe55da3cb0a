use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::SifmError;
use crate::gradcore::check::{check_param_gradients, relative_error, weighted_sum};
use crate::gradcore::{ParamStore, Tape, Tensor, Var};
use crate::icegrid::SicGrid;
use crate::init::{init_store, linear_specs, ParamSpec};

fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    // Wider than the default init so that every path carries signal.
    let mut store = init_store::<f64>(specs, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    store
}

fn frames_leaf(tape: &mut Tape<f64>, f: usize, h: usize, w: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..f * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    tape.constant(&[f, h, w], data).unwrap()
}

fn map_leaf(tape: &mut Tape<f64>, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    tape.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn block_pair_store(c: usize, heads: usize, window: usize, seed: u64) -> ParamStore<f64> {
    let cfg = CodecConfig { attn_window: window, ..CodecConfig::default() };
    let specs: Vec<ParamSpec> =
        codec_param_specs(&CodecConfig { stem_channels: c, heads_per_stage: vec![heads, heads * 2, heads * 4], ..cfg }, 64, 64)
            .unwrap()
            .into_iter()
            .filter(|s| s.name.starts_with("codec.enc.stage0."))
            .collect();
    random_store(&specs, seed)
}

fn micro_cfg() -> CodecConfig {
    CodecConfig { attn_window: 2, token_dim: 8, ..CodecConfig::default() }
}

#[test]
fn partition_shape_zero_and_odd() {
    let mut specs = Vec::new();
    linear_specs(&mut specs, "p", 4, 32);
    let store = random_store(&specs, 1);
    let mut tape = Tape::new();
    let x = frames_leaf(&mut tape, 1, 4, 4, 2);
    let y = patch_partition(&mut tape, &store, "p", x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 32]);

    let mut zero_bias = store.clone();
    zero_bias.get_mut("p.b").unwrap().data_mut().fill(0.0);
    let mut fresh = Tape::new();
    let z = fresh.constant(&[1, 4, 4], vec![0.0; 16]).unwrap();
    let y = patch_partition(&mut fresh, &zero_bias, "p", z).unwrap();
    assert!(fresh.value(y).iter().all(|&v| v == 0.0));
    assert!(matches!(patch_partition(&mut tape, &zero_bias, "p", z), Err(SifmError::Contract(_))));

    let odd = tape.constant(&[1, 5, 4], vec![0.0; 20]).unwrap();
    assert!(matches!(patch_partition(&mut tape, &store, "p", odd), Err(SifmError::Dimension(_))));
}

#[test]
fn partition_cells_are_their_own_patch() {
    let mut specs = Vec::new();
    linear_specs(&mut specs, "p", 4, 3);
    let store = random_store(&specs, 3);
    let mut tape = Tape::new();
    let x = frames_leaf(&mut tape, 2, 4, 6, 4);
    let y = patch_partition(&mut tape, &store, "p", x).unwrap();
    let (xv, yv) = (tape.value(x).to_vec(), tape.value(y).to_vec());
    let (w, b) = (store.get("p.w").unwrap().data(), store.get("p.b").unwrap().data());
    for f in 0..2 {
        for py in 0..2 {
            for px in 0..3 {
                let patch = [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(dy, dx)| xv[f * 24 + (2 * py + dy) * 6 + 2 * px + dx]);
                for o in 0..3 {
                    let want = b[o] + (0..4).map(|k| patch[k] * w[k * 3 + o]).sum::<f64>();
                    let got = yv[((f * 2 + py) * 3 + px) * 3 + o];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }
}

fn check_with_input(
    specs: Vec<ParamSpec>,
    input_shape: &[usize],
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> crate::Result<Var>,
) -> f64 {
    let mut specs = specs;
    specs.push(ParamSpec::weight("x", input_shape));
    let store = random_store(&specs, 11);
    let checks = check_param_gradients(
        &store,
        |tape, s| {
            let x = tape.param(s, "x")?;
            let y = f(tape, s, x)?;
            weighted_sum(tape, y, 5, None)
        },
        Some(6),
        3,
    )
    .unwrap();
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut specs = Vec::new();
    linear_specs(&mut specs, "p", 4, 32);
    assert!(check_with_input(specs, &[2, 4, 4], |t, s, x| patch_partition(t, s, "p", x)) < 1e-6);

    let mut specs = Vec::new();
    linear_specs(&mut specs, "m", 32, 16);
    assert!(check_with_input(specs, &[1, 4, 4, 8], |t, s, x| patch_merge(t, s, "m", x)) < 1e-6);

    let mut specs = Vec::new();
    linear_specs(&mut specs, "e", 8, 16);
    assert!(check_with_input(specs, &[1, 2, 2, 8], |t, s, x| patch_expand(t, s, "e", x)) < 1e-6);

    let mut specs = Vec::new();
    linear_specs(&mut specs, "h", 8, 4);
    assert!(check_with_input(specs, &[1, 2, 3, 8], |t, s, x| decoder_head(t, s, "h", x)) < 1e-6);
}

#[test]
fn block_pair_gradient_with_shift_matches_finite_differences() {
    let mut full = block_pair_store(8, 2, 2, 21);
    full.insert("x", random_store(&[ParamSpec::weight("x", &[1, 4, 4, 8])], 22).get("x").unwrap().clone()).unwrap();
    let checks = check_param_gradients(
        &full,
        |tape, s| {
            let x = tape.param(s, "x")?;
            let out = swin_block_pair(tape, s, "codec.enc.stage0", x, 2, 2, 1e-5)?;
            assert_eq!(out.shift, 1);
            weighted_sum(tape, out.out, 9, None)
        },
        Some(6),
        4,
    )
    .unwrap();
    for c in &checks {
        assert!(c.rel_err < 1e-6, "{}: {}", c.name, c.rel_err);
    }
}

#[test]
fn merge_and_expand_shapes() {
    let mut specs = Vec::new();
    linear_specs(&mut specs, "m", 128, 64);
    linear_specs(&mut specs, "e", 64, 128);
    let store = random_store(&specs, 5);
    let mut tape = Tape::new();
    let z = map_leaf(&mut tape, &[1, 8, 8, 32], 6);
    let m = patch_merge(&mut tape, &store, "m", z).unwrap();
    assert_eq!(tape.shape(m), &[1, 4, 4, 64]);
    let e = patch_expand(&mut tape, &store, "e", m).unwrap();
    assert_eq!(tape.shape(e), &[1, 8, 8, 32]);

    let odd = map_leaf(&mut tape, &[1, 3, 4, 32], 7);
    assert!(matches!(patch_merge(&mut tape, &store, "m", odd), Err(SifmError::Dimension(_))));
    let odd_c = map_leaf(&mut tape, &[1, 2, 2, 5], 7);
    assert!(matches!(patch_expand(&mut tape, &store, "e", odd_c), Err(SifmError::Dimension(_))));
}

#[test]
fn averaging_merge_keeps_constant_input_constant() {
    let c = 8;
    let mut store = ParamStore::new();
    store.insert("m.w", Tensor::full(&[4 * c, 2 * c], 1.0 / (4 * c) as f64).unwrap()).unwrap();
    store.insert("m.b", Tensor::zeros(&[2 * c]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(&[2, 4, 6, c], vec![0.37; 2 * 4 * 6 * c]).unwrap();
    let m = patch_merge(&mut tape, &store, "m", z).unwrap();
    assert_eq!(tape.shape(m), &[2, 2, 3, 2 * c]);
    assert!(tape.value(m).iter().all(|v| (v - 0.37).abs() < 1e-12));
}

#[test]
fn expand_places_channel_groups_in_quad_order() {
    let c = 4;
    let mut store = ParamStore::new();
    let mut eye = vec![0.0; c * 2 * c];
    for i in 0..c {
        eye[i * 2 * c + i] = 1.0;
        eye[i * 2 * c + c + i] = 10.0;
    }
    store.insert("e.w", Tensor::new(&[c, 2 * c], eye).unwrap()).unwrap();
    store.insert("e.b", Tensor::zeros(&[2 * c]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(&[1, 1, 1, c], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let e = patch_expand(&mut tape, &store, "e", z).unwrap();
    // Groups go to (0,0), (1,0), (0,1), (1,1) in turn; output is row-major.
    assert_eq!(tape.value(e), &[1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
}

#[test]
fn shifted_attention_never_crosses_wrapped_boundary() {
    let store = block_pair_store(8, 2, 2, 31);
    let mut tape = Tape::new();
    let z = map_leaf(&mut tape, &[1, 4, 4, 8], 32);
    let out = swin_block_pair(&mut tape, &store, "codec.enc.stage0", z, 2, 2, 1e-5).unwrap();
    assert_eq!(out.shift, 1);
    assert_eq!(tape.shape(out.probs[1]), &[1, 4, 2, 4, 4]);
    let p = tape.value(out.probs[1]).to_vec();
    // With a shift of 1 the last window holds original cells (3,3), (3,0), (0,3), (0,0).
    let last = 3;
    let cells = [(3, 3), (3, 0), (0, 3), (0, 0)];
    let idx = window_partition_index(1, 4, 4, 2, 1);
    for (slot, &(y, x)) in cells.iter().enumerate() {
        assert_eq!(idx[last * 4 + slot] as usize, y * 4 + x);
    }
    for head in 0..2 {
        let row = |q: usize| &p[((last * 2 + head) * 4 + q) * 4..((last * 2 + head) * 4 + q + 1) * 4];
        let from_origin = row(3);
        assert_eq!(&from_origin[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(from_origin[3], 1.0);
        for q in 0..4 {
            for k in 0..4 {
                if q != k {
                    assert_eq!(row(q)[k], 0.0);
                }
            }
        }
    }
    // The top-left window holds original cells (1..3, 1..3) and is unmasked.
    assert!(p[..2 * 16].iter().all(|&v| v > 0.0));
}

#[test]
fn mask_matches_brute_force_region_labels() {
    let (h, w, ws, s) = (8, 12, 4, 2);
    let mask = shift_region_mask(h, w, ws, s);
    let idx = window_partition_index(1, h, w, ws, s);
    let n = ws * ws;
    // Cells may attend to each other iff they are neighbours without wrapping.
    let shifted_pos = |cell: usize| {
        let (y, x) = (cell / w, cell % w);
        ((y + h - s) % h, (x + w - s) % w)
    };
    for win in 0..(h / ws) * (w / ws) {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (idx[win * n + i] as usize, idx[win * n + j] as usize);
                let (pa, pb) = (shifted_pos(a), shifted_pos(b));
                let wraps_y = (pa.0 + s >= h) != (pb.0 + s >= h);
                let wraps_x = (pa.1 + s >= w) != (pb.1 + s >= w);
                let allowed = !wraps_y && !wraps_x;
                let m = mask[(win * n + i) * n + j];
                assert_eq!(m == 0.0, allowed, "window {win} pair {i},{j}");
            }
        }
    }
}

#[test]
fn block_pair_shape_and_bad_window() {
    let store = block_pair_store(32, 2, 4, 41);
    let mut tape = Tape::new();
    let z = map_leaf(&mut tape, &[1, 8, 8, 32], 42);
    let out = swin_block_pair(&mut tape, &store, "codec.enc.stage0", z, 4, 2, 1e-5).unwrap();
    assert_eq!(tape.shape(out.out), &[1, 8, 8, 32]);
    assert_eq!(out.shift, 2);
    let z6 = map_leaf(&mut tape, &[1, 6, 6, 32], 43);
    assert!(matches!(swin_block_pair(&mut tape, &store, "codec.enc.stage0", z6, 4, 2, 1e-5), Err(SifmError::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, hw in prop::sample::select(vec![(4usize, 4usize), (8, 4), (4, 8), (8, 8)])) {
        let store = block_pair_store(8, 2, 2, seed);
        let mut tape = Tape::new();
        let z = map_leaf(&mut tape, &[2, hw.0, hw.1, 8], seed + 1);
        let out = swin_block_pair(&mut tape, &store, "codec.enc.stage0", z, 2, 2, 1e-5).unwrap();
        for p in out.probs {
            for row in tape.value(p).chunks_exact(4) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn encoder_shapes_at_full_size() {
    let cfg = CodecConfig::default();
    assert_eq!(cfg.bottleneck_shape(64, 64), (8, 8, 128));
    let store = init_store::<f32>(&codec_param_specs(&cfg, 64, 64).unwrap(), 1).unwrap();
    let frame = SicGrid::new(64, 64, (0..4096).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
    let (tok, skip) = encode_frame(&cfg, &store, &frame).unwrap();
    assert_eq!(tok.vec.len(), 64);
    assert_eq!((skip.height, skip.width, skip.channels), (32, 32, 32));
    assert!(tok.vec.iter().all(|v| v.is_finite()));
    let (tok2, skip2) = encode_frame(&cfg, &store, &frame).unwrap();
    assert_eq!(tok, tok2);
    assert_eq!(skip, skip2);
}

#[test]
fn round_trip_shapes() {
    let cfg = CodecConfig::default();
    for hw in [16, 32, 64] {
        let store = init_store::<f32>(&codec_param_specs(&cfg, hw, hw).unwrap(), 2).unwrap();
        let frame = SicGrid::filled(hw, hw, 0.4);
        let (tok, skip) = encode_frame(&cfg, &store, &frame).unwrap();
        let out = decode_frame(&cfg, &store, &tok, &skip, hw, hw).unwrap();
        assert_eq!((out.height, out.width), (hw, hw));
        assert!(out.in_unit_range());
    }
    let store = init_store::<f32>(&codec_param_specs(&cfg, 32, 16).unwrap(), 2).unwrap();
    let (tok, skip) = encode_frame(&cfg, &store, &SicGrid::filled(32, 16, 0.4)).unwrap();
    assert_eq!(decode_frame(&cfg, &store, &tok, &skip, 32, 16).unwrap().values.len(), 512);
}

#[test]
fn bad_grid_sizes_are_dimension_errors() {
    let cfg = CodecConfig::default();
    assert!(matches!(codec_param_specs(&cfg, 12, 16), Err(SifmError::Dimension(_))));
    assert!(matches!(codec_param_specs(&cfg, 24, 24), Err(SifmError::Dimension(_))));
    let bad = CodecConfig { heads_per_stage: vec![3, 4, 8], ..cfg };
    assert!(matches!(bad.validate(), Err(SifmError::Config(_))));
}

#[test]
fn parameter_count_ignores_frame_count() {
    let cfg = micro_cfg();
    let store = random_store(&codec_param_specs(&cfg, 16, 16).unwrap(), 3);
    let before = store.numel();
    let mut tape = Tape::new();
    let x = frames_leaf(&mut tape, 5, 16, 16, 4);
    let enc = encode_frames(&mut tape, &store, &cfg, x).unwrap();
    assert_eq!(tape.shape(enc.tokens), &[5, 8]);
    assert_eq!(store.numel(), before);
    // Joint encoding equals one-by-one encoding.
    for f in 0..5 {
        let mut solo = Tape::new();
        let one = solo.constant(&[1, 16, 16], tape.value(x)[f * 256..(f + 1) * 256].to_vec()).unwrap();
        let e = encode_frames(&mut solo, &store, &cfg, one).unwrap();
        for (a, b) in solo.value(e.tokens).iter().zip(&tape.value(enc.tokens)[f * 8..(f + 1) * 8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn every_cell_moves_the_token() {
    let cfg = micro_cfg();
    let store = random_store(&codec_param_specs(&cfg, 16, 16).unwrap(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    let token = |data: Vec<f64>| {
        let mut tape = Tape::inference();
        let x = tape.constant(&[1, 16, 16], data).unwrap();
        let e = encode_frames(&mut tape, &store, &cfg, x).unwrap();
        tape.value(e.tokens).to_vec()
    };
    let t0 = token(base.clone());
    for cell in 0..256 {
        let mut d = base.clone();
        d[cell] = if d[cell] > 0.5 { d[cell] - 0.25 } else { d[cell] + 0.25 };
        let t1 = token(d);
        let delta: f64 = t0.iter().zip(&t1).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0, "cell {cell} has no effect");
    }
}

#[test]
fn skip_is_live() {
    let cfg = CodecConfig::default();
    let store = random_store(&codec_param_specs(&cfg, 16, 16).unwrap(), 9);
    let mut tape = Tape::new();
    let x = frames_leaf(&mut tape, 1, 16, 16, 10);
    let enc = encode_frames(&mut tape, &store, &cfg, x).unwrap();
    let y = decode_frames(&mut tape, &store, &cfg, enc.tokens, enc.skip, 16, 16).unwrap();
    let zero = tape.constant(&[1, 8, 8, 32], vec![0.0; 8 * 8 * 32]).unwrap();
    let y0 = decode_frames(&mut tape, &store, &cfg, enc.tokens, zero, 16, 16).unwrap();
    let diff: f64 = tape.value(y).iter().zip(tape.value(y0)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "skip made no difference: {diff}");
}

fn reconstruction_loss<T: crate::gradcore::Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    frames: &[f64],
) -> crate::Result<Var> {
    let x = tape.constant(&[2, 8, 8], frames.iter().map(|&v| T::lit(v)).collect())?;
    let enc = encode_frames(tape, store, cfg, x)?;
    let y = decode_frames(tape, store, cfg, enc.tokens, enc.skip, 8, 8)?;
    tape.mse(y, x)
}

#[test]
fn codec_gradient_matches_finite_differences() {
    let cfg = micro_cfg();
    let store = random_store(&codec_param_specs(&cfg, 8, 8).unwrap(), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let frames: Vec<f64> = (0..128).map(|_| rng.random_range(0.0..1.0)).collect();
    let checks = check_param_gradients(&store, |tape, s| reconstruction_loss(tape, s, &cfg, &frames), Some(4), 15).unwrap();
    assert_eq!(checks.len(), store.len());
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    assert!(worst.rel_err < 1e-6, "{}: {}", worst.name, worst.rel_err);

    // Single precision gradients against the double precision reference.
    let store32 = store.cast::<f32>();
    let mut t32 = Tape::<f32>::new();
    let l32 = reconstruction_loss(&mut t32, &store32, &cfg, &frames).unwrap();
    t32.backward(l32).unwrap();
    let mut g32 = store32.clone();
    g32.zero_grad();
    g32.accumulate_grads(&t32).unwrap();
    let mut t64 = Tape::<f64>::new();
    let l64 = reconstruction_loss(&mut t64, &store, &cfg, &frames).unwrap();
    t64.backward(l64).unwrap();
    let mut g64 = store.clone();
    g64.zero_grad();
    g64.accumulate_grads(&t64).unwrap();
    let a: Vec<f64> = g32.iter().flat_map(|(_, t)| t.grad.clone().unwrap()).map(f64::from).collect();
    let b: Vec<f64> = g64.iter().flat_map(|(_, t)| t.grad.clone().unwrap()).collect();
    assert!(relative_error(&a, &b) < 1e-4, "{}", relative_error(&a, &b));
}
