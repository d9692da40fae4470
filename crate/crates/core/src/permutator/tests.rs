use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Affine};
use super::*;
use crate::autograd::{gradcheck, GradcheckSettings, Tape};
use crate::nn::{gradcheck_store, init_params, ParamStore};
use crate::tensor::Tensor;

fn random_grid(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn set_identity(store: &mut ParamStore<f64>, l: &Linear) {
    let n = l.in_features;
    store.assign(l.weight, &Tensor::eye(n)).unwrap();
    store.assign(l.bias, &Tensor::zeros([n])).unwrap();
}

fn constant(x: &Tensor<f64>) -> Var<f64> {
    Var::constant(x.clone())
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b) / scale
}

fn mixer(dim: usize, seed: u64) -> (ParamStore<f64>, PermuteMlpWeights, Option<SplitAttentionWeights>) {
    let mut store = ParamStore::new();
    let w = PermuteMlpWeights::register(&mut store, "m", dim).unwrap();
    let a = SplitAttentionWeights::register(&mut store, "m.attn", dim, SPLIT_ATTENTION_REDUCTION).ok();
    randomize(&mut store, seed, 0.3);
    (store, w, a)
}

#[test]
fn identity_weights_give_three_x() {
    let (h, c, s) = (4, 8, 2);
    let mut store = ParamStore::new();
    let w = PermuteMlpWeights::register(&mut store, "m", c).unwrap();
    for l in [w.proj_h, w.proj_w, w.proj_c, w.proj] {
        set_identity(&mut store, &l);
    }
    let x = random_grid([2, h, h, c], 1);
    let p = store.bind(None);
    let y = permute_mlp_forward(&p, &constant(&x), &w, s).unwrap();
    assert!(y.value().max_abs_diff(&x.map(|v| 3.0 * v)) <= 1e-12);
    // The regrouping alone is an exact involution.
    assert!(mix_height(&p, &constant(&x), &w.proj_h, s).unwrap().value().bit_eq(&x));
    assert!(mix_width(&p, &constant(&x), &w.proj_w, s).unwrap().value().bit_eq(&x));
}

#[test]
fn zero_input_zero_bias_gives_zero() {
    let (mut store, w, a) = mixer(8, 2);
    let a = a.unwrap();
    for l in [w.proj_h, w.proj_w, w.proj_c, w.proj] {
        store.assign(l.bias, &Tensor::zeros([8])).unwrap();
    }
    let p = store.bind(None);
    let x = Tensor::<f64>::zeros([1, 4, 4, 8]);
    let y = permute_mlp_forward(&p, &constant(&x), &w, 2).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    let y = weighted_permute_mlp_forward(&p, &constant(&x), &w, &a, 2).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn branch_isolation() {
    // Only the height branch is non-zero: the output equals the height branch
    // followed by the identity fusion.
    let (h, c, s) = (4, 8, 2);
    let mut store = ParamStore::new();
    let w = PermuteMlpWeights::register(&mut store, "m", c).unwrap();
    randomize(&mut store, 3, 0.5);
    for l in [w.proj_w, w.proj_c] {
        store.assign(l.weight, &Tensor::zeros([c, c])).unwrap();
        store.assign(l.bias, &Tensor::zeros([c])).unwrap();
    }
    set_identity(&mut store, &w.proj);
    let x = random_grid([1, h, h, c], 4);
    let p = store.bind(None);
    let full = permute_mlp_forward(&p, &constant(&x), &w, s).unwrap();
    let height = mix_height(&p, &constant(&x), &w.proj_h, s).unwrap();
    assert!(full.value().max_abs_diff(height.value()) <= 1e-12);
}

#[test]
fn branches_match_loop_oracle() {
    for n in [2, 4, 8] {
        for s in [1, 2, 3] {
            let c = n * s;
            let (store, w, _) = mixer(c, (n * 10 + s) as u64);
            let x = random_grid([2, n, n, c], 7);
            let p = store.bind(None);
            let aff = |l: &Linear| Affine::from_store(&store, l);

            let yh = mix_height(&p, &constant(&x), &w.proj_h, s).unwrap();
            assert!(rel(yh.value(), &oracle::mix_height(&x, &aff(&w.proj_h), s)) <= 1e-10, "height N={n} S={s}");
            let yw = mix_width(&p, &constant(&x), &w.proj_w, s).unwrap();
            assert!(rel(yw.value(), &oracle::mix_width(&x, &aff(&w.proj_w), s)) <= 1e-10, "width N={n} S={s}");
            let y = permute_mlp_forward(&p, &constant(&x), &w, s).unwrap();
            let o = oracle::permute_mlp(&x, &aff(&w.proj_h), &aff(&w.proj_w), &aff(&w.proj_c), &aff(&w.proj), s);
            assert!(rel(y.value(), &o) <= 1e-10, "permute-mlp N={n} S={s}");
        }
    }
}

#[test]
fn weighted_matches_loop_oracle() {
    for (n, s) in [(4, 2), (4, 3), (8, 1)] {
        let c = n * s;
        if c % SPLIT_ATTENTION_REDUCTION != 0 {
            continue;
        }
        let (store, w, a) = mixer(c, 21);
        let a = a.unwrap();
        let x = random_grid([3, n, n, c], 8);
        let p = store.bind(None);
        let aff = |l: &Linear| Affine::from_store(&store, l);
        let y = weighted_permute_mlp_forward(&p, &constant(&x), &w, &a, s).unwrap();
        let o = oracle::weighted_permute_mlp(
            &x,
            &aff(&w.proj_h),
            &aff(&w.proj_w),
            &aff(&w.proj_c),
            &aff(&w.proj),
            &aff(&a.reduce),
            &aff(&a.expand),
            s,
        );
        assert!(rel(y.value(), &o) <= 1e-10, "N={n} S={s}");
    }
}

#[test]
fn channel_mlp_matches_loop_oracle() {
    let mut store = ParamStore::new();
    let fc1 = Linear::register(&mut store, "fc1", 6, 18).unwrap();
    let fc2 = Linear::register(&mut store, "fc2", 18, 6).unwrap();
    randomize(&mut store, 5, 0.4);
    let x = random_grid([2, 3, 3, 6], 9);
    let y = channel_mlp_forward(&store.bind(None), &constant(&x), &fc1, &fc2).unwrap();
    let o = oracle::channel_mlp(&x, &Affine::from_store(&store, &fc1), &Affine::from_store(&store, &fc2));
    assert!(rel(y.value(), &o) <= 1e-10);
}

#[test]
fn rank_three_grid_is_a_batch_of_one() {
    let (store, w, a) = mixer(8, 6);
    let a = a.unwrap();
    let x = random_grid([1, 4, 4, 8], 10);
    let x3 = x.reshape([4, 4, 8]).unwrap();
    let p = store.bind(None);
    let y4 = weighted_permute_mlp_forward(&p, &constant(&x), &w, &a, 2).unwrap();
    let y3 = weighted_permute_mlp_forward(&p, &constant(&x3), &w, &a, 2).unwrap();
    assert_eq!(y3.shape(), &[4, 4, 8]);
    assert_eq!(y3.value().data(), y4.value().data());
}

/// Cyclic shift of the grid along `axis` (1 = height, 2 = width).
fn roll(x: &Tensor<f64>, axis: usize, by: usize) -> Tensor<f64> {
    let sh = x.shape().to_vec();
    let mut out = Tensor::zeros(sh.clone());
    for b in 0..sh[0] {
        for i in 0..sh[1] {
            for j in 0..sh[2] {
                for k in 0..sh[3] {
                    let mut dst = [b, i, j, k];
                    dst[axis] = (dst[axis] + by) % sh[axis];
                    out.set(&dst, x.at(&[b, i, j, k]));
                }
            }
        }
    }
    out
}

#[test]
fn height_branch_commutes_with_column_shuffles() {
    // Columns are processed independently by the height branch, so permuting
    // columns before or after gives identical bits.
    let (store, w, _) = mixer(8, 11);
    let p = store.bind(None);
    let x = random_grid([2, 4, 4, 8], 12);
    for by in 1..4 {
        let a = mix_height(&p, &constant(&roll(&x, 2, by)), &w.proj_h, 2).unwrap();
        let b = roll(mix_height(&p, &constant(&x), &w.proj_h, 2).unwrap().value(), 2, by);
        assert!(a.value().bit_eq(&b));
        let a = mix_width(&p, &constant(&roll(&x, 1, by)), &w.proj_w, 2).unwrap();
        let b = roll(mix_width(&p, &constant(&x), &w.proj_w, 2).unwrap().value(), 1, by);
        assert!(a.value().bit_eq(&b));
    }
}

#[test]
fn height_branch_mixes_only_along_its_column() {
    let (store, w, _) = mixer(8, 13);
    let p = store.bind(None);
    let x = random_grid([1, 4, 4, 8], 14);
    let base = mix_height(&p, &constant(&x), &w.proj_h, 2).unwrap();
    let mut bumped = x.clone();
    bumped.set(&[0, 0, 1, 3], x.at(&[0, 0, 1, 3]) + 1.0);
    let moved = mix_height(&p, &constant(&bumped), &w.proj_h, 2).unwrap();
    // Channel 3 lies in segment group n = 1 (channels 2..4).
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..8 {
                let changed = base.value().at(&[0, i, j, k]) != moved.value().at(&[0, i, j, k]);
                let expected = j == 1 && (2..4).contains(&k);
                assert_eq!(changed, expected, "({i},{j},{k})");
            }
        }
    }
    // Information reaches every row of that column.
    for i in 1..4 {
        assert_ne!(base.value().at(&[0, i, 1, 2]), moved.value().at(&[0, i, 1, 2]));
    }
}

#[test]
fn width_branch_is_height_branch_on_transpose() {
    let (store, w, _) = mixer(12, 15);
    let p = store.bind(None);
    let x = random_grid([2, 4, 4, 12], 16);
    let xt = x.permute(&[0, 2, 1, 3]).unwrap();
    let a = mix_width(&p, &constant(&x), &w.proj_h, 3).unwrap();
    let b = mix_height(&p, &constant(&xt), &w.proj_h, 3).unwrap().value().permute(&[0, 2, 1, 3]).unwrap();
    assert!(a.value().bit_eq(&b));
}

#[test]
fn attention_weights_are_a_distribution() {
    let (store, _, a) = mixer(8, 17);
    let a = a.unwrap();
    let p = store.bind(None);
    let branches: Vec<Var<f64>> = (0..3).map(|i| constant(&random_grid([2, 4, 4, 8], 30 + i))).collect();
    let wts = a.weights(&p, [&branches[0], &branches[1], &branches[2]]).unwrap();
    assert_eq!(wts.shape(), &[2, 3, 8]);
    for b in 0..2 {
        for k in 0..8 {
            let s: f64 = (0..3).map(|i| wts.value().at(&[b, i, k])).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    // Zero expansion gives equal logits and uniform weights.
    let mut store = store.clone();
    store.assign(a.expand.weight, &Tensor::zeros([2, 24])).unwrap();
    store.assign(a.expand.bias, &Tensor::zeros([24])).unwrap();
    let wts = a.weights(&store.bind(None), [&branches[0], &branches[1], &branches[2]]).unwrap();
    assert!(wts.value().data().iter().all(|&v| (v - 1.0 / 3.0).abs() <= 1e-15));
}

#[test]
fn shape_errors() {
    let (store, w, _) = mixer(8, 18);
    let p = store.bind(None);
    // N = 8 / 2 = 4 but the grid side is 2.
    let x = constant(&Tensor::zeros([1, 2, 2, 8]));
    assert!(mix_height(&p, &x, &w.proj_h, 2).is_err());
    assert!(mix_height(&p, &x, &w.proj_h, 3).is_err());
    assert!(mix_height(&p, &constant(&Tensor::zeros([8])), &w.proj_h, 2).is_err());
    assert!(segments_for(10, 4).is_err());
    assert_eq!(segments_for(384, 16).unwrap(), 24);
    assert_eq!(segments_for(192, 32).unwrap(), 6);
    assert_eq!(segments_for(336, 14).unwrap(), 24);
}

fn block(kind: MixerKind, dim: usize, side: usize, seed: u64) -> (ParamStore<f64>, PermutatorBlock) {
    let mut store = ParamStore::new();
    let b = PermutatorBlock::register(&mut store, "blk", dim, side, 3, kind, 0.0).unwrap();
    init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, b)
}

const KINDS: [MixerKind; 5] = [
    MixerKind::Weighted,
    MixerKind::Vanilla,
    MixerKind::NoHeight,
    MixerKind::NoWidth,
    MixerKind::PositionBlind,
];

#[test]
fn zero_weight_block_is_identity() {
    for kind in KINDS {
        let mut store = ParamStore::new();
        let b = PermutatorBlock::register(&mut store, "blk", 8, 4, 3, kind, 0.0).unwrap();
        // Registered parameters start at zero, LayerNorm gains included.
        let x = random_grid([2, 4, 4, 8], 19);
        let y = b.forward(&store.bind(None), &constant(&x), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.value().bit_eq(&x), "{kind:?}");
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let (store, b) = block(MixerKind::Weighted, 8, 4, 20);
    let mut store = store;
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut drop = b;
    drop.drop_rate = 0.5;
    for id in ids {
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let x = constant(&random_grid([2, 4, 4, 8], 21));
    let p = store.bind(None);
    let a = drop.forward(&p, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let c = drop.forward(&p, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(a.value().bit_eq(c.value()));
    let t1 = drop.forward(&p, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let t2 = drop.forward(&p, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(t1.value().bit_eq(t2.value()));
}

#[test]
fn block_gradients_match_finite_differences() {
    let settings = GradcheckSettings::new(1e-5, 1e-3);
    for (i, kind) in KINDS.into_iter().enumerate() {
        let (mut store, b) = block(kind, 8, 4, 40 + i as u64);
        randomize(&mut store, 50 + i as u64, 0.5);
        let x = random_grid([2, 4, 4, 8], 60 + i as u64);
        let p = store.bind(None);
        let wrt_input = gradcheck(
            |_: &Tape<f64>, v: &Var<f64>| {
                b.forward(&p, v, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?.sum_all()
            },
            &x,
            settings,
        )
        .unwrap();
        assert!(wrt_input.passed, "{kind:?} input: {wrt_input:?}");

        let xv = constant(&x);
        let weights = random_grid([2, 4, 4, 8], 70);
        let reports = gradcheck_store(
            &store,
            &Tape::new(),
            |p| {
                b.forward(p, &xv, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?
                    .mul_const(&weights)?
                    .sum_all()
            },
            6,
            settings,
        )
        .unwrap();
        for (name, r) in &reports {
            assert!(r.passed, "{kind:?} {name}: {r:?}");
        }
    }
}

#[test]
fn param_counts_match_store() {
    for kind in KINDS {
        for (dim, side) in [(8, 4), (12, 4), (384, 16)] {
            let mut store = ParamStore::<f32>::new();
            PermutatorBlock::register(&mut store, "b", dim, side, 3, kind, 0.1).unwrap();
            assert_eq!(store.total_params(), PermutatorBlock::param_count(dim, 3, kind));
        }
    }
    let c = 384;
    let weighted = PermutatorBlock::param_count(c, 3, MixerKind::Weighted);
    let vanilla = PermutatorBlock::param_count(c, 3, MixerKind::Vanilla);
    assert_eq!(weighted - vanilla, SplitAttentionWeights::param_count(c, 4));
    assert_eq!(
        PermutatorBlock::param_count(c, 3, MixerKind::NoHeight),
        PermutatorBlock::param_count(c, 3, MixerKind::NoWidth)
    );
    // LN 4C, Permute-MLP 4(C²+C), split attention C²/4 + C/4 + 3C²/4 + 3C, MLP 6C² + 4C.
    assert_eq!(weighted, 4 * c + 4 * (c * c + c) + (c * c / 4 + c / 4 + 3 * c * c / 4 + 3 * c) + 6 * c * c + 4 * c);
}

#[test]
fn mixer_kind_serde_names() {
    assert_eq!(serde_json::to_string(&MixerKind::NoHeight).unwrap(), "\"no_height\"");
    let k: MixerKind = serde_json::from_str("\"position_blind\"").unwrap();
    assert_eq!(k, MixerKind::PositionBlind);
    assert!(!MixerKind::PositionBlind.mixes_height() && !MixerKind::PositionBlind.mixes_width());
    assert!(!MixerKind::Vanilla.uses_split_attention());
}
