//! Acceptance suite. Prints one PASS/FAIL/WARN line per criterion and exits
//! non-zero when any hard criterion fails.
//!
//! The training criteria build a few dozen tiny models; expect several
//! minutes on a single core.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_core::autograd::{gradcheck, Fault, GradcheckSettings};
use vip_core::nn::{gradcheck_store, init_params, Linear, Mode, ParamStore};
use vip_core::permutator::oracle::{self, Affine};
use vip_core::permutator::{
    channel_mlp_forward, mix_height, mix_width, permute_mlp_forward, weighted_permute_mlp_forward, PermuteMlpWeights,
    PermutatorBlock, SplitAttentionWeights, SPLIT_ATTENTION_REDUCTION,
};
use vip_core::train::{
    self, adamw_step, checkpoint, lr_for, AdamW, OptimizerState, Progress, TrainConfig, TrainOutcome,
};
use vip_core::zoo::{self, ViPConfig};
use vip_core::{MixerKind, Model, Tensor, Var};

const QUICKSTART: &str = include_str!("../../../configs/synthetic.json");

/// Epochs per ablation run; the position caps of the crippled variants
/// (25% and 50%) hold at any training length.
const ABLATION_EPOCHS: usize = 8;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET: Duration = Duration::from_secs(600);

enum Status {
    Pass,
    Fail,
    Warn,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail }
    }
}

type Criterion = fn(&mut Shared) -> Result<Verdict, String>;

/// Runs reused across criteria 5 and 6.
#[derive(Default)]
struct Shared {
    ablation: Vec<(MixerKind, u64, f64)>,
    scratch: Option<tempfile::TempDir>,
}

impl Shared {
    fn dir(&mut self, name: &str) -> std::path::PathBuf {
        let root = self.scratch.get_or_insert_with(|| tempfile::tempdir().expect("temp dir"));
        root.path().join(name)
    }

    fn top1(&self, kind: MixerKind) -> Vec<f64> {
        self.ablation.iter().filter(|r| r.0 == kind).map(|r| r.2).collect()
    }
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b) / scale
}

fn randomize<T: vip_core::Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = T::from_f64(rng.random_range(-scale..scale));
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn c1_oracle(_: &mut Shared) -> Result<Verdict, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut plain, mut weighted, mut worst) = (0, 0, 0.0f64);
    for n in [2, 4, 8] {
        for s in [1, 2, 3] {
            let c = n * s;
            for _ in 0..15 {
                let mut store = ParamStore::<f32>::new();
                let w = PermuteMlpWeights::register(&mut store, "m", c).map_err(|e| e.to_string())?;
                let a = SplitAttentionWeights::register(&mut store, "m.attn", c, SPLIT_ATTENTION_REDUCTION).ok();
                randomize(&mut store, &mut rng, 0.5);
                let b = rng.random_range(1..=3);
                let x = Tensor::<f32>::from_fn([b, n, n, c], |_| rng.random_range(-1.0..1.0));
                let p = store.bind(None);
                let xv = Var::constant(x.clone());

                // Reference in 64-bit on the same (widened) numbers.
                let wide = store.cast::<f64>();
                let x64 = x.cast::<f64>();
                let aff = |l: &Linear| Affine::from_store(&wide, l);
                let y = permute_mlp_forward(&p, &xv, &w, s).map_err(|e| e.to_string())?;
                let o = oracle::permute_mlp(&x64, &aff(&w.proj_h), &aff(&w.proj_w), &aff(&w.proj_c), &aff(&w.proj), s);
                worst = worst.max(rel(&y.value().cast(), &o));
                plain += 1;

                if let Some(a) = a {
                    let y = weighted_permute_mlp_forward(&p, &xv, &w, &a, s).map_err(|e| e.to_string())?;
                    let o = oracle::weighted_permute_mlp(
                        &x64,
                        &aff(&w.proj_h),
                        &aff(&w.proj_w),
                        &aff(&w.proj_c),
                        &aff(&w.proj),
                        &aff(&a.reduce),
                        &aff(&a.expand),
                        s,
                    );
                    worst = worst.max(rel(&y.value().cast(), &o));
                    weighted += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::check(
        worst <= 1e-6 && plain >= 100 && weighted >= 100 && secs < 10.0,
        format!("{plain} plain + {weighted} weighted grids, max rel err {worst:.2e} (tol 1e-6), {secs:.2}s (limit 10s)"),
    ))
}

fn gather_axis(x: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let mut out = x.clone();
    let mut idx = vec![0; 4];
    for flat in 0..x.numel() {
        let mut r = flat;
        for d in (0..4).rev() {
            idx[d] = r % shape[d];
            r /= shape[d];
        }
        let mut src = idx.clone();
        src[axis] = perm[idx[axis]];
        out.data_mut()[flat] = x.at(&src);
    }
    out
}

fn c2_equivariance(_: &mut Shared) -> Result<Verdict, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut width_ok, mut height_ok, mut local_ok) = (0, 0, 0);
    const CASES: usize = 50;
    for _ in 0..CASES {
        let n = [2, 4, 8][rng.random_range(0..3)];
        let s = rng.random_range(1..=3);
        let c = n * s;
        let b = rng.random_range(1..=2);
        let mut store = ParamStore::<f64>::new();
        let w = PermuteMlpWeights::register(&mut store, "m", c).map_err(|e| e.to_string())?;
        let fc1 = Linear::register(&mut store, "fc1", c, 3 * c).map_err(|e| e.to_string())?;
        let fc2 = Linear::register(&mut store, "fc2", 3 * c, c).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng, 0.5);
        let p = store.bind(None);
        let x = Tensor::<f64>::from_fn([b, n, n, c], |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let run = |f: &dyn Fn(&Var<f64>) -> vip_core::Result<Var<f64>>, t: &Tensor<f64>| {
            f(&Var::constant(t.clone())).map(|v| v.value().clone())
        };

        // Shuffling columns commutes with height mixing.
        let mh = |v: &Var<f64>| mix_height(&p, v, &w.proj_h, s);
        let lhs = run(&mh, &gather_axis(&x, 2, &perm)).map_err(|e| e.to_string())?;
        let rhs = gather_axis(&run(&mh, &x).map_err(|e| e.to_string())?, 2, &perm);
        width_ok += lhs.bit_eq(&rhs) as usize;

        // Shuffling rows commutes with width mixing.
        let mw = |v: &Var<f64>| mix_width(&p, v, &w.proj_w, s);
        let lhs = run(&mw, &gather_axis(&x, 1, &perm)).map_err(|e| e.to_string())?;
        let rhs = gather_axis(&run(&mw, &x).map_err(|e| e.to_string())?, 1, &perm);
        height_ok += lhs.bit_eq(&rhs) as usize;

        // Perturbing one token moves only that token's channel outputs.
        let (tb, ti, tj) = (rng.random_range(0..b), rng.random_range(0..n), rng.random_range(0..n));
        let mut bumped = x.clone();
        for k in 0..c {
            bumped.set(&[tb, ti, tj, k], rng.random_range(-1.0..1.0));
        }
        let branch = |v: &Var<f64>| w.proj_c.forward(&p, v);
        let mlp = |v: &Var<f64>| channel_mlp_forward(&p, v, &fc1, &fc2);
        let mut local = true;
        for f in [&branch as &dyn Fn(&Var<f64>) -> _, &mlp] {
            let (y0, y1) = (run(f, &x).map_err(|e| e.to_string())?, run(f, &bumped).map_err(|e| e.to_string())?);
            for bi in 0..b {
                for i in 0..n {
                    for j in 0..n {
                        if (bi, i, j) == (tb, ti, tj) {
                            continue;
                        }
                        for k in 0..c {
                            let (u, v) = (y0.at(&[bi, i, j, k]), y1.at(&[bi, i, j, k]));
                            local &= u.to_bits() == v.to_bits();
                        }
                    }
                }
            }
            local &= (0..c).any(|k| y0.at(&[tb, ti, tj, k]) != y1.at(&[tb, ti, tj, k]));
        }
        local_ok += local as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::check(
        width_ok == CASES && height_ok == CASES && local_ok == CASES && secs < 5.0,
        format!(
            "exact on {width_ok}/{CASES} width, {height_ok}/{CASES} height, {local_ok}/{CASES} locality cases, {secs:.2}s (limit 5s)"
        ),
    ))
}

fn c3_gradients(_: &mut Shared) -> Result<Verdict, String> {
    let start = Instant::now();
    let settings = GradcheckSettings::new(1e-5, 1e-3);
    let mut store = ParamStore::<f64>::new();
    let block = PermutatorBlock::register(&mut store, "blk", 12, 4, 3, MixerKind::Weighted, 0.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    init_params(&mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.4);
    let x = Tensor::<f64>::from_fn([2, 4, 4, 12], |_| rng.random_range(-1.0..1.0));
    let weights = Tensor::<f64>::from_fn([2, 4, 4, 12], |_| rng.random_range(-1.0..1.0));
    let p = store.bind(None);
    let wrt_input = gradcheck(
        |_, v| {
            block
                .forward(&p, v, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?
                .mul_const(&weights)?
                .sum_all()
        },
        &x,
        settings,
    )
    .map_err(|e| e.to_string())?;
    let xv = Var::constant(x);
    let per_param = gradcheck_store(
        &store,
        &vip_core::Tape::new(),
        |p| {
            block
                .forward(p, &xv, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?
                .mul_const(&weights)?
                .sum_all()
        },
        6,
        settings,
    )
    .map_err(|e| e.to_string())?;
    let block_err = per_param.iter().map(|(_, r)| r.max_rel_error).fold(wrt_input.max_rel_error, f64::max);

    let tiny = ViPConfig::tiny(4);
    let model = zoo::gradcheck_model(&tiny, 304, 2, 4, settings, Fault::None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::check(
        block_err <= 1e-3 && model.max_rel_error <= 1e-3 && secs < 120.0,
        format!(
            "block max rel err {block_err:.2e}, ViP-Tiny max rel err {:.2e} over {} tensors (tol 1e-3), {secs:.1}s",
            model.max_rel_error,
            model.layers.len()
        ),
    ))
}

fn c4_params(_: &mut Shared) -> Result<Verdict, String> {
    let start = Instant::now();
    let order = ["ViP-Small/16", "ViP-Small/7", "ViP-Small/14", "ViP-Medium/7", "ViP-Large/7"];
    let mut counts = Vec::new();
    let mut within = true;
    let mut parts = Vec::new();
    for name in order {
        let cfg = zoo::config(name).map_err(|e| e.to_string())?;
        let n = zoo::count_params(&cfg);
        let reference = zoo::reference_params(name).ok_or(format!("no reference for {name}"))?;
        let delta = (n as f64 - reference as f64) / reference as f64;
        within &= delta.abs() <= 0.10;
        parts.push(format!("{name} {:.2}M ({:+.1}%)", n as f64 / 1e6, 100.0 * delta));
        counts.push(n);
    }
    let ordered = counts.windows(2).all(|w| w[0] < w[1]);
    let secs = start.elapsed().as_secs_f64();
    Ok(Verdict::check(
        within && ordered && secs < 1.0,
        format!("{}; ordered: {ordered}", parts.join(", ")),
    ))
}

fn quickstart() -> Result<TrainConfig, String> {
    TrainConfig::from_json(QUICKSTART).map_err(|e| e.to_string())
}

fn ablation_run(shared: &mut Shared, kind: MixerKind, seed: u64) -> Result<f64, String> {
    let mut cfg = quickstart()?;
    cfg.epochs = ABLATION_EPOCHS;
    cfg.seed = seed;
    cfg.model_config = Some(ViPConfig::tiny(8).with_mixer(kind));
    cfg.output_dir = shared.dir(&format!("ablation-{kind:?}-{seed}"));
    let (tr, va) = train::load_data(&cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = train::train_loop(&cfg, &tr, &va, false, None).map_err(|e| e.to_string())?;
    if start.elapsed() > RUN_BUDGET {
        return Err(format!("{kind:?} seed {seed} took {:.0}s", start.elapsed().as_secs_f64()));
    }
    shared.ablation.push((kind, seed, out.best_top1));
    Ok(out.best_top1)
}

fn c5_ablation(shared: &mut Shared) -> Result<Verdict, String> {
    let mut slowest = 0.0f64;
    for kind in [MixerKind::Weighted, MixerKind::NoHeight, MixerKind::NoWidth] {
        for seed in ABLATION_SEEDS {
            let t = Instant::now();
            ablation_run(shared, kind, seed)?;
            slowest = slowest.max(t.elapsed().as_secs_f64());
        }
    }
    let full = median(shared.top1(MixerKind::Weighted));
    let no_h = median(shared.top1(MixerKind::NoHeight));
    let no_w = median(shared.top1(MixerKind::NoWidth));
    let (gap_h, gap_w) = (100.0 * (full - no_h), 100.0 * (full - no_w));
    Ok(Verdict::check(
        gap_h >= 5.0 && gap_w >= 5.0,
        format!(
            "median val top-1: full {:.1}%, no_height {:.1}% (gap {gap_h:.1}), no_width {:.1}% (gap {gap_w:.1}); need >= 5; slowest run {slowest:.0}s",
            100.0 * full,
            100.0 * no_h,
            100.0 * no_w
        ),
    ))
}

fn c6_fusion(shared: &mut Shared) -> Result<Verdict, String> {
    for seed in ABLATION_SEEDS {
        ablation_run(shared, MixerKind::Vanilla, seed)?;
    }
    if shared.top1(MixerKind::Weighted).len() != ABLATION_SEEDS.len() {
        for seed in ABLATION_SEEDS {
            ablation_run(shared, MixerKind::Weighted, seed)?;
        }
    }
    let weighted = median(shared.top1(MixerKind::Weighted));
    let vanilla = median(shared.top1(MixerKind::Vanilla));
    let ok = weighted >= vanilla - 0.01;
    Ok(Verdict {
        status: if ok { Status::Pass } else { Status::Warn },
        detail: format!(
            "median val top-1 weighted {:.1}% vs vanilla {:.1}% (warn-only, need weighted >= vanilla - 1)",
            100.0 * weighted,
            100.0 * vanilla
        ),
    })
}

fn smoke_run(shared: &mut Shared, name: &str) -> Result<(TrainOutcome, Vec<u8>), String> {
    let mut cfg = quickstart()?;
    cfg.stop_at_top1 = Some(0.95);
    cfg.output_dir = shared.dir(name);
    let (tr, va) = train::load_data(&cfg).map_err(|e| e.to_string())?;
    let out = train::train_loop(&cfg, &tr, &va, false, None).map_err(|e| e.to_string())?;
    let metrics = std::fs::read(&out.metrics_path).map_err(|e| e.to_string())?;
    Ok((out, metrics))
}

fn c7_training(shared: &mut Shared) -> Result<Verdict, String> {
    let cfg = quickstart()?;
    let (a, metrics_a) = smoke_run(shared, "smoke-a")?;
    let (b, metrics_b) = smoke_run(shared, "smoke-b")?;
    let ckpt = |o: &TrainOutcome| std::fs::read(&o.best_checkpoint).map_err(|e| e.to_string());
    let deterministic = metrics_a == metrics_b && ckpt(&a)? == ckpt(&b)?;
    let ln_k = (8f64).ln();
    let initial = a.initial_loss.ok_or("no optimization step ran")?;
    let ok = a.best_top1 >= 0.95 && a.epochs_completed <= cfg.epochs && deterministic && (initial - ln_k).abs() <= 0.1;
    Ok(Verdict::check(
        ok,
        format!(
            "val top-1 {:.1}% after {} of {} epochs; initial loss {initial:.4} vs ln 8 = {ln_k:.4}; repeat run identical: {deterministic}",
            100.0 * a.best_top1,
            a.epochs_completed,
            cfg.epochs
        ),
    ))
}

fn c8_recipe(_: &mut Shared) -> Result<Verdict, String> {
    let lr_ok = lr_for(2048) == 2e-3;
    let mut store = ParamStore::<f64>::new();
    let layer = Linear::register(&mut store, "fc", 16, 8).map_err(|e| e.to_string())?;
    randomize(&mut store, &mut ChaCha8Rng::seed_from_u64(808), 1.0);
    let w0 = store.tensor(layer.weight).clone();
    let b0 = store.tensor(layer.bias).clone();
    let mut state = OptimizerState::new(&store);
    let opt = AdamW::default();
    let (lr, steps) = (1e-3, 100);
    let zeros: Vec<_> = store.iter().map(|(_, _, e)| Some(Tensor::zeros(e.tensor().shape().to_vec()))).collect();
    for _ in 0..steps {
        adamw_step(&mut store, &mut state, &zeros, lr, &opt).map_err(|e| e.to_string())?;
    }
    let law = (1.0 - lr * opt.weight_decay).powi(steps);
    let shrink_err = store.tensor(layer.weight).max_abs_diff(&w0.map(|v| v * law));
    let bias_kept = store.tensor(layer.bias).bit_eq(&b0);
    Ok(Verdict::check(
        lr_ok && shrink_err <= 1e-7 && bias_kept,
        format!(
            "lr_for(2048) = {:e}; zero-grad shrink over {steps} steps off by {shrink_err:.1e} (tol 1e-7); bias untouched: {bias_kept}",
            lr_for(2048)
        ),
    ))
}

/// Byte count of a checkpoint from first principles.
fn expected_size(entries: &[(String, Vec<usize>)]) -> u64 {
    let header = 8 + 4;
    let body: usize = entries
        .iter()
        .map(|(name, shape)| 4 + name.len() + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>())
        .sum();
    (header + body) as u64
}

fn c9_persistence(shared: &mut Shared) -> Result<Verdict, String> {
    let cfg = ViPConfig::tiny(8);
    let model = Model::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(909)).map_err(|e| e.to_string())?;
    let path = shared.dir("roundtrip.ckpt");
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| e.to_string())?;
    checkpoint::save_checkpoint(&path, &model.store).map_err(|e| e.to_string())?;
    let mut loaded = Model::<f32>::empty(&cfg).map_err(|e| e.to_string())?;
    checkpoint::load_checkpoint(&path, &mut loaded.store).map_err(|e| e.to_string())?;
    let params_exact = loaded.store.bit_eq(&model.store);
    let entries: Vec<_> = model.store.iter().map(|(_, n, e)| (n.to_string(), e.tensor().shape().to_vec())).collect();
    let size = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
    let size_ok = size == expected_size(&entries);

    // Training checkpoints round-trip the optimizer too.
    let mut state = OptimizerState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(910);
    for t in state.m.iter_mut().chain(state.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    }
    state.step = 123_457;
    let progress = Progress { epoch: 17, best_top1: 0.875 };
    let tpath = shared.dir("training.ckpt");
    checkpoint::save_training_checkpoint(&tpath, &model.store, &state, progress).map_err(|e| e.to_string())?;
    let mut again = Model::<f32>::empty(&cfg).map_err(|e| e.to_string())?;
    let (s2, p2) = checkpoint::load_training_checkpoint(&tpath, &mut again.store).map_err(|e| e.to_string())?;
    let optim_exact = again.store.bit_eq(&model.store)
        && s2.step == state.step
        && p2 == progress
        && s2.m.iter().zip(&state.m).chain(s2.v.iter().zip(&state.v)).all(|(a, b)| a.bit_eq(b));

    Ok(Verdict::check(
        params_exact && size_ok && optim_exact,
        format!(
            "{} tensors bit-exact: {params_exact}; {size} bytes vs closed form {}; optimizer state exact: {optim_exact}",
            entries.len(),
            expected_size(&entries)
        ),
    ))
}

fn main() -> ExitCode {
    // Stay quiet when cargo test is filtered to other targets.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let criteria: [(u8, &str, Criterion); 9] = [
        (1, "oracle equivalence", c1_oracle),
        (2, "equivariance and locality", c2_equivariance),
        (3, "gradient soundness", c3_gradients),
        (4, "parameter accounting", c4_params),
        (5, "height/width ablation", c5_ablation),
        (6, "weighted vs vanilla fusion", c6_fusion),
        (7, "training smoke", c7_training),
        (8, "recipe arithmetic", c8_recipe),
        (9, "persistence", c9_persistence),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let verdict = run(&mut shared).unwrap_or_else(|e| Verdict {
            status: Status::Fail,
            detail: format!("error: {e}"),
        });
        let tag = match verdict.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Warn => "WARN",
        };
        println!(
            "[{tag}] {id:>2} {name}: {} [{:.1}s]",
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("[NOTE] 10 full-scale accuracy: ImageNet top-1 is out of desk-scale reach; criteria 1-7 stand in for it");
    if failed == 0 {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
