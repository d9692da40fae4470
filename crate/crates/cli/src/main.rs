//! `vip`: inspect, run, verify, train and benchmark Vision Permutator models.
//!
//! Machine-readable results go to stdout as JSON lines; human-readable
//! progress and tables go to stderr. Exit status is 0 on success, 1 for usage
//! or configuration errors and 2 when a verification fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use vip_core::autograd::{Fault, GradcheckSettings};
use vip_core::train::{self, checkpoint, MetricRecord, SynthSpec, TrainConfig};
use vip_core::zoo::{self, Model, ViPConfig};
use vip_core::Tensor;

const THREADS_ENV: &str = "VIP_NUM_THREADS";

#[derive(Parser)]
#[command(name = "vip", version, about = "Vision Permutator models: parameters, inference, gradient checks, training, throughput")]
struct Cli {
    /// Matrix-product worker threads (defaults to all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print total and per-stage parameter counts.
    Params {
        /// Registry name, e.g. ViP-Small/7.
        model: String,
        /// Override the number of classes.
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Print evaluation-mode logits as a JSON array.
    Forward {
        #[arg(long, default_value = zoo::TINY)]
        model: String,
        /// Architecture JSON; overrides --model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights in VIPCKPT1 format. Without it, weights are initialized from --seed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Images in VIPDATA1 format.
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        input: Option<PathBuf>,
        /// Use seeded random images instead of --input.
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random images.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Classes of the head; inferred from the checkpoint when omitted.
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Finite-difference gradient check of a full model in 64-bit precision.
    Gradcheck {
        #[arg(long, default_value = zoo::TINY)]
        model: String,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probed elements per parameter tensor.
        #[arg(long, default_value_t = 3)]
        probes: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        /// Corrupt a backward rule on purpose (test hook).
        #[arg(long, value_enum, hide = true)]
        fault: Option<FaultArg>,
    },
    /// Train from a JSON TrainConfig.
    Train {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Measure forward throughput in images per second.
    Bench {
        #[arg(default_value = "ViP-Small/16")]
        model: String,
        #[arg(long, default_value_t = vip_bench::DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = vip_bench::MIN_TIMED_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic position task as VIPDATA1 train and val files.
    Synth {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// SynthSpec JSON; defaults to the standard 8-class task.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    GeluBackward,
}

/// Error with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn verification(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<vip_core::Error> for Failure {
    fn from(e: vip_core::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T) -> CmdResult {
    let line = serde_json::to_string(value).map_err(|e| Failure::usage(e.to_string()))?;
    println!("{line}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: thread count must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = vip_core::tensor::set_worker_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Params { model, num_classes } => cmd_params(&model, num_classes),
        Command::Forward {
            model,
            config,
            ckpt,
            input,
            random,
            seed,
            batch,
            num_classes,
        } => cmd_forward(&model, config, ckpt, input, random, seed, batch, num_classes),
        Command::Gradcheck {
            model,
            tol,
            eps,
            seed,
            probes,
            batch,
            num_classes,
            fault,
        } => cmd_gradcheck(&model, tol, eps, seed, probes, batch, num_classes, fault),
        Command::Train {
            config,
            seed,
            output_dir,
            resume,
        } => cmd_train(config, seed, output_dir, resume),
        Command::Bench {
            model,
            batch,
            iters,
            warmup,
            seed,
        } => cmd_bench(&model, batch, iters, warmup, seed),
        Command::Synth { train, val, spec } => cmd_synth(train, val, spec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_params(name: &str, num_classes: Option<usize>) -> CmdResult {
    let mut cfg = zoo::config(name)?;
    if let Some(k) = num_classes {
        cfg = cfg.with_num_classes(k);
        cfg.validate()?;
    }
    let total = zoo::count_params(&cfg);
    let groups = zoo::param_groups(&cfg);
    let reference = zoo::reference_params(name);
    let delta_pct = reference.map(|r| 100.0 * (total as f64 - r as f64) / r as f64);

    eprintln!("{name}");
    for (g, n) in &groups {
        eprintln!("  {g:<8} {n:>12}");
    }
    eprintln!("  {:<8} {total:>12}", "total");
    if let (Some(r), Some(d)) = (reference, delta_pct) {
        eprintln!("  reference {:.0}M, delta {d:+.2}%", r as f64 / 1e6);
    }
    emit(&json!({
        "model": name,
        "total": total,
        "groups": groups.iter().map(|(g, n)| json!({"name": g, "params": n})).collect::<Vec<_>>(),
        "reference": reference,
        "delta_pct": delta_pct,
    }))
}

fn load_config(model: &str, config: Option<PathBuf>) -> Result<ViPConfig, Failure> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Ok(ViPConfig::from_json(&text)?)
        }
        None => Ok(zoo::config(model)?),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_forward(
    model: &str,
    config: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    input: Option<PathBuf>,
    random: bool,
    seed: u64,
    batch: usize,
    num_classes: Option<usize>,
) -> CmdResult {
    let mut cfg = load_config(model, config)?;
    let tensors = ckpt.as_deref().map(checkpoint::read_file).transpose()?;
    let classes = num_classes.or_else(|| tensors.as_ref()?.get("head.bias").map(|t| t.numel()));
    if let Some(k) = classes {
        cfg = cfg.with_num_classes(k);
        cfg.validate()?;
    }
    let mut m = Model::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(path) = &ckpt {
        checkpoint::load_checkpoint(path, &mut m.store)?;
    }
    let images: Tensor<f32> = if random {
        if batch == 0 {
            return Err(Failure::usage("--batch must be at least 1"));
        }
        vip_bench::random_images(&cfg, batch, seed)
    } else {
        let path = input.expect("clap enforces --input or --random");
        train::Dataset::load(&path)?.images
    };
    let logits = m.predict(&images)?;
    let k = cfg.num_classes;
    let rows: Vec<&[f32]> = logits.data().chunks(k).collect();
    emit(&rows)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    model: &str,
    tol: f64,
    eps: f64,
    seed: u64,
    probes: usize,
    batch: usize,
    num_classes: usize,
    fault: Option<FaultArg>,
) -> CmdResult {
    let cfg = zoo::config(model)?.with_num_classes(num_classes);
    if probes == 0 || batch == 0 {
        return Err(Failure::usage("--probes and --batch must be at least 1"));
    }
    let fault = match fault {
        Some(FaultArg::GeluBackward) => Fault::GeluBackward,
        None => Fault::None,
    };
    let report = zoo::gradcheck_model(&cfg, seed, batch, probes, GradcheckSettings::new(eps, tol), fault)?;
    for l in &report.layers {
        eprintln!(
            "{} {:<36} max rel err {:.3e}",
            if l.passed { "ok  " } else { "FAIL" },
            l.name,
            l.max_rel_error
        );
    }
    emit(&report)?;
    if report.passed {
        eprintln!("gradcheck passed: max rel err {:.3e} <= {tol:e}", report.max_rel_error);
        Ok(())
    } else {
        let worst = report.layers.iter().find(|l| Some(&l.name) == report.worst_layer.as_ref());
        let at = worst
            .and_then(|l| l.worst.map(|p| format!(" at `{}`[{}]", l.name, p.index)))
            .unwrap_or_default();
        Err(Failure::verification(format!(
            "gradcheck failed: max rel err {:.3e}{at} exceeds {tol:e}",
            report.max_rel_error
        )))
    }
}

fn cmd_train(path: PathBuf, seed: Option<u64>, output_dir: Option<PathBuf>, resume: bool) -> CmdResult {
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut cfg = TrainConfig::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let (train_set, val_set) = train::load_data(&cfg)?;
    eprintln!(
        "training {} on {} train / {} val images, {} classes, peak lr {:.3e}",
        cfg.model_config.as_ref().map_or(cfg.model.as_str(), |c| c.name.as_str()),
        train_set.len(),
        val_set.len(),
        train_set.classes,
        cfg.peak_lr()
    );
    let mut report = |r: &MetricRecord| {
        eprintln!("epoch {:>3} {:<5} loss {:.4} top1 {:.4}", r.epoch, r.split, r.loss, r.top1);
    };
    let outcome = train::train_loop(&cfg, &train_set, &val_set, resume, Some(&mut report))?;
    emit(&json!({
        "epochs_completed": outcome.epochs_completed,
        "best_top1": outcome.best_top1,
        "final_top1": outcome.final_top1,
        "initial_loss": outcome.initial_loss,
        "params": outcome.num_params,
        "metrics": outcome.metrics_path,
        "best_checkpoint": outcome.best_checkpoint,
    }))
}

fn cmd_bench(name: &str, batch: usize, iters: usize, warmup: usize, seed: u64) -> CmdResult {
    let cfg = zoo::config(name)?;
    eprintln!("benchmarking {name}: batch {batch}, {warmup} warmup + {iters} timed iterations");
    let report = vip_bench::throughput(&cfg, batch, warmup, iters, seed)?;
    eprintln!(
        "{:.2} img/s (std {:.2}), {:.1} ms per batch, {} threads",
        report.mean_img_per_s, report.std_img_per_s, report.mean_ms, report.threads
    );
    if report.relative_std() >= 0.15 {
        eprintln!("warning: std/mean = {:.3} >= 0.15; the machine may be busy", report.relative_std());
    }
    emit(&report)
}

fn cmd_synth(train_path: PathBuf, val_path: PathBuf, spec: Option<PathBuf>) -> CmdResult {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    let (t, v) = train::synth_dataset(&spec)?;
    t.save(&train_path)?;
    v.save(&val_path)?;
    eprintln!("wrote {} train and {} val images", t.len(), v.len());
    emit(&json!({"train": train_path, "val": val_path, "train_len": t.len(), "val_len": v.len(), "classes": t.classes}))
}
