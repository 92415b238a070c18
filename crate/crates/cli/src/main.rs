//! Operator surface: train, evaluate, export, verify kernel equivalence,
//! report model sizes, and micro-benchmark the packed kernels.
//!
//! Exit codes: 0 success, 1 verification/IO failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use bitgrad_core::arch::{build_network, size_report, ArchSpec, Geometry};
use bitgrad_core::data::{load_cifar10, load_mnist, Dataset};
use bitgrad_core::kernels::{gemm_nt, xnor_gemm, GemmProblem, OffsetMode};
use bitgrad_core::modelio::{
    export_packed, load_checkpoint, load_packed, save_checkpoint, save_packed, Checkpoint,
};
use bitgrad_core::tensor::{BitTensor, PadRole, Tensor};
use bitgrad_core::train::{evaluate, fit, TrainConfig};

#[derive(Parser)]
#[command(
    name = "bitgrad",
    version,
    about = "Binary neural network trainer and packed-inference engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ArchArg {
    /// Named architecture preset.
    #[arg(long, conflicts_with = "config")]
    arch: Option<String>,
    /// Architecture config file (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ArchArg {
    fn resolve(&self) -> Result<ArchSpec, CliError> {
        match (&self.arch, &self.config) {
            (Some(name), None) => {
                ArchSpec::preset(name).map_err(|e| CliError::Usage(e.to_string()))
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
                ArchSpec::parse_config(&text).map_err(|e| CliError::Runtime(e.to_string()))
            }
            _ => Err(CliError::Usage(format!(
                "exactly one of --arch or --config is required (presets: {})",
                ArchSpec::preset_names().join(", ")
            ))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus a checkpoint.
    Train {
        #[command(flatten)]
        arch: ArchArg,
        /// Dataset directory (or set BITGRAD_DATA_DIR).
        #[arg(long, env = "BITGRAD_DATA_DIR")]
        data_dir: PathBuf,
        /// Output directory for checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the long CIFAR-10 schedule instead of the 15-epoch smoke run.
        #[arg(long)]
        full: bool,
    },
    /// Evaluate a checkpoint (float path) or packed model (xnor path).
    Eval {
        #[arg(long, conflicts_with = "packed")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        packed: Option<PathBuf>,
        #[arg(long, env = "BITGRAD_DATA_DIR")]
        data_dir: PathBuf,
        /// Evaluate the best-accuracy parameters instead of the latest.
        #[arg(long)]
        best: bool,
        #[arg(long)]
        json: bool,
    },
    /// Export a checkpoint as a packed deployment model.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Offset handling: "explicit" (2*bitcount - n) or "learned"
        /// (bitcount only, correction folded into normalization).
        #[arg(long, default_value = "explicit")]
        offset: String,
        /// Export the best-accuracy parameters instead of the latest.
        #[arg(long)]
        best: bool,
    },
    /// Run the xnor/popcount vs float equivalence suite.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 4096)]
        max_k: usize,
    },
    /// Print the exact size accounting for an architecture.
    Size {
        #[command(flatten)]
        arch: ArchArg,
        #[arg(long)]
        json: bool,
    },
    /// Micro-benchmark packed vs float GEMM throughput.
    Bench {
        /// Comma-separated reduction lengths.
        #[arg(long, default_value = "256,1024,4096")]
        k_sizes: String,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
        #[arg(long)]
        json: bool,
    },
}

enum CliError {
    /// Bad invocation (missing or conflicting flags): exit 2, like a parse error.
    Usage(String),
    /// IO or verification failure: exit 1.
    Runtime(String),
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Runtime(msg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_dataset(spec: &ArchSpec, dir: &Path) -> Result<Dataset, String> {
    match spec.geometry {
        Geometry::Mnist => load_mnist(dir).map_err(|e| e.to_string()),
        Geometry::Cifar => load_cifar10(dir).map_err(|e| e.to_string()),
        Geometry::ImageNet => Err(
            "ImageNet ingestion is out of scope; train on mnist/cifar geometries".into(),
        ),
    }
}

fn default_train_config(spec: &ArchSpec, full: bool) -> TrainConfig {
    match spec.geometry {
        Geometry::Mnist => TrainConfig::mnist_default(),
        _ if full => TrainConfig::cifar_full(),
        _ => TrainConfig::cifar_smoke(),
    }
}

fn run(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Train {
            arch,
            data_dir,
            out,
            resume,
            epochs,
            batch_size,
            lr,
            seed,
            full,
        } => {
            let spec = arch.resolve()?;
            let graph = build_network(&spec).map_err(|e| e.to_string())?;
            let data = load_dataset(&spec, &data_dir)?;
            let mut cfg = default_train_config(&spec, full);
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.lr_decay_epochs.retain(|&d| d < e);
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.lr_initial = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let metrics_path = out.join("metrics.jsonl");
            let mut metrics_file =
                std::fs::File::create(&metrics_path).map_err(|e| e.to_string())?;
            let state = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path).map_err(|e| e.to_string())?;
                    if ckpt.arch != spec {
                        return Err(CliError::Runtime(
                            "checkpoint architecture differs from requested".into(),
                        ));
                    }
                    Some(ckpt.into_state())
                }
                None => None,
            };
            use std::io::Write;
            let (state, _metrics) = fit(&graph, &data, &cfg, state, |em| {
                let line = serde_json::to_string(em).expect("metrics serialize");
                println!("{line}");
                let _ = writeln!(metrics_file, "{line}");
            })
            .map_err(|e| e.to_string())?;
            let ckpt_path = out.join("checkpoint.bnn");
            save_checkpoint(&ckpt_path, &Checkpoint::from_state(&spec, &state))
                .map_err(|e| e.to_string())?;
            println!(
                "saved {} (best test top-1 {:.4}) and {}",
                ckpt_path.display(),
                state.best_top1,
                metrics_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            checkpoint,
            packed,
            data_dir,
            best,
            json,
        } => {
            let (top1, top5, label) = match (checkpoint, packed) {
                (Some(path), None) => {
                    let ckpt = load_checkpoint(&path).map_err(|e| e.to_string())?;
                    let graph = build_network(&ckpt.arch).map_err(|e| e.to_string())?;
                    let data = load_dataset(&ckpt.arch, &data_dir)?;
                    let mut params = if best { ckpt.best_params } else { ckpt.params };
                    let (t1, t5) = evaluate(&graph, &mut params, &data.test, 256)
                        .map_err(|e| e.to_string())?;
                    (t1, t5, ckpt.arch.display_name())
                }
                (None, Some(path)) => {
                    let model = load_packed(&path).map_err(|e| e.to_string())?;
                    let data = load_dataset(&model.arch, &data_dir)?;
                    let (t1, t5) = eval_packed(&model, &data).map_err(|e| e.to_string())?;
                    (t1, t5, model.arch.display_name())
                }
                _ => {
                    return Err(CliError::Usage(
                        "exactly one of --checkpoint or --packed is required".into(),
                    ))
                }
            };
            if json {
                println!(
                    "{}",
                    serde_json::json!({"model": label, "top1": top1, "top5": top5})
                );
            } else {
                println!("{label}: top-1 {top1:.4}  top-5 {top5:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Export {
            checkpoint,
            out,
            offset,
            best,
        } => {
            let mode = match offset.as_str() {
                "explicit" => OffsetMode::Explicit,
                "learned" => OffsetMode::Learned,
                other => {
                    return Err(CliError::Usage(format!("unknown offset mode {other:?}")))
                }
            };
            let ckpt = load_checkpoint(&checkpoint).map_err(|e| e.to_string())?;
            let params = if best { &ckpt.best_params } else { &ckpt.params };
            let model = export_packed(&ckpt.arch, params, mode).map_err(|e| e.to_string())?;
            save_packed(&out, &model).map_err(|e| e.to_string())?;
            let bytes = std::fs::metadata(&out).map_err(|e| e.to_string())?.len();
            println!(
                "packed {} -> {} ({} bytes, {:.2} KB)",
                ckpt.arch.display_name(),
                out.display(),
                bytes,
                bytes as f64 / 1024.0
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Verify { trials, max_k } => {
            let mismatches = run_verify(trials, max_k);
            println!(
                "verify: {trials} trials per boundary k plus randomized sweep, max k {max_k}: {mismatches} mismatches"
            );
            if mismatches == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }

        Command::Size { arch, json } => {
            let spec = arch.resolve()?;
            let report = size_report(&spec).map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                print!("{report}");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Bench {
            k_sizes,
            repeats,
            json,
        } => {
            let ks: Result<Vec<usize>, _> =
                k_sizes.split(',').map(|s| s.trim().parse()).collect();
            let ks = ks.map_err(|_| format!("bad --k-sizes {k_sizes:?}"))?;
            run_bench(&ks, repeats.max(1), json);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn eval_packed(
    model: &bitgrad_core::modelio::PackedModel,
    data: &Dataset,
) -> bitgrad_core::Result<(f32, f32)> {
    let n = data.test.len();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let sample: usize = data.test.images.shape()[1..].iter().product();
    let batch = 256usize;
    let mut start = 0;
    while start < n {
        let count = batch.min(n - start);
        let mut shape = data.test.images.shape().to_vec();
        shape[0] = count;
        let slice = Tensor::new(
            shape,
            data.test.images.data()[start * sample..(start + count) * sample].to_vec(),
        )?;
        let logits = model.forward(&slice)?;
        let classes = logits.shape()[1];
        for i in 0..count {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let label = data.test.labels[start + i] as usize;
            let mut best = 0;
            let mut better = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
                if v > row[label] || (v == row[label] && j < label) {
                    better += 1;
                }
            }
            if best == label {
                top1 += 1;
            }
            if better < 5.min(classes) {
                top5 += 1;
            }
        }
        start += count;
    }
    Ok((top1 as f32 / n as f32, top5 as f32 / n as f32))
}

/// Randomized bit-exactness sweep: packed Explicit output must equal the
/// +-1 float dot product with zero tolerance, and 2*Learned - k must equal
/// Explicit, for boundary ks and random ks up to max_k.
fn run_verify(trials: usize, max_k: usize) -> u64 {
    let mut mismatches = 0u64;
    let mut seed = 0x5DEECE66Du64;
    let mut next = move || {
        seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        seed
    };
    let boundary: Vec<usize> = [1, 7, 63, 64, 65, 100, 1152, 4096]
        .into_iter()
        .filter(|&k| k <= max_k)
        .collect();
    for &k in &boundary {
        for _ in 0..trials {
            mismatches += one_trial(k, &mut next);
        }
    }
    // Randomized k sweep across the full range.
    for _ in 0..trials {
        let k = 1 + (next() as usize) % max_k;
        mismatches += one_trial(k, &mut next);
    }
    mismatches
}

fn one_trial(k: usize, next: &mut impl FnMut() -> u64) -> u64 {
    let a: Vec<f32> = (0..k)
        .map(|_| if next() >> 63 == 1 { 1.0 } else { -1.0 })
        .collect();
    let b: Vec<f32> = (0..k)
        .map(|_| if next() >> 63 == 1 { 1.0 } else { -1.0 })
        .collect();
    let at = Tensor::new(vec![1, k], a).unwrap();
    let bt = Tensor::new(vec![1, k], b).unwrap();
    let float = gemm_nt(&at, &bt).unwrap().data()[0];
    let ap = BitTensor::pack(&at, PadRole::Input).unwrap();
    let bp = BitTensor::pack(&bt, PadRole::Weight).unwrap();
    let explicit = xnor_gemm(&ap, &bp, OffsetMode::Explicit, k).unwrap().data()[0];
    let learned = xnor_gemm(&ap, &bp, OffsetMode::Learned, k).unwrap().data()[0];
    let mut bad = 0;
    if explicit != float {
        bad += 1;
    }
    if 2.0 * learned - k as f32 != explicit {
        bad += 1;
    }
    bad
}

fn run_bench(ks: &[usize], repeats: usize, json: bool) {
    if !json {
        println!(
            "{:>6} {:>14} {:>14} {:>8}  (m=64, n=64, median of {repeats})",
            "k", "float ns", "packed ns", "ratio"
        );
    }

    let mut seed = 12345u64;
    let mut next = move || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        seed
    };
    for &k in ks {
        let problem = GemmProblem { m: 64, n_dim: 64, k };
        let (m, n) = (problem.m, problem.n_dim);
        let a = Tensor::new(
            vec![m, k],
            (0..m * k)
                .map(|_| if next() >> 63 == 1 { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![n, k],
            (0..n * k)
                .map(|_| if next() >> 63 == 1 { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let ap = BitTensor::pack(&a, PadRole::Input).unwrap();
        let bp = BitTensor::pack(&b, PadRole::Weight).unwrap();

        let mut float_ns: Vec<u128> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                let out = gemm_nt(&a, &b).unwrap();
                std::hint::black_box(out.data()[0]);
                t.elapsed().as_nanos()
            })
            .collect();
        float_ns.sort_unstable();
        let mut packed_ns: Vec<u128> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                let out = xnor_gemm(&ap, &bp, OffsetMode::Explicit, k).unwrap();
                std::hint::black_box(out.data()[0]);
                t.elapsed().as_nanos()
            })
            .collect();
        packed_ns.sort_unstable();
        let fm = float_ns[repeats / 2];
        let pm = packed_ns[repeats / 2];
        let ratio = fm as f64 / pm.max(1) as f64;
        if json {
            println!(
                "{}",
                serde_json::json!({
                    "k": k, "m": m, "n": n, "repeats": repeats,
                    "float_gemm_ns": fm, "xnor_gemm_ns": pm, "float_over_packed": ratio
                })
            );
        } else {
            println!("{k:>6} {fm:>14} {pm:>14} {ratio:>8.2}");
        }
    }
}
