//! Command-line entry point: training, evaluation, equivariance sweeps,
//! gradient checks, the FFT-vs-direct polynomial oracle and the synthetic
//! surfel invariance demo.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use steernet::error::Error;
use steernet::harness;
use steernet::model::{ActivationKind, InvariantMap, Model, ModelConfig};
use steernet::pipeline::{
    evaluate, load_amat, load_checkpoint, save_checkpoint, synthetic_glyphs, train,
    write_metrics_csv, LabeledImages, TrainConfig,
};
use steernet::scalar::Scalar;

#[derive(Parser)]
#[command(
    name = "steernet",
    about = "SO(2)-equivariant steerable networks on band-limited angular feature maps",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    Single,
    Double,
}

#[derive(Args)]
struct CommonOpts {
    /// JSON file holding {"model": ..., "train": ...}
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// FFT padding override
    #[arg(long)]
    pad: Option<usize>,
    /// activation override: relu, leaky_relu, silu, elu, tanh, sigmoid,
    /// poly2, poly4, c_relu, c_sigmoid
    #[arg(long)]
    activation: Option<String>,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (synthetic glyphs by default, amat files when given)
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// amat file with training rows
        #[arg(long)]
        train_amat: Option<PathBuf>,
        /// amat file with test rows
        #[arg(long)]
        test_amat: Option<PathBuf>,
        /// synthetic dataset sizes train,test
        #[arg(long, default_value = "2000,2000")]
        synthetic: String,
        /// channel width multiplier for the built-in architecture
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// metrics CSV path
        #[arg(long)]
        out: Option<PathBuf>,
        /// checkpoint path
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_amat: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        synthetic: usize,
    },
    /// Equivariance-error sweep over FFT paddings (CSV output)
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// comma-separated pad list
        #[arg(long, default_value = "0,7,31,127")]
        pads: String,
        #[arg(long, default_value_t = 36)]
        rotations: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// channel width multiplier for the built-in architecture
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Central-difference gradient verification of the full stack
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 50)]
        picks: usize,
    },
    /// FFT-vs-direct polynomial comparison
    Oracle {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, default_value_t = 9)]
        coeffs: usize,
        /// comma-separated pad list (default spans the aliasing threshold)
        #[arg(long)]
        pads: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic sphere SO(3)-invariance test of the surfel layer
    SurfelDemo {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 200)]
        surfels: usize,
        #[arg(long, default_value_t = 20)]
        rotations: usize,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ExperimentConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::CheckpointFormat(_) | Error::CheckpointVersion { .. } => 2,
        Error::Json(_) => 1,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders usage; all argument problems exit with 1
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train {
            common,
            train_amat,
            test_amat,
            synthetic,
            scale,
            epochs,
            batch,
            out,
            checkpoint,
        } => match common.precision {
            Precision::Single => cmd_train::<f32>(
                common, train_amat, test_amat, &synthetic, scale, epochs, batch, out, checkpoint,
            ),
            Precision::Double => cmd_train::<f64>(
                common, train_amat, test_amat, &synthetic, scale, epochs, batch, out, checkpoint,
            ),
        },
        Command::Eval {
            common,
            checkpoint,
            test_amat,
            synthetic,
        } => match common.precision {
            Precision::Single => cmd_eval::<f32>(&checkpoint, test_amat, synthetic),
            Precision::Double => cmd_eval::<f64>(&checkpoint, test_amat, synthetic),
        },
        Command::Sweep {
            common,
            pads,
            rotations,
            batch,
            scale,
            out,
        } => match common.precision {
            Precision::Single => cmd_sweep::<f32>(common, &pads, rotations, batch, scale, out),
            Precision::Double => cmd_sweep::<f64>(common, &pads, rotations, batch, scale, out),
        },
        Command::Gradcheck { common, picks } => cmd_gradcheck(common, picks),
        Command::Oracle {
            common,
            degree,
            coeffs,
            pads,
            out,
        } => cmd_oracle(common, degree, coeffs, pads, out),
        Command::SurfelDemo {
            common,
            surfels,
            rotations,
        } => cmd_surfel_demo(common, surfels, rotations),
    }
}

fn load_experiment(common: &CommonOpts, scale: f64) -> Result<ExperimentConfig, Error> {
    let mut exp = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<ExperimentConfig>(&text)?
        }
        None => ExperimentConfig {
            model: ModelConfig::mnist_stack(
                9,
                7,
                ActivationKind::Relu,
                InvariantMap::Norm,
                10,
                scale,
            ),
            train: TrainConfig::default(),
        },
    };
    if let Some(p) = common.pad {
        exp.model.fft_pad = p;
    }
    if let Some(a) = &common.activation {
        exp.model.activation = ActivationKind::parse(a)?;
    }
    exp.train.seed = common.seed;
    exp.model.validate()?;
    Ok(exp)
}

fn load_images<T: Scalar>(
    amat: Option<&Path>,
    synthetic_n: usize,
    seed: u64,
) -> Result<LabeledImages<T>, Error> {
    match amat {
        Some(path) => {
            let set = load_amat::<T>(path)?;
            println!("loaded {} rows from {}", set.len(), path.display());
            Ok(set)
        }
        None => Ok(synthetic_glyphs(synthetic_n, seed)),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train<T: Scalar>(
    common: CommonOpts,
    train_amat: Option<PathBuf>,
    test_amat: Option<PathBuf>,
    synthetic: &str,
    scale: f64,
    epochs: Option<usize>,
    batch: Option<usize>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<u8, Error> {
    let mut exp = load_experiment(&common, scale)?;
    if let Some(e) = epochs {
        exp.train.epochs = e;
    }
    if let Some(b) = batch {
        exp.train.batch_size = b;
    }
    let (n_train, n_test) = parse_pair(synthetic)?;
    let train_set = load_images::<T>(train_amat.as_deref(), n_train, common.seed ^ 0x7261696e)?;
    let test_set = load_images::<T>(test_amat.as_deref(), n_test, common.seed ^ 0x74657374)?;

    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let mut model = Model::<T>::new(exp.model.clone(), &mut rng)?;
    println!(
        "model: {} parameters, activation {}, pad {}, precision {}",
        model.num_parameters(),
        exp.model.activation.name(),
        exp.model.fft_pad,
        T::DTYPE
    );

    let start = std::time::Instant::now();
    let metrics = train(&mut model, &train_set, &test_set, &exp.train)?;
    let final_err = evaluate(&model, &test_set, 128)?;
    println!(
        "trained {} epochs in {:.1}s, final test error {:.3}% (exact statistics)",
        metrics.len(),
        start.elapsed().as_secs_f64(),
        final_err * 100.0
    );
    for m in &metrics {
        println!(
            "epoch {:>3}  lr {:.5}  train_loss {:.4}  test_error {:.3}%",
            m.epoch,
            m.lr,
            m.train_loss,
            m.test_error * 100.0
        );
    }
    if let Some(path) = out {
        write_metrics_csv(&metrics, &path)?;
        println!("metrics written to {}", path.display());
    }
    if let Some(path) = checkpoint {
        save_checkpoint(&model, common.seed, &path)?;
        println!("checkpoint written to {}", path.display());
    }
    Ok(0)
}

fn cmd_eval<T: Scalar>(
    checkpoint: &Path,
    test_amat: Option<PathBuf>,
    synthetic: usize,
) -> Result<u8, Error> {
    let (model, seed) = load_checkpoint::<T>(checkpoint)?;
    let test_set = load_images::<T>(test_amat.as_deref(), synthetic, seed ^ 0x74657374)?;
    let err = evaluate(&model, &test_set, 128)?;
    println!(
        "checkpoint {} ({} parameters): test error {:.3}% on {} images",
        checkpoint.display(),
        model.num_parameters(),
        err * 100.0,
        test_set.len()
    );
    Ok(0)
}

fn cmd_sweep<T: Scalar>(
    common: CommonOpts,
    pads: &str,
    rotations: usize,
    batch: usize,
    scale: f64,
    out: Option<PathBuf>,
) -> Result<u8, Error> {
    let exp = load_experiment(&common, scale)?;
    let pads = parse_list(pads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let model = Model::<T>::new(exp.model.clone(), &mut rng)?;
    let images = synthetic_glyphs::<T>(batch, common.seed ^ 0x73776565);
    println!(
        "sweep: activation {}, pads {:?}, {} rotations, batch {}, precision {}",
        exp.model.activation.name(),
        pads,
        rotations,
        batch,
        T::DTYPE
    );
    let start = std::time::Instant::now();
    let report = harness::equivariance_sweep(&model, &images, rotations, &pads, common.seed)?;
    for r in &report.records {
        println!(
            "layer {:>9}  pad {:>4}  mean {:.3e}  max {:.3e}",
            r.layer, r.pad, r.mean_rel_err, r.max_rel_err
        );
    }
    println!("sweep finished in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(path) = out {
        harness::write_error_csv(&report, &path)?;
        println!("errors written to {}", path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(common: CommonOpts, picks: usize) -> Result<u8, Error> {
    let report = harness::full_stack_gradcheck(picks, 1e-5, common.seed)?;
    let max = report.max_rel_dev();
    for e in report.entries.iter().filter(|e| e.rel_dev > 1e-5) {
        println!(
            "  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            e.param, e.index, e.analytic, e.numeric, e.rel_dev
        );
    }
    println!(
        "gradcheck: {} picked parameters, max relative deviation {:.3e} (h = {:.0e})",
        report.entries.len(),
        max,
        report.step
    );
    if max < 1e-4 {
        println!("gradcheck PASS");
        Ok(0)
    } else {
        println!("gradcheck FAIL (threshold 1e-4)");
        Ok(1)
    }
}

fn cmd_oracle(
    common: CommonOpts,
    degree: usize,
    coeffs: usize,
    pads: Option<String>,
    out: Option<PathBuf>,
) -> Result<u8, Error> {
    let k = (coeffs.max(1) - 1) / 2;
    let pads = match pads {
        Some(s) => parse_list(&s)?,
        None => {
            let exact = steernet::activations::minimal_exact_pad(k, degree);
            let tight = k * (degree - 1);
            let mut v = vec![0, tight.saturating_sub(1), tight, exact, exact + 8];
            v.dedup();
            v
        }
    };
    let rows = harness::poly_oracle(degree, coeffs, &pads, common.seed)?;
    println!("degree {degree}, {coeffs} coefficients:");
    for (pad, mx, mean) in &rows {
        println!("  pad {:>4}: max deviation {:.3e}, mean {:.3e}", pad, mx, mean);
    }
    if let Some(path) = out {
        harness::write_oracle_csv(&rows, degree, coeffs, &path)?;
        println!("oracle rows written to {}", path.display());
    }
    Ok(0)
}

fn cmd_surfel_demo(common: CommonOpts, surfels: usize, rotations: usize) -> Result<u8, Error> {
    let worst = harness::surfel_sphere_demo(surfels, rotations, common.seed)?;
    println!(
        "surfel sphere: {} surfels, {} random rotations, max relative deviation {:.3e}",
        surfels, rotations, worst
    );
    if worst < 1e-4 {
        println!("surfel-demo PASS (threshold 1e-4)");
        Ok(0)
    } else {
        println!("surfel-demo FAIL (threshold 1e-4)");
        Ok(1)
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected N_TRAIN,N_TEST, got '{s}'"
        )));
    }
    let a = parts[0]
        .trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad count '{}': {e}", parts[0])))?;
    let b = parts[1]
        .trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad count '{}': {e}", parts[1])))?;
    Ok((a, b))
}

fn parse_list(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad pad '{t}': {e}")))
        })
        .collect()
}
