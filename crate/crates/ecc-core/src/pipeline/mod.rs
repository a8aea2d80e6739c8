//! Command layer orchestrating the workflow: offline energy profiling and
//! model fitting, then compression, fine-tuning, and evaluation, with every
//! artifact stamped with the config hash and seeds that produced it.
//! Stages communicate only through files, so each command is rerunnable and
//! the whole chain is reproducible byte for byte.

mod config;

pub use config::{
    ArchitectureConfig, BetaSetting, DatasetConfig, ExternalSection, FinetuneSection, FitSection,
    LayerConfig, OracleConfig, OutputSection, PipelineConfig, PretrainSection, ProfileSection,
    SimulatedSection, SolverSection, CONFIG_FORMAT_VERSION,
};

use crate::energy::{
    self, read_model_file, read_profile, render_exchange, sample_sparsities, write_model_file,
    BilinearEnergyModel, EnergyError, EnergyModelFile, EnergyOracle, ExternalCommandDevice,
    FitConfig, GroundTruth, Profile, SimulatedDevice, SparsitySpace, SparsityVector,
};
use crate::network::{
    accuracy, layer_names, load_checkpoint, load_columnar, load_raster, render_arch_text,
    save_checkpoint, synthetic_classification, BatchStream, ChannelMask, CheckpointMeta, Dataset,
    LayerSpec, Network, NetworkError,
};
use crate::oracles::{brute_force_prox, finite_diff_grad, prox_objective, ProxInstance};
use crate::solver::{
    compress, finetune, AdamState, BetaMode, CompressOutcome, SolverConfig, SolverError, TraceRow,
};
use crate::tensor::{DiagPreconditioner, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Artifact(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit codes: 0 success, 2 infeasible budget, 3 iteration
/// exhaustion, 4 oracle failure, 1 anything else.
impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Solver(SolverError::InfeasibleBudget { .. }) => 2,
            PipelineError::Solver(SolverError::MaxIterations { .. }) => 3,
            PipelineError::Energy(e) | PipelineError::Solver(SolverError::Energy(e)) => {
                match e {
                    EnergyError::Oracle { .. }
                    | EnergyError::SimulatedFailure(_)
                    | EnergyError::CommandFailed { .. }
                    | EnergyError::CommandTimeout(_)
                    | EnergyError::UnparseableOutput { .. } => 4,
                    _ => 1,
                }
            }
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        context: context.into(),
        source,
    }
}

/// Canonical artifact paths inside the configured output directory.
pub struct Artifacts;

impl Artifacts {
    pub fn profile(out: &Path) -> PathBuf {
        out.join("profile.txt")
    }
    pub fn energy_model(out: &Path) -> PathBuf {
        out.join("energy-model.txt")
    }
    pub fn fit_report(out: &Path) -> PathBuf {
        out.join("fit-report.txt")
    }
    pub fn dense(out: &Path) -> PathBuf {
        out.join("dense.eccnet")
    }
    pub fn compressed(out: &Path) -> PathBuf {
        out.join("compressed.eccnet")
    }
    pub fn trace(out: &Path) -> PathBuf {
        out.join("trace.txt")
    }
    pub fn finetuned(out: &Path) -> PathBuf {
        out.join("finetuned.eccnet")
    }
    pub fn evaluation(out: &Path) -> PathBuf {
        out.join("evaluation.txt")
    }
    pub fn log(out: &Path) -> PathBuf {
        out.join("run.log")
    }
}

fn ensure_out_dir(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| io_err(format!("creating output dir {}", dir.display()), e))?;
    Ok(dir)
}

/// Timestamps live only in this sidecar log, never in artifacts.
fn log_line(out: &Path, message: &str) {
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(Artifacts::log(out))
    {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(f, "[{now}] {message}");
    }
}

pub fn load_train_dataset(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    load_dataset(config, true)
}

pub fn load_test_dataset(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    load_dataset(config, false)
}

fn load_dataset(config: &PipelineConfig, train: bool) -> Result<Dataset, PipelineError> {
    let d = &config.dataset;
    match d.kind.as_str() {
        "synthetic" => {
            // train and test share the class templates (same seed) and use
            // disjoint ranges of the sample stream
            let (n, skip) = if train {
                (d.train_samples, 0)
            } else {
                (d.test_samples, d.train_samples)
            };
            Ok(synthetic_classification(
                d.channels, d.height, d.width, d.classes, n, d.noise, d.seed, skip,
            ))
        }
        "columnar" => {
            let path = if train { &d.train } else { &d.test };
            let path = path.as_ref().expect("validated");
            Ok(load_columnar(path, d.channels, d.height, d.width)?)
        }
        "raster" => {
            let path = if train { &d.train } else { &d.test };
            let path = path.as_ref().expect("validated");
            Ok(load_raster(path)?)
        }
        _ => unreachable!("validated"),
    }
}

/// Multiply-accumulates per (input-channel, output-channel) pair for each
/// layer at the dataset's spatial dimensions; the derived simulated-device
/// coefficients scale these counts.
pub fn mac_per_pair(specs: &[LayerSpec], mut h: usize, mut w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let oh = (h + 2 * spec.padding() - spec.rh) / spec.stride() + 1;
        let ow = (w + 2 * spec.padding() - spec.rw) / spec.stride() + 1;
        out.push((spec.rh * spec.rw * oh * ow) as f64);
        h = oh;
        w = ow;
    }
    out
}

/// Hidden ground-truth coefficients of the simulated device for this config.
pub fn simulated_coefficients(config: &PipelineConfig) -> Result<Vec<f64>, PipelineError> {
    let sim = &config.oracle.simulated;
    let specs = config.layer_specs()?;
    match &sim.coefficients {
        Some(c) => {
            if c.len() != specs.len() {
                return Err(PipelineError::Config(format!(
                    "{} oracle coefficients for {} layers",
                    c.len(),
                    specs.len()
                )));
            }
            Ok(c.clone())
        }
        None => Ok(mac_per_pair(&specs, config.dataset.height, config.dataset.width)
            .into_iter()
            .map(|m| m * sim.joules_per_mac)
            .collect()),
    }
}

pub fn build_simulated_device(config: &PipelineConfig) -> Result<SimulatedDevice, PipelineError> {
    let sim = &config.oracle.simulated;
    let coefficients = simulated_coefficients(config)?;
    let truth = match sim.mode.as_str() {
        "bilinear" => GroundTruth::Bilinear,
        "saturating" => GroundTruth::Saturating { knee: sim.knee },
        "overhead" => GroundTruth::LayerOverhead {
            overhead: vec![sim.overhead; coefficients.len()],
        },
        other => {
            return Err(PipelineError::Config(format!(
                "unknown simulated mode {other:?}"
            )))
        }
    };
    let mut device = SimulatedDevice::new(sim.a0, coefficients, truth, sim.noise, sim.seed);
    if let Some(n) = sim.fail_after {
        device = device.with_failure_after(n);
    }
    Ok(device)
}

pub fn build_oracle(config: &PipelineConfig) -> Result<Box<dyn EnergyOracle>, PipelineError> {
    match config.oracle.kind.as_str() {
        "simulated" => Ok(Box::new(build_simulated_device(config)?)),
        "external" => {
            let specs = config.layer_specs()?;
            let arch_text = render_arch_text(&specs, config.n_out());
            Ok(Box::new(
                ExternalCommandDevice::new(
                    config.oracle.external.command.clone(),
                    arch_text,
                    Duration::from_secs_f64(config.oracle.external.timeout_secs),
                ),
            ))
        }
        _ => unreachable!("validated"),
    }
}

/// Collects (or resumes) the measurement profile. Rows are appended and
/// flushed one at a time, so an interrupted run picks up at the first
/// missing sample and reproduces the exact file an uninterrupted run writes.
pub fn cmd_profile(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let out = ensure_out_dir(config)?;
    let specs = config.layer_specs()?;
    let hash = config.semantic_hash();
    let space = SparsitySpace {
        max_channels: specs.iter().map(|s| s.c).collect(),
        output_dim: config.n_out(),
    };
    let samples = sample_sparsities(&space, config.profile.samples, config.profile.seed);
    let header_probe = Profile {
        layer_names: layer_names(&specs),
        output_dim: config.n_out(),
        seed: config.profile.seed,
        trials: config.profile.trials,
        config_hash: hash.clone(),
        samples: Vec::new(),
    };
    let path = Artifacts::profile(&out);

    let mut done = 0usize;
    if path.exists() {
        let existing = read_profile(&path)?;
        if existing.seed != config.profile.seed
            || existing.trials != config.profile.trials
            || existing.config_hash != hash
            || existing.layer_names != header_probe.layer_names
        {
            return Err(PipelineError::Artifact(format!(
                "existing profile {} was produced by a different configuration; delete it to re-profile",
                path.display()
            )));
        }
        done = existing.samples.len().min(samples.len());
        log_line(&out, &format!("profile: resuming at sample {done}"));
    } else {
        std::fs::write(&path, header_probe.header_text())
            .map_err(|e| io_err(format!("writing profile {}", path.display()), e))?;
    }

    let mut oracle = build_oracle(config)?;
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| io_err(format!("opening profile {}", path.display()), e))?;
    for (index, s) in samples.iter().enumerate().skip(done) {
        let sample = energy::collect_one(oracle.as_mut(), s, config.profile.trials).map_err(
            |e| {
                log_line(&out, &format!("profile: sample {index} failed: {e}"));
                eprintln!("profile: sample {index} failed: {e}");
                PipelineError::Energy(e)
            },
        )?;
        file.write_all(Profile::row_text(&sample).as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| io_err(format!("appending to {}", path.display()), e))?;
    }
    log_line(
        &out,
        &format!("profile: {} samples at {}", samples.len(), path.display()),
    );

    let profile = read_profile(&path)?;
    let mean: f64 =
        profile.samples.iter().map(|s| s.energy).sum::<f64>() / profile.samples.len() as f64;
    println!(
        "profiled {} samples, {} trials each; mean energy {:.6} J",
        profile.samples.len(),
        profile.trials,
        mean
    );
    for (j, name) in profile.layer_names.iter().enumerate() {
        let lo = profile
            .samples
            .iter()
            .map(|s| s.s.layers()[j])
            .fold(f64::INFINITY, f64::min);
        let hi = profile
            .samples
            .iter()
            .map(|s| s.s.layers()[j])
            .fold(f64::NEG_INFINITY, f64::max);
        println!("  s[{name}] in [{lo}, {hi}]");
    }
    Ok(path)
}

/// Splits the profile, fits the bilinear model, and persists the model file
/// plus the error-curve report table.
pub fn cmd_fit_energy(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let out = ensure_out_dir(config)?;
    let profile = read_profile(&Artifacts::profile(&out))?;
    if profile.samples.len() < 2 {
        return Err(PipelineError::Artifact(format!(
            "profile has {} samples; need at least 2",
            profile.samples.len()
        )));
    }
    if energy::is_degenerate(&profile.samples) {
        return Err(PipelineError::Energy(EnergyError::DegenerateProfile));
    }
    let (train, test) =
        energy::split_samples(&profile.samples, config.profile.split, config.energy_fit.seed);
    let fit_config = FitConfig {
        iterations: config.energy_fit.iterations,
        learning_rate: config.energy_fit.learning_rate,
        weight_decay: config.energy_fit.weight_decay,
        seed: config.energy_fit.seed,
        log_every: config.energy_fit.log_every,
        ..FitConfig::default()
    };
    let (model, log) = energy::fit_tracked(&train, Some(&test), &fit_config)?;
    let train_error = energy::relative_test_error(&model, &train)?;
    let test_error = energy::relative_test_error(&model, &test)?;

    // standardization constants for the model file
    let n_layers = model.num_layers();
    let mut feature_means = vec![0.0f64; n_layers];
    for sample in &train {
        let mut ext: Vec<f64> = sample.s.layers().to_vec();
        ext.push(sample.s.output_dim() as f64);
        for j in 0..n_layers {
            feature_means[j] += ext[j] * ext[j + 1];
        }
    }
    for m in feature_means.iter_mut() {
        *m /= train.len() as f64;
    }
    let energy_scale = train.iter().map(|s| s.energy).sum::<f64>() / train.len() as f64;

    let file = EnergyModelFile {
        model,
        output_dim: profile.output_dim,
        feature_means,
        energy_scale,
        seed: config.energy_fit.seed,
        iterations: config.energy_fit.iterations,
        train_error,
        test_error,
        config_hash: config.semantic_hash(),
    };
    let model_path = Artifacts::energy_model(&out);
    write_model_file(&model_path, &file)?;

    let mut report = String::new();
    writeln!(report, "# ecc fit-report v1").unwrap();
    writeln!(report, "# config {}", config.semantic_hash()).unwrap();
    writeln!(report, "iteration train_error test_error").unwrap();
    for row in &log {
        writeln!(
            report,
            "{} {} {}",
            row.iteration,
            row.train_error,
            row.test_error.unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    let report_path = Artifacts::fit_report(&out);
    std::fs::write(&report_path, report)
        .map_err(|e| io_err(format!("writing {}", report_path.display()), e))?;

    log_line(&out, &format!("fit-energy: test error {test_error}"));
    println!(
        "fitted bilinear model on {} train / {} test samples: train error {:.6}, test error {:.6}",
        train.len(),
        test.len(),
        train_error,
        test_error
    );
    Ok(model_path)
}

/// Plain Adam training of a dense network from random initialization.
pub fn train_dense(config: &PipelineConfig, dataset: &Dataset) -> Result<Network, PipelineError> {
    let specs = config.layer_specs()?;
    let mut net = Network::random_init(&specs, config.pretrain.seed)?;
    let mut adam = AdamState::new(&net);
    let mut stream = BatchStream::new(
        dataset.n,
        config.pretrain.batch_size.min(dataset.n),
        config.pretrain.seed,
    );
    for _ in 0..config.pretrain.iterations {
        let (batch, labels) = stream.next_batch(dataset);
        let (_, grads) = crate::network::loss_and_grad(&net, &batch, &labels, None)?;
        adam.step(&mut net, &grads, config.pretrain.learning_rate, 0.9, 0.999, 1e-8);
    }
    Ok(net)
}

fn load_or_train_dense(
    config: &PipelineConfig,
    out: &Path,
    dense_override: Option<&Path>,
    dataset: &Dataset,
) -> Result<Network, PipelineError> {
    if let Some(path) = dense_override {
        let (net, _) = load_checkpoint(path)?;
        return Ok(net);
    }
    let default_path = Artifacts::dense(out);
    if default_path.exists() {
        let (net, _) = load_checkpoint(&default_path)?;
        return Ok(net);
    }
    let net = train_dense(config, dataset)?;
    save_checkpoint(
        &default_path,
        &net,
        &CheckpointMeta {
            config_hash: config.semantic_hash(),
            seed: config.pretrain.seed,
        },
    )?;
    log_line(out, &format!("pretrained dense model at {}", default_path.display()));
    Ok(net)
}

pub fn solver_config_from(
    config: &PipelineConfig,
    budget: f64,
    n_layers: usize,
) -> Result<SolverConfig, PipelineError> {
    let s = &config.solver;
    let beta = match &s.beta {
        BetaSetting::Manual(v) => BetaMode::Manual(*v),
        BetaSetting::Auto(word) if word == "auto" => BetaMode::Auto {
            fraction: s.beta_fraction,
        },
        BetaSetting::Auto(other) => {
            return Err(PipelineError::Config(format!(
                "beta must be a number or \"auto\", got {other:?}"
            )))
        }
    };
    let lower_bounds = match &s.lower_bounds {
        Some(v) => {
            if v.len() != n_layers {
                return Err(PipelineError::Config(format!(
                    "{} lower bounds for {} layers",
                    v.len(),
                    n_layers
                )));
            }
            v.clone()
        }
        None => vec![s.lower_bound; n_layers],
    };
    Ok(SolverConfig {
        budget,
        alpha: s.alpha,
        beta,
        rho1: s.rho1,
        rho2: s.rho2,
        epsilon: s.epsilon,
        lower_bounds,
        max_iters: s.max_iters,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        zero_tol: s.zero_tol,
        grace_iters: s.grace_iters,
    })
}

fn trace_text(config_hash: &str, names: &[String], trace: &[TraceRow]) -> String {
    let mut out = String::new();
    writeln!(out, "# ecc trace v1").unwrap();
    writeln!(out, "# config {config_hash}").unwrap();
    write!(out, "iter loss energy max_phi_violation max_y z").unwrap();
    for name in names {
        write!(out, " s[{name}]").unwrap();
    }
    writeln!(out).unwrap();
    for row in trace {
        write!(
            out,
            "{} {} {} {} {} {}",
            row.iter, row.loss, row.energy, row.max_phi_violation, row.max_y, row.z
        )
        .unwrap();
        for v in &row.s {
            write!(out, " {v}").unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

#[derive(Debug)]
pub struct CompressReport {
    pub outcome: CompressOutcome,
    pub budget: f64,
    pub dense_energy: f64,
    pub final_energy: f64,
    pub checkpoint: PathBuf,
}

/// Loads the fitted model and dense weights (pretraining if absent), runs
/// the constrained solver, and persists the compressed checkpoint and the
/// per-iteration trace. The trace is written even on iteration exhaustion.
pub fn cmd_compress(
    config: &PipelineConfig,
    budget_override: Option<f64>,
    dense_override: Option<&Path>,
) -> Result<CompressReport, PipelineError> {
    let out = ensure_out_dir(config)?;
    let specs = config.layer_specs()?;
    let names = layer_names(&specs);
    let hash = config.semantic_hash();

    let model_file = read_model_file(&Artifacts::energy_model(&out))?;
    if model_file.model.num_layers() != specs.len() {
        return Err(PipelineError::Artifact(format!(
            "energy model covers {} layers, architecture has {}",
            model_file.model.num_layers(),
            specs.len()
        )));
    }
    let model = model_file.model;

    let train = load_train_dataset(config)?;
    let dense = load_or_train_dense(config, &out, dense_override, &train)?;
    let dense_energy = model.eval(&dense.sparsity_vector(config.solver.zero_tol))?;

    let budget = match (budget_override, config.solver.budget, config.solver.budget_fraction) {
        (Some(b), _, _) => b,
        (None, Some(b), _) => b,
        (None, None, Some(f)) => f * dense_energy,
        (None, None, None) => {
            return Err(PipelineError::Config(
                "no budget: set solver.budget, solver.budget_fraction, or --budget".into(),
            ))
        }
    };

    let solver_config = solver_config_from(config, budget, specs.len())?;
    let mut stream = BatchStream::new(
        train.n,
        config.solver.batch_size.min(train.n),
        config.solver.batch_seed,
    );
    let teacher = config.solver.use_kd.then(|| {
        (
            dense.clone(),
            config.finetune.lambda_kd,
            config.finetune.temperature,
        )
    });
    let result = compress(
        &dense,
        &model,
        &solver_config,
        &train,
        &mut stream,
        teacher.as_ref().map(|(n, l, t)| (n, *l, *t)),
    );

    let outcome = match result {
        Ok(outcome) => outcome,
        Err(SolverError::MaxIterations { iterations, trace }) => {
            // persist the partial trace for post-mortem before failing
            let path = Artifacts::trace(&out);
            let _ = std::fs::write(&path, trace_text(&hash, &names, &trace));
            log_line(&out, &format!("compress: exhausted {iterations} iterations"));
            return Err(PipelineError::Solver(SolverError::MaxIterations {
                iterations,
                trace,
            }));
        }
        Err(e) => return Err(e.into()),
    };

    let trace_path = Artifacts::trace(&out);
    std::fs::write(&trace_path, trace_text(&hash, &names, &outcome.trace))
        .map_err(|e| io_err(format!("writing {}", trace_path.display()), e))?;
    let checkpoint = Artifacts::compressed(&out);
    save_checkpoint(
        &checkpoint,
        &outcome.network,
        &CheckpointMeta {
            config_hash: hash.clone(),
            seed: config.solver.batch_seed,
        },
    )?;

    let final_energy = model.eval(&SparsityVector::new(
        outcome.s.clone(),
        config.n_out(),
    ))?;
    log_line(
        &out,
        &format!(
            "compress: {} iterations, energy {final_energy} J vs budget {budget} J",
            outcome.iterations
        ),
    );
    println!(
        "compressed in {} iterations: estimated energy {:.6} J (budget {:.6} J, dense {:.6} J)",
        outcome.iterations, final_energy, budget, dense_energy
    );
    println!("  sparsity bounds: {:?}", outcome.s);
    println!("  layer sparsities: {:?}", outcome.network.sparsities(config.solver.zero_tol));
    Ok(CompressReport {
        outcome,
        budget,
        dense_energy,
        final_energy,
        checkpoint,
    })
}

/// Fine-tunes a compressed checkpoint with its zero pattern frozen,
/// distilling against the dense teacher when configured and available.
pub fn cmd_finetune(
    config: &PipelineConfig,
    checkpoint: Option<&Path>,
) -> Result<PathBuf, PipelineError> {
    let out = ensure_out_dir(config)?;
    let source = checkpoint
        .map(PathBuf::from)
        .unwrap_or_else(|| Artifacts::compressed(&out));
    let (net, _) = load_checkpoint(&source)?;
    let mask = ChannelMask::from_network_zeros(&net, config.solver.zero_tol);

    let teacher_path = Artifacts::dense(&out);
    let teacher = if config.finetune.use_teacher && teacher_path.exists() {
        Some(load_checkpoint(&teacher_path)?.0)
    } else {
        None
    };

    let train = load_train_dataset(config)?;
    let mut stream = BatchStream::new(
        train.n,
        config.finetune.batch_size.min(train.n),
        config.finetune.seed,
    );
    let solver_config = solver_config_from(config, f64::INFINITY, net.layers.len())?;
    let tuned = finetune(
        &net,
        &mask,
        &train,
        &mut stream,
        config.finetune.iterations,
        config.finetune.learning_rate,
        &solver_config,
        teacher
            .as_ref()
            .map(|t| (t, config.finetune.lambda_kd, config.finetune.temperature)),
    )?;

    let path = Artifacts::finetuned(&out);
    save_checkpoint(
        &path,
        &tuned,
        &CheckpointMeta {
            config_hash: config.semantic_hash(),
            seed: config.finetune.seed,
        },
    )?;
    log_line(&out, &format!("finetune: {} iterations", config.finetune.iterations));
    println!(
        "fine-tuned for {} iterations with {} teacher",
        config.finetune.iterations,
        if teacher.is_some() { "a dense" } else { "no" }
    );
    Ok(path)
}

pub struct EvaluationReport {
    pub accuracy: f64,
    pub predicted_energy: f64,
    pub measured_energy: f64,
    pub model_test_error: f64,
    pub sparsities: Vec<usize>,
    pub widths: Vec<usize>,
    pub text: String,
}

/// Evaluates a checkpoint: test accuracy, the model's energy prediction at
/// the checkpoint's sparsities, an oracle measurement at the same setting,
/// and the per-layer sparsity table.
pub fn cmd_evaluate(
    config: &PipelineConfig,
    checkpoint: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let out = ensure_out_dir(config)?;
    let (net, _) = load_checkpoint(checkpoint)?;
    let test = load_test_dataset(config)?;
    let top1 = accuracy(&net, &test, 64)?;

    let model_file = read_model_file(&Artifacts::energy_model(&out))?;
    let s = net.sparsity_vector(config.solver.zero_tol);
    let predicted = model_file.model.eval(&s)?;

    let mut oracle = build_oracle(config)?;
    let trials = config.profile.trials;
    let mut total = 0.0;
    for trial in 0..trials {
        total += oracle.measure(&s, trial)?;
    }
    let measured = total / trials as f64;

    let names = layer_names(&net.specs());
    let sparsities = net.sparsities(config.solver.zero_tol);
    let widths: Vec<usize> = net.layers.iter().map(|l| l.spec.c).collect();
    let mut text = String::new();
    writeln!(text, "# ecc evaluation v1").unwrap();
    writeln!(text, "# config {}", config.semantic_hash()).unwrap();
    writeln!(text, "checkpoint {}", checkpoint.display()).unwrap();
    writeln!(text, "accuracy {top1}").unwrap();
    writeln!(text, "predicted_energy {predicted}").unwrap();
    writeln!(text, "measured_energy {measured}").unwrap();
    writeln!(text, "model_test_error {}", model_file.test_error).unwrap();
    for ((name, phi), width) in names.iter().zip(&sparsities).zip(&widths) {
        writeln!(text, "layer {name} phi {phi} of {width}").unwrap();
    }
    let path = Artifacts::evaluation(&out);
    std::fs::write(&path, &text).map_err(|e| io_err(format!("writing {}", path.display()), e))?;
    print!("{text}");

    Ok(EvaluationReport {
        accuracy: top1,
        predicted_energy: predicted,
        measured_energy: measured,
        model_test_error: model_file.test_error,
        sparsities,
        widths,
        text,
    })
}

/// A prox instance on disk, for `verify`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyInstanceFile {
    pub d: usize,
    pub c: usize,
    pub rh: usize,
    pub rw: usize,
    pub w_bar: Vec<f64>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    pub s: f64,
    pub y: f64,
    pub alpha: f64,
    pub rho1: f64,
}

pub struct VerifyOptions {
    pub instances: Vec<PathBuf>,
    pub random: usize,
    pub seed: u64,
    pub grad_checks: usize,
    /// Negative-control knob: scales the prox keep threshold; 1.0 is the
    /// correct operator.
    pub threshold_scale: f64,
}

pub struct VerifyReport {
    pub passes: usize,
    pub failures: usize,
    pub lines: Vec<String>,
}

fn verify_prox_instance(
    label: &str,
    inst: &ProxInstance,
    threshold_scale: f64,
    report: &mut VerifyReport,
) {
    let fast = crate::solver::prox_l1_layer_scaled(
        &inst.w_bar,
        &inst.b,
        inst.s,
        inst.y,
        inst.alpha,
        inst.rho1,
        threshold_scale,
    );
    let exact = brute_force_prox(inst);
    match (fast, exact) {
        (Ok(fast), Ok(exact)) => {
            let gap = prox_objective(inst, &fast) - exact.objective;
            let pattern_ok = fast == exact.minimizer;
            if pattern_ok && gap.abs() <= 1e-8 {
                report.passes += 1;
                report
                    .lines
                    .push(format!("PASS prox {label}: objective gap {gap:.3e}"));
            } else {
                report.failures += 1;
                report.lines.push(format!(
                    "FAIL prox {label}: pattern match {pattern_ok}, objective gap {gap:.3e}"
                ));
            }
        }
        (Err(e), _) => {
            report.failures += 1;
            report.lines.push(format!("FAIL prox {label}: {e}"));
        }
        (_, Err(e)) => {
            report.failures += 1;
            report.lines.push(format!("FAIL prox {label}: {e}"));
        }
    }
}

/// Audits the fast paths with the slow oracles: the closed-form prox against
/// exhaustive minimization, and the bilinear gradient against central finite
/// differences.
pub fn cmd_verify(options: &VerifyOptions) -> Result<VerifyReport, PipelineError> {
    let mut report = VerifyReport {
        passes: 0,
        failures: 0,
        lines: Vec::new(),
    };

    for path in &options.instances {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_err(format!("reading instance {}", path.display()), e))?;
        let file: VerifyInstanceFile = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("parsing {}: {e}", path.display())))?;
        let w_bar = Tensor4::from_vec(file.d, file.c, file.rh, file.rw, file.w_bar.clone())
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let b = match &file.b {
            Some(entries) => DiagPreconditioner::from_entries(
                (file.d, file.c, file.rh, file.rw),
                entries.clone(),
                1e-12,
            )
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?,
            None => DiagPreconditioner::identity(file.d, file.c, file.rh, file.rw),
        };
        let inst = ProxInstance {
            w_bar,
            b,
            s: file.s,
            y: file.y,
            alpha: file.alpha,
            rho1: file.rho1,
        };
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        verify_prox_instance(&label, &inst, options.threshold_scale, &mut report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for k in 0..options.random {
        let c = rng.random_range(1..=10);
        let d = rng.random_range(1..=4);
        let kside = rng.random_range(1..=3);
        let n = d * c * kside * kside;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b_entries: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
        let alphas = [1e-3, 1e-1, 1.0];
        let ys = [0.0, 0.5, 5.0];
        let inst = ProxInstance {
            w_bar: Tensor4::from_vec(d, c, kside, kside, data).expect("sized"),
            b: DiagPreconditioner::from_entries((d, c, kside, kside), b_entries, 1e-12)
                .expect("sized"),
            s: rng.random_range(1..=c) as f64,
            y: ys[rng.random_range(0..ys.len())],
            alpha: alphas[rng.random_range(0..alphas.len())],
            rho1: 1.0,
        };
        verify_prox_instance(&format!("random-{k}"), &inst, options.threshold_scale, &mut report);
    }

    for k in 0..options.grad_checks {
        let layers = rng.random_range(1..=6);
        let a0 = rng.random_range(0.0..1.0);
        let a: Vec<f64> = (0..layers).map(|_| rng.random_range(0.0..0.1)).collect();
        let s: Vec<f64> = (0..layers).map(|_| rng.random_range(1.0..64.0)).collect();
        let n_out = rng.random_range(1..=16);
        let model = BilinearEnergyModel::new(a0, a);
        let analytic = model
            .grad_s(&SparsityVector::new(s.clone(), n_out))
            .expect("lengths match");
        let numeric = finite_diff_grad(
            |x| {
                model
                    .eval(&SparsityVector::new(x.to_vec(), n_out))
                    .expect("lengths match")
            },
            &s,
            1e-4,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let gap = analytic
            .iter()
            .zip(&numeric)
            .map(|(g, fd)| (g - fd).abs() / g.abs().max(1.0))
            .fold(0.0, f64::max);
        if gap <= 1e-9 {
            report.passes += 1;
            report.lines.push(format!("PASS grad-s random-{k}: max gap {gap:.3e}"));
        } else {
            report.failures += 1;
            report.lines.push(format!("FAIL grad-s random-{k}: max gap {gap:.3e}"));
        }
    }

    Ok(report)
}

/// Reads an exchange payload from a reader and measures it with the
/// configured simulated device (trial 0). This is the bridge that lets the
/// external-command adapter wrap the simulated oracle in tests and demos.
pub fn cmd_measure(config: &PipelineConfig, input: &mut dyn std::io::Read) -> Result<f64, PipelineError> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| io_err("reading exchange payload from stdin", e))?;
    let (_arch, s) = crate::energy::parse_exchange(&text)?;
    let mut device = build_simulated_device(config)?;
    Ok(device.measure(&s, 0)?)
}

/// Renders the exchange payload for an architecture and sparsity assignment
/// (what the external command receives on stdin).
pub fn exchange_payload(config: &PipelineConfig, s: &SparsityVector) -> Result<String, PipelineError> {
    let specs = config.layer_specs()?;
    Ok(render_exchange(&render_arch_text(&specs, config.n_out()), s))
}
