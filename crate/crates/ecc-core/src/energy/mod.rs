//! Blackbox energy measurement, sparsity-sample collection, and the bilinear
//! energy estimator with fitting and analytic gradients.
//!
//! The estimator is `E(s) = a_0 + sum_j a_j * s_j * s_{j+1}` over per-layer
//! (inverse) sparsities, with `s_{|U|+1}` fixed at the network output
//! dimensionality and all coefficients nonnegative.

mod files;
mod oracle;

pub use files::{
    parse_exchange, read_model_file, read_profile, render_exchange, write_model_file,
    write_profile, EnergyModelFile, Profile, PROFILE_FORMAT_VERSION,
};
pub use oracle::{EnergyOracle, ExternalCommandDevice, GroundTruth, SimulatedDevice};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("sparsity vector has {got} layer entries, model expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("need at least 2 samples to fit, got {0}")]
    NotEnoughSamples(usize),
    #[error("measured energy must be positive, got {0}")]
    NonPositiveEnergy(f64),
    #[error("degenerate profile: all samples share one sparsity vector")]
    DegenerateProfile,
    #[error("oracle failed at s = {s:?}: {source}")]
    Oracle {
        s: Vec<f64>,
        #[source]
        source: Box<EnergyError>,
    },
    #[error("simulated device failure injected after {0} measurements")]
    SimulatedFailure(u64),
    #[error("measurement command exited with status {code:?}: {stderr}")]
    CommandFailed { code: Option<i32>, stderr: String },
    #[error("measurement command timed out after {0:.1}s")]
    CommandTimeout(f64),
    #[error("could not parse energy from command output: {output:?}")]
    UnparseableOutput { output: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Per-layer (inverse) sparsities plus the fixed output dimensionality that
/// closes the last bilinear term.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityVector {
    layers: Vec<f64>,
    output_dim: usize,
}

impl SparsityVector {
    pub fn new(layers: Vec<f64>, output_dim: usize) -> Self {
        assert!(output_dim > 0, "output dimensionality must be positive");
        SparsityVector { layers, output_dim }
    }

    pub fn layers(&self) -> &[f64] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [f64] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Entry in the extended indexing s_1..s_{|U|+1} (1-based, per-layer then
    /// output dimensionality).
    fn extended(&self, j: usize) -> f64 {
        if j <= self.layers.len() {
            self.layers[j - 1]
        } else {
            self.output_dim as f64
        }
    }
}

/// Channel-count bounds the sampler draws from: layer j admits integers in
/// `{1, ..., max_channels[j]}`.
#[derive(Debug, Clone)]
pub struct SparsitySpace {
    pub max_channels: Vec<usize>,
    pub output_dim: usize,
}

/// One averaged measurement of the oracle at a sparsity setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySample {
    pub s: SparsityVector,
    pub energy: f64,
    pub trials: u32,
    pub stdev: f64,
}

/// Nonnegative coefficients of the bilinear energy estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearEnergyModel {
    a0: f64,
    a: Vec<f64>,
}

impl BilinearEnergyModel {
    pub fn new(a0: f64, a: Vec<f64>) -> Self {
        assert!(a0 >= 0.0 && a.iter().all(|&v| v >= 0.0), "coefficients must be nonnegative");
        BilinearEnergyModel { a0, a }
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.a
    }

    pub fn num_layers(&self) -> usize {
        self.a.len()
    }

    fn check_len(&self, s: &SparsityVector) -> Result<(), EnergyError> {
        if s.num_layers() != self.a.len() {
            return Err(EnergyError::LengthMismatch {
                expected: self.a.len(),
                got: s.num_layers(),
            });
        }
        Ok(())
    }

    /// Estimated energy `a_0 + sum_j a_j s_j s_{j+1}`.
    pub fn eval(&self, s: &SparsityVector) -> Result<f64, EnergyError> {
        self.check_len(s)?;
        let mut total = self.a0;
        for j in 1..=self.a.len() {
            total += self.a[j - 1] * s.extended(j) * s.extended(j + 1);
        }
        Ok(total)
    }

    /// Gradient with respect to the per-layer sparsities. Component j is
    /// `a_j s_{j+1} + a_{j-1} s_{j-1}`, with the second term absent at j = 1;
    /// the fixed output dimensionality carries no gradient component.
    pub fn grad_s(&self, s: &SparsityVector) -> Result<Vec<f64>, EnergyError> {
        self.check_len(s)?;
        let n = self.a.len();
        let mut g = vec![0.0; n];
        for j in 1..=n {
            let mut v = self.a[j - 1] * s.extended(j + 1);
            if j >= 2 {
                v += self.a[j - 2] * s.extended(j - 1);
            }
            g[j - 1] = v;
        }
        Ok(g)
    }
}

/// Draws `n` sparsity vectors with each component uniform on
/// `{1, ..., c^(u)}`, deterministically per seed.
pub fn sample_sparsities(space: &SparsitySpace, n: usize, seed: u64) -> Vec<SparsityVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let layers = space
                .max_channels
                .iter()
                .map(|&c| rng.random_range(1..=c) as f64)
                .collect();
            SparsityVector::new(layers, space.output_dim)
        })
        .collect()
}

/// Measures every sample `trials` times and records mean and sample standard
/// deviation. Oracle failures are reported with the offending vector.
pub fn collect(
    oracle: &mut dyn EnergyOracle,
    samples: &[SparsityVector],
    trials: u32,
) -> Result<Vec<EnergySample>, EnergyError> {
    assert!(trials >= 1, "need at least one trial per sample");
    samples
        .iter()
        .map(|s| collect_one(oracle, s, trials))
        .collect()
}

/// Measures a single sparsity vector; exposed so profiling can persist rows
/// incrementally and resume after failures.
pub fn collect_one(
    oracle: &mut dyn EnergyOracle,
    s: &SparsityVector,
    trials: u32,
) -> Result<EnergySample, EnergyError> {
    let mut values = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let e = oracle.measure(s, trial).map_err(|e| EnergyError::Oracle {
            s: s.layers().to_vec(),
            source: Box::new(e),
        })?;
        values.push(e);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let stdev = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        var.sqrt()
    };
    Ok(EnergySample {
        s: s.clone(),
        energy: mean,
        trials,
        stdev,
    })
}

/// Mean relative absolute error `E[|model(s) - E| / E]` over a test set.
pub fn relative_test_error(
    model: &BilinearEnergyModel,
    testset: &[EnergySample],
) -> Result<f64, EnergyError> {
    if testset.is_empty() {
        return Err(EnergyError::NotEnoughSamples(0));
    }
    let mut total = 0.0;
    for sample in testset {
        if sample.energy <= 0.0 {
            return Err(EnergyError::NonPositiveEnergy(sample.energy));
        }
        total += (model.eval(&sample.s)? - sample.energy).abs() / sample.energy;
    }
    Ok(total / testset.len() as f64)
}

/// Fitting configuration; defaults follow the full-batch Adam protocol with
/// weight decay 1.0 over 10,000 iterations.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 10_000,
            learning_rate: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 100,
        }
    }
}

/// One logged row of the fitting error curve.
#[derive(Debug, Clone)]
pub struct FitLogRow {
    pub iteration: usize,
    pub train_error: f64,
    pub test_error: Option<f64>,
}

/// Least-squares fit of the bilinear model by full-batch Adam with projection
/// onto nonnegative coefficients after every step.
///
/// Features `s_j s_{j+1}` and the target are rescaled by their training means
/// so the optimizer sees O(1) quantities regardless of channel counts; the
/// returned coefficients are in original units. Weight decay penalizes the
/// original-scale slope coefficients (never the intercept), so its strength
/// does not depend on the rescaling.
pub fn fit(
    trainset: &[EnergySample],
    config: &FitConfig,
) -> Result<BilinearEnergyModel, EnergyError> {
    fit_tracked(trainset, None, config).map(|(m, _)| m)
}

/// As [`fit`], additionally logging the train (and optional held-out test)
/// relative error every `config.log_every` iterations.
pub fn fit_tracked(
    trainset: &[EnergySample],
    testset: Option<&[EnergySample]>,
    config: &FitConfig,
) -> Result<(BilinearEnergyModel, Vec<FitLogRow>), EnergyError> {
    if trainset.len() < 2 {
        return Err(EnergyError::NotEnoughSamples(trainset.len()));
    }
    let n_layers = trainset[0].s.num_layers();
    for sample in trainset {
        if sample.s.num_layers() != n_layers {
            return Err(EnergyError::LengthMismatch {
                expected: n_layers,
                got: sample.s.num_layers(),
            });
        }
        if sample.energy <= 0.0 {
            return Err(EnergyError::NonPositiveEnergy(sample.energy));
        }
    }

    let n = trainset.len();
    // raw features x_ij = s_j s_{j+1}
    let mut features = vec![0.0f64; n * n_layers];
    for (i, sample) in trainset.iter().enumerate() {
        for j in 1..=n_layers {
            features[i * n_layers + (j - 1)] = sample.s.extended(j) * sample.s.extended(j + 1);
        }
    }
    let mut feature_means = vec![0.0f64; n_layers];
    for i in 0..n {
        for j in 0..n_layers {
            feature_means[j] += features[i * n_layers + j];
        }
    }
    for m in feature_means.iter_mut() {
        *m /= n as f64;
        debug_assert!(*m >= 1.0);
    }
    let energy_scale = trainset.iter().map(|s| s.energy).sum::<f64>() / n as f64;

    // standardized copies
    for i in 0..n {
        for j in 0..n_layers {
            features[i * n_layers + j] /= feature_means[j];
        }
    }
    let targets: Vec<f64> = trainset.iter().map(|s| s.energy / energy_scale).collect();

    // parameters: b[0] intercept, b[1..] slopes in standardized space
    let p = n_layers + 1;
    let mut b = vec![0.0f64; p];
    b[0] = 1.0;
    let mut m = vec![0.0f64; p];
    let mut v = vec![0.0f64; p];
    let mut grad = vec![0.0f64; p];
    let mut log = Vec::new();

    let unscale = |b: &[f64]| -> BilinearEnergyModel {
        let a0 = b[0] * energy_scale;
        let a = (0..n_layers)
            .map(|j| b[j + 1] * energy_scale / feature_means[j])
            .collect();
        BilinearEnergyModel::new(a0, a)
    };
    let log_row = |b: &[f64], iteration: usize, log: &mut Vec<FitLogRow>| {
        let model = unscale(b);
        let train_error = relative_test_error(&model, trainset).expect("train energies positive");
        let test_error = testset.map(|t| {
            relative_test_error(&model, t).expect("test energies positive")
        });
        log.push(FitLogRow {
            iteration,
            train_error,
            test_error,
        });
    };

    for t in 1..=config.iterations {
        // full-batch gradient of mean squared error in standardized space
        grad.fill(0.0);
        for i in 0..n {
            let mut pred = b[0];
            for j in 0..n_layers {
                pred += b[j + 1] * features[i * n_layers + j];
            }
            let r = 2.0 * (pred - targets[i]) / n as f64;
            grad[0] += r;
            for j in 0..n_layers {
                grad[j + 1] += r * features[i * n_layers + j];
            }
        }
        // weight decay on original-scale slopes: d/db_j (wd/2) a_j^2 with
        // a_j = b_j * scale / mean_j, over the scale-free objective J/scale^2
        for j in 0..n_layers {
            grad[j + 1] += config.weight_decay * b[j + 1] / (feature_means[j] * feature_means[j]);
        }

        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2 = 1.0 - config.beta2.powi(t as i32);
        for k in 0..p {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * grad[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * grad[k] * grad[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            b[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
            if b[k] < 0.0 {
                b[k] = 0.0;
            }
        }

        if config.log_every > 0 && (t % config.log_every == 0 || t == config.iterations) {
            log_row(&b, t, &mut log);
        }
    }
    if config.log_every == 0 {
        log_row(&b, config.iterations, &mut log);
    }

    Ok((unscale(&b), log))
}

/// True when every sample shares one sparsity vector, which leaves the model
/// coefficients unidentifiable.
pub fn is_degenerate(samples: &[EnergySample]) -> bool {
    match samples.first() {
        None => true,
        Some(first) => samples.iter().all(|s| s.s == first.s),
    }
}

/// Seeded shuffle split into train/test with the given train fraction.
pub fn split_samples(
    samples: &[EnergySample],
    train_fraction: f64,
    seed: u64,
) -> (Vec<EnergySample>, Vec<EnergySample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((samples.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, samples.len().saturating_sub(1).max(1));
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    (train, test)
}
