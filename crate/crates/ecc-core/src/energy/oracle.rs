//! Energy oracles: the blackbox measurement abstraction, a seeded simulated
//! device, and an adapter that shells out to a user-supplied measurement
//! command.

use super::{EnergyError, SparsityVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

/// Blackbox that returns measured joules for a sparsity setting. `trial`
/// indexes repeated measurements of the same vector so simulated noise is
/// reproducible and profiling runs can resume mid-sample.
pub trait EnergyOracle {
    fn measure(&mut self, s: &SparsityVector, trial: u32) -> Result<f64, EnergyError>;

    /// Relative measurement noise the oracle expects of itself (stdev/mean);
    /// 0.0 when noise-free or unknown.
    fn noise_level(&self) -> f64 {
        0.0
    }
}

/// Hidden ground-truth cost family for the simulated device.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Exactly the bilinear family the estimator assumes.
    Bilinear,
    /// Each bilinear term saturates: x -> knee * (1 - exp(-x / knee)).
    Saturating { knee: f64 },
    /// Bilinear plus a fixed per-layer overhead in joules.
    LayerOverhead { overhead: Vec<f64> },
}

/// Stand-in for a hardware power rail: a configurable hidden cost function
/// plus optional multiplicative Gaussian noise, deterministic per
/// `(seed, s, trial)`.
#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    a0: f64,
    coefficients: Vec<f64>,
    truth: GroundTruth,
    noise: f64,
    seed: u64,
    fail_after: Option<u64>,
    calls: u64,
}

impl SimulatedDevice {
    pub fn new(a0: f64, coefficients: Vec<f64>, truth: GroundTruth, noise: f64, seed: u64) -> Self {
        assert!(a0 >= 0.0 && coefficients.iter().all(|&a| a > 0.0));
        SimulatedDevice {
            a0,
            coefficients,
            truth,
            noise,
            seed,
            fail_after: None,
            calls: 0,
        }
    }

    /// Injects a failure after `n` successful measurements (for exercising
    /// error paths and profile resumption).
    pub fn with_failure_after(mut self, n: u64) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn num_layers(&self) -> usize {
        self.coefficients.len()
    }

    /// Noise-free cost at a sparsity setting.
    pub fn true_energy(&self, s: &SparsityVector) -> Result<f64, EnergyError> {
        if s.num_layers() != self.coefficients.len() {
            return Err(EnergyError::LengthMismatch {
                expected: self.coefficients.len(),
                got: s.num_layers(),
            });
        }
        let mut total = self.a0;
        for j in 1..=self.coefficients.len() {
            let x = s.extended(j) * s.extended(j + 1);
            let term = match &self.truth {
                GroundTruth::Bilinear => x,
                GroundTruth::Saturating { knee } => knee * (1.0 - (-x / knee).exp()),
                GroundTruth::LayerOverhead { .. } => x,
            };
            total += self.coefficients[j - 1] * term;
            if let GroundTruth::LayerOverhead { overhead } = &self.truth {
                total += overhead.get(j - 1).copied().unwrap_or(0.0);
            }
        }
        Ok(total)
    }

    fn noise_factor(&self, s: &SparsityVector, trial: u32) -> f64 {
        if self.noise == 0.0 {
            return 1.0;
        }
        // stable per-measurement stream: mix the seed, the vector bits, and
        // the trial index (split-mix finalizer, independent of std hashing)
        fn mix(mut z: u64) -> u64 {
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }
        let mut h = mix(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        for &v in s.layers() {
            h = mix(h ^ v.to_bits());
        }
        h = mix(h ^ s.output_dim() as u64);
        h = mix(h ^ u64::from(trial));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let xi: f64 = StandardNormal.sample(&mut rng);
        1.0 + self.noise * xi
    }
}

impl EnergyOracle for SimulatedDevice {
    fn measure(&mut self, s: &SparsityVector, trial: u32) -> Result<f64, EnergyError> {
        if let Some(limit) = self.fail_after {
            if self.calls >= limit {
                return Err(EnergyError::SimulatedFailure(limit));
            }
        }
        self.calls += 1;
        let e = self.true_energy(s)? * self.noise_factor(s, trial);
        Ok(e.max(f64::MIN_POSITIVE))
    }

    fn noise_level(&self) -> f64 {
        self.noise
    }
}

/// Runs a user-supplied shell command per measurement. The architecture and
/// integer sparsity vector are written to the command's stdin in the profile
/// exchange format; the command prints one real number (joules) on stdout.
pub struct ExternalCommandDevice {
    command: String,
    arch_text: String,
    timeout: Duration,
    noise_hint: f64,
}

impl ExternalCommandDevice {
    pub fn new(command: impl Into<String>, arch_text: impl Into<String>, timeout: Duration) -> Self {
        ExternalCommandDevice {
            command: command.into(),
            arch_text: arch_text.into(),
            timeout,
            noise_hint: 0.0,
        }
    }

    pub fn with_noise_hint(mut self, noise: f64) -> Self {
        self.noise_hint = noise;
        self
    }

    fn io_err(context: &str, source: std::io::Error) -> EnergyError {
        EnergyError::Io {
            context: context.to_string(),
            source,
        }
    }
}

impl EnergyOracle for ExternalCommandDevice {
    fn measure(&mut self, s: &SparsityVector, _trial: u32) -> Result<f64, EnergyError> {
        let payload = super::files::render_exchange(&self.arch_text, s);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Self::io_err("spawning measurement command", e))?;

        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(payload.as_bytes())
            .map_err(|e| Self::io_err("writing exchange payload", e))?;

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child
                .try_wait()
                .map_err(|e| Self::io_err("waiting for measurement command", e))?
            {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EnergyError::CommandTimeout(self.timeout.as_secs_f64()));
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        };

        let mut stdout = String::new();
        if let Some(mut out) = child.stdout.take() {
            let _ = out.read_to_string(&mut stdout);
        }
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut err) = child.stderr.take() {
                let _ = err.read_to_string(&mut stderr);
            }
            return Err(EnergyError::CommandFailed {
                code: status.code(),
                stderr: stderr.trim().to_string(),
            });
        }
        let last = stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("");
        last.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| EnergyError::UnparseableOutput {
                output: stdout.trim().to_string(),
            })
    }

    fn noise_level(&self) -> f64 {
        self.noise_hint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{collect, collect_one};

    fn sv(layers: &[f64], out: usize) -> SparsityVector {
        SparsityVector::new(layers.to_vec(), out)
    }

    #[test]
    fn bilinear_mode_matches_hidden_model() {
        let mut dev = SimulatedDevice::new(1.0, vec![2.0, 3.0], GroundTruth::Bilinear, 0.0, 0);
        let s = sv(&[2.0, 3.0], 4);
        assert_eq!(dev.measure(&s, 0).unwrap(), 49.0);
    }

    #[test]
    fn energy_increases_in_each_component() {
        for truth in [
            GroundTruth::Bilinear,
            GroundTruth::Saturating { knee: 500.0 },
            GroundTruth::LayerOverhead {
                overhead: vec![0.1, 0.2, 0.3],
            },
        ] {
            let mut dev = SimulatedDevice::new(0.5, vec![0.4, 0.2, 0.9], truth, 0.0, 0);
            let base = sv(&[3.0, 5.0, 2.0], 6);
            let e0 = dev.measure(&base, 0).unwrap();
            for j in 0..3 {
                let mut bumped = base.clone();
                bumped.layers_mut()[j] += 1.0;
                assert!(dev.measure(&bumped, 0).unwrap() > e0);
            }
        }
    }

    #[test]
    fn noise_is_deterministic_per_trial_and_varies_across_trials() {
        let mut dev = SimulatedDevice::new(1.0, vec![1.0], GroundTruth::Bilinear, 0.05, 9);
        let s = sv(&[4.0], 3);
        let a = dev.measure(&s, 0).unwrap();
        let b = dev.measure(&s, 0).unwrap();
        let c = dev.measure(&s, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn measured_spread_tracks_configured_noise() {
        // 1000 repeated measurements: sample stdev/mean within [0.005, 0.015]
        // for sigma = 1%
        let mut dev = SimulatedDevice::new(0.2, vec![0.8], GroundTruth::Bilinear, 0.01, 21);
        let s = sv(&[7.0], 5);
        let values: Vec<f64> = (0..1000).map(|t| dev.measure(&s, t).unwrap()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        let rel = var.sqrt() / mean;
        assert!((0.005..=0.015).contains(&rel), "relative spread {rel}");
    }

    #[test]
    fn collect_noise_free_has_zero_stdev() {
        let mut dev = SimulatedDevice::new(1.0, vec![1.0], GroundTruth::Bilinear, 0.0, 0);
        let s = [sv(&[2.0], 2)];
        let out = collect(&mut dev, &s, 5).unwrap();
        assert_eq!(out[0].stdev, 0.0);
        assert_eq!(out[0].trials, 5);
    }

    #[test]
    fn collect_single_trial_returns_single_measurement() {
        let mut dev = SimulatedDevice::new(1.0, vec![1.0], GroundTruth::Bilinear, 0.02, 3);
        let s = sv(&[2.0], 2);
        let direct = SimulatedDevice::new(1.0, vec![1.0], GroundTruth::Bilinear, 0.02, 3)
            .measure(&s, 0)
            .unwrap();
        let out = collect_one(&mut dev, &s, 1).unwrap();
        assert_eq!(out.energy, direct);
        assert_eq!(out.stdev, 0.0);
    }

    #[test]
    fn collect_stdev_close_to_sigma_over_100_trials() {
        let mut dev = SimulatedDevice::new(0.0, vec![1.0], GroundTruth::Bilinear, 0.02, 17);
        let s = sv(&[10.0], 10); // true energy 100, sigma_abs = 2
        let out = collect_one(&mut dev, &s, 100).unwrap();
        let sigma_abs = 0.02 * 100.0;
        assert!(
            out.stdev >= 0.5 * sigma_abs && out.stdev <= 1.5 * sigma_abs,
            "stdev {} vs sigma {}",
            out.stdev,
            sigma_abs
        );
    }

    #[test]
    fn collect_propagates_failure_with_offending_vector() {
        let mut dev = SimulatedDevice::new(1.0, vec![1.0], GroundTruth::Bilinear, 0.0, 0)
            .with_failure_after(3);
        let samples = [sv(&[1.0], 2), sv(&[2.0], 2), sv(&[3.0], 2)];
        let err = collect(&mut dev, &samples, 2).unwrap_err();
        match err {
            EnergyError::Oracle { s, .. } => assert_eq!(s, vec![2.0]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn external_command_constant_output() {
        let mut dev = ExternalCommandDevice::new(
            "cat > /dev/null; echo 2.75",
            "layers 1\n",
            Duration::from_secs(10),
        );
        assert_eq!(dev.measure(&sv(&[3.0], 2), 0).unwrap(), 2.75);
    }

    #[test]
    fn external_command_nonzero_exit() {
        let mut dev = ExternalCommandDevice::new(
            "cat > /dev/null; echo boom >&2; exit 3",
            "layers 1\n",
            Duration::from_secs(10),
        );
        match dev.measure(&sv(&[3.0], 2), 0).unwrap_err() {
            EnergyError::CommandFailed { code, stderr } => {
                assert_eq!(code, Some(3));
                assert_eq!(stderr, "boom");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn external_command_unparseable_output() {
        let mut dev = ExternalCommandDevice::new(
            "cat > /dev/null; echo not-a-number",
            "layers 1\n",
            Duration::from_secs(10),
        );
        assert!(matches!(
            dev.measure(&sv(&[3.0], 2), 0),
            Err(EnergyError::UnparseableOutput { .. })
        ));
    }

    #[test]
    fn external_command_timeout() {
        let mut dev = ExternalCommandDevice::new(
            "cat > /dev/null; sleep 30",
            "layers 1\n",
            Duration::from_millis(150),
        );
        assert!(matches!(
            dev.measure(&sv(&[3.0], 2), 0),
            Err(EnergyError::CommandTimeout(_))
        ));
    }
}
