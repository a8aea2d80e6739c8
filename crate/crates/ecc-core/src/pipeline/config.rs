//! One structured config file drives the whole workflow; sections map to
//! stages and CLI flags override individual keys. Every artifact records a
//! hash of the semantically relevant config so reruns are auditable.

use crate::network::{Activation, LayerKind, LayerSpec};
use crate::pipeline::PipelineError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    pub oracle: OracleConfig,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub energy_fit: FitSection,
    pub solver: SolverSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic", "columnar", or "raster".
    pub kind: String,
    /// Paths for on-disk datasets.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_dataset_noise")]
    pub noise: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_train_samples() -> usize {
    512
}
fn default_test_samples() -> usize {
    256
}
fn default_dataset_noise() -> f64 {
    0.3
}
fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// "conv" or "fc".
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
}

fn default_kernel() -> [usize; 2] {
    [1, 1]
}
fn default_stride() -> usize {
    1
}
fn default_activation() -> String {
    "relu".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// "simulated" or "external".
    pub kind: String,
    #[serde(default)]
    pub simulated: SimulatedSection,
    #[serde(default)]
    pub external: ExternalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedSection {
    /// "bilinear", "saturating", or "overhead".
    #[serde(default = "default_sim_mode")]
    pub mode: String,
    /// Idle energy in joules.
    #[serde(default = "default_a0")]
    pub a0: f64,
    /// Hidden per-layer coefficients; derived from arithmetic counts when
    /// absent.
    #[serde(default)]
    pub coefficients: Option<Vec<f64>>,
    /// Scale for derived coefficients (joules per multiply-accumulate).
    #[serde(default = "default_joules_per_mac")]
    pub joules_per_mac: f64,
    /// Saturation knee for the "saturating" mode, in channel-product units.
    #[serde(default = "default_knee")]
    pub knee: f64,
    /// Fixed per-layer overhead in joules for the "overhead" mode.
    #[serde(default)]
    pub overhead: f64,
    /// Multiplicative Gaussian measurement noise (stdev/mean).
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fault injection for tests: fail after this many measurements.
    /// Excluded from the reproducibility hash.
    #[serde(default, skip_serializing)]
    pub fail_after: Option<u64>,
}

impl Default for SimulatedSection {
    fn default() -> Self {
        SimulatedSection {
            mode: default_sim_mode(),
            a0: default_a0(),
            coefficients: None,
            joules_per_mac: default_joules_per_mac(),
            knee: default_knee(),
            overhead: 0.0,
            noise: 0.0,
            seed: default_seed(),
            fail_after: None,
        }
    }
}

fn default_sim_mode() -> String {
    "bilinear".into()
}
fn default_a0() -> f64 {
    0.15
}
fn default_joules_per_mac() -> f64 {
    1e-4
}
fn default_knee() -> f64 {
    1e4
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    #[serde(default)]
    pub command: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(default = "default_profile_samples")]
    pub samples: usize,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Train fraction of the seeded shuffle split.
    #[serde(default = "default_split")]
    pub split: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            samples: default_profile_samples(),
            trials: default_trials(),
            seed: default_seed(),
            split: default_split(),
        }
    }
}

fn default_profile_samples() -> usize {
    2000
}
fn default_trials() -> u32 {
    3
}
fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_fit_iterations")]
    pub iterations: usize,
    #[serde(default = "default_fit_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            iterations: default_fit_iterations(),
            learning_rate: default_fit_lr(),
            weight_decay: default_weight_decay(),
            seed: default_seed(),
            log_every: default_log_every(),
        }
    }
}

fn default_fit_iterations() -> usize {
    10_000
}
fn default_fit_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    100
}

/// Sparsity learning rate in the config: the string "auto" or a number.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BetaSetting {
    Auto(String),
    Manual(f64),
}

impl Default for BetaSetting {
    fn default() -> Self {
        BetaSetting::Auto("auto".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Energy budget in joules; overridden by --budget.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Alternative: budget as a fraction of the dense model's estimate.
    #[serde(default)]
    pub budget_fraction: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: BetaSetting,
    #[serde(default = "default_beta_fraction")]
    pub beta_fraction: f64,
    #[serde(default = "default_rho")]
    pub rho1: f64,
    #[serde(default = "default_rho")]
    pub rho2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Scalar lower bound applied to every layer unless `lower_bounds` is
    /// present.
    #[serde(default = "default_lower_bound")]
    pub lower_bound: f64,
    #[serde(default)]
    pub lower_bounds: Option<Vec<f64>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub batch_seed: u64,
    #[serde(default)]
    pub zero_tol: f64,
    #[serde(default)]
    pub grace_iters: usize,
    /// Distill against the dense teacher during compression.
    #[serde(default = "default_true")]
    pub use_kd: bool,
}

fn default_alpha() -> f64 {
    1e-2
}
fn default_beta_fraction() -> f64 {
    0.8
}
fn default_rho() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_lower_bound() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    1000
}
fn default_batch_size() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "default_pretrain_iterations")]
    pub iterations: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            iterations: default_pretrain_iterations(),
            learning_rate: default_train_lr(),
            batch_size: default_batch_size(),
            seed: default_seed(),
        }
    }
}

fn default_pretrain_iterations() -> usize {
    600
}
fn default_train_lr() -> f64 {
    5e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_finetune_iterations")]
    pub iterations: usize,
    #[serde(default = "default_train_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Distill against the dense teacher checkpoint when available.
    #[serde(default = "default_true")]
    pub use_teacher: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            iterations: default_finetune_iterations(),
            learning_rate: default_train_lr(),
            lambda_kd: default_lambda_kd(),
            temperature: default_temperature(),
            batch_size: default_batch_size(),
            seed: default_seed(),
            use_teacher: true,
        }
    }
}

fn default_finetune_iterations() -> usize {
    400
}
fn default_lambda_kd() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir", skip_serializing)]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_output_dir(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("reading config {}: {e}", path.display()))
        })?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("parsing {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(PipelineError::Config(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {}
            "columnar" | "raster" => {
                if self.dataset.train.is_none() || self.dataset.test.is_none() {
                    return Err(PipelineError::Config(
                        "on-disk datasets need train and test paths".into(),
                    ));
                }
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown dataset kind {other:?}"
                )))
            }
        }
        match self.oracle.kind.as_str() {
            "simulated" => {}
            "external" => {
                if self.oracle.external.command.is_empty() {
                    return Err(PipelineError::Config(
                        "external oracle needs a command".into(),
                    ));
                }
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown oracle kind {other:?}"
                )))
            }
        }
        self.layer_specs()?;
        if !(0.0..1.0).contains(&(1.0 - self.profile.split)) {
            return Err(PipelineError::Config("profile split must be in (0,1)".into()));
        }
        Ok(())
    }

    /// Layer specifications, validated for chaining.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>, PipelineError> {
        let specs: Vec<LayerSpec> = self
            .architecture
            .layers
            .iter()
            .map(|l| {
                let activation = match l.activation.as_str() {
                    "relu" => Ok(Activation::Relu),
                    "none" => Ok(Activation::None),
                    other => Err(PipelineError::Config(format!(
                        "unknown activation {other:?}"
                    ))),
                }?;
                let kind = match l.kind.as_str() {
                    "conv" => Ok(LayerKind::Conv {
                        stride: l.stride,
                        padding: l.padding,
                    }),
                    "fc" => Ok(LayerKind::FullyConnected),
                    other => Err(PipelineError::Config(format!("unknown layer kind {other:?}"))),
                }?;
                Ok(LayerSpec {
                    kind,
                    d: l.out_channels,
                    c: l.in_channels,
                    rh: l.kernel[0],
                    rw: l.kernel[1],
                    activation,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        crate::network::validate_architecture(&specs)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if specs[0].c != self.dataset.channels {
            return Err(PipelineError::Config(format!(
                "first layer expects {} input channels, dataset has {}",
                specs[0].c, self.dataset.channels
            )));
        }
        Ok(specs)
    }

    /// Network output dimensionality (= number of classes).
    pub fn n_out(&self) -> usize {
        self.architecture
            .layers
            .last()
            .map(|l| l.out_channels)
            .unwrap_or(0)
    }

    /// Hash over the semantically relevant configuration: the output
    /// directory and fault-injection knobs are excluded, so artifacts from
    /// identical runs into different directories stay byte-identical.
    pub fn semantic_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Applies the --seed override: every stage seed is re-derived from the
    /// base so one flag re-seeds the whole pipeline.
    pub fn override_seed(&mut self, base: u64) {
        self.dataset.seed = base.wrapping_add(1);
        self.oracle.simulated.seed = base.wrapping_add(2);
        self.profile.seed = base.wrapping_add(3);
        self.energy_fit.seed = base.wrapping_add(4);
        self.solver.batch_seed = base.wrapping_add(5);
        self.pretrain.seed = base.wrapping_add(6);
        self.finetune.seed = base.wrapping_add(7);
    }

    pub fn override_budget(&mut self, joules: f64) {
        self.solver.budget = Some(joules);
        self.solver.budget_fraction = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY_CONFIG: &str = r#"
[dataset]
kind = "synthetic"
channels = 2
height = 6
width = 6
classes = 4

[[architecture.layers]]
kind = "conv"
in_channels = 2
out_channels = 8
kernel = [3, 3]
stride = 1
padding = 1

[[architecture.layers]]
kind = "conv"
in_channels = 8
out_channels = 16
kernel = [6, 6]

[[architecture.layers]]
kind = "fc"
in_channels = 16
out_channels = 12

[[architecture.layers]]
kind = "fc"
in_channels = 12
out_channels = 4
activation = "none"

[oracle]
kind = "simulated"

[solver]
budget_fraction = 0.75
"#;

    #[test]
    fn toy_config_parses_and_validates() {
        let config: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        config.validate().unwrap();
        let specs = config.layer_specs().unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(config.n_out(), 4);
        assert_eq!(config.profile.samples, 2000);
        assert_eq!(config.energy_fit.weight_decay, 1.0);
    }

    #[test]
    fn hash_ignores_output_dir_and_fault_injection() {
        let mut a: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        let mut b: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        a.output.dir = PathBuf::from("out-a");
        b.output.dir = PathBuf::from("out-b");
        b.oracle.simulated.fail_after = Some(3);
        assert_eq!(a.semantic_hash(), b.semantic_hash());
    }

    #[test]
    fn hash_changes_with_semantic_fields() {
        let a: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        let mut b: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        b.profile.seed = 999;
        assert_ne!(a.semantic_hash(), b.semantic_hash());
    }

    #[test]
    fn seed_override_touches_every_stage() {
        let mut config: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        config.override_seed(100);
        assert_eq!(config.dataset.seed, 101);
        assert_eq!(config.oracle.simulated.seed, 102);
        assert_eq!(config.profile.seed, 103);
        assert_eq!(config.energy_fit.seed, 104);
        assert_eq!(config.solver.batch_seed, 105);
        assert_eq!(config.pretrain.seed, 106);
        assert_eq!(config.finetune.seed, 107);
    }

    #[test]
    fn mismatched_first_layer_is_rejected() {
        let mut config: PipelineConfig = toml::from_str(TOY_CONFIG).unwrap();
        config.dataset.channels = 3;
        assert!(config.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{TOY_CONFIG}\n[bogus]\nx = 1\n");
        assert!(toml::from_str::<PipelineConfig>(&bad).is_err());
    }
}
