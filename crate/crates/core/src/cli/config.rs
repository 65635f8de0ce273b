//! Flat dotted-key experiment configuration and its resolution into
//! datasets, trainer configs and privacy accounting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::accountant::{
    account_budget, compose_closed_form, solve_sigma0_with_overhead, threshold_update_budget, AccountingReport,
    AccountingWarning, PrivacySpec, TcdpBudget,
};
use crate::clipping::{ClipKind, ClipPolicy};
use crate::data::{load_csv, load_idx, make_synthetic, make_unbalanced, BlobSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Activation, Hidden, LossSpec};
use crate::numerics::RandomSource;
use crate::schedules::{ClipSchedule, DecayKind, DecaySchedule};
use crate::trainer::{LearningRate, LrSchedule, OptimizerConfig, OptimizerKind, PrivateConfig, TrainerConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    Focal,
}

fn default_algorithm() -> String {
    "v2".into()
}
fn synthetic() -> DatasetKind {
    DatasetKind::Synthetic
}
fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_counts() -> Vec<usize> {
    vec![1494, 70]
}
fn default_dims() -> usize {
    2
}
fn default_separation() -> f64 {
    2.0
}
fn default_test_fraction() -> f64 {
    0.25
}
fn default_label_column() -> String {
    "label".into()
}
fn default_regularizer() -> f64 {
    crate::clipping::DEFAULT_AUTOS_REGULARIZER
}
fn default_count_noise() -> f64 {
    10.0
}
fn default_decay() -> DecayKind {
    DecayKind::None
}
fn default_delta() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.1
}
fn default_lr_schedule() -> String {
    "constant".into()
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_loss() -> LossName {
    LossName::CrossEntropy
}
fn default_focal_alpha() -> f64 {
    0.25
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_activation() -> Activation {
    Activation::Relu
}

/// Every key is optional in the file; omitted keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `nonprivate`, a clipping rule (`v2`, `dpsgd`, `autos`, `psac`,
    /// `global`, `global_adapt`), or `<rule>_<decay>` such as `v2_step`.
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    #[serde(default)]
    pub seed: u64,
    /// Number of private runs `s` averaged in the report.
    #[serde(default = "one")]
    pub repetitions: usize,

    #[serde(rename = "dataset.kind", default = "synthetic")]
    pub dataset_kind: DatasetKind,
    /// Seeds generation, splitting and unbalancing.
    #[serde(rename = "dataset.seed", default)]
    pub dataset_seed: u64,
    #[serde(rename = "dataset.images", default)]
    pub images: Option<PathBuf>,
    #[serde(rename = "dataset.labels", default)]
    pub labels: Option<PathBuf>,
    #[serde(rename = "dataset.test_images", default)]
    pub test_images: Option<PathBuf>,
    #[serde(rename = "dataset.test_labels", default)]
    pub test_labels: Option<PathBuf>,
    #[serde(rename = "dataset.csv", default)]
    pub csv: Option<PathBuf>,
    #[serde(rename = "dataset.label_column", default = "default_label_column")]
    pub label_column: String,
    #[serde(rename = "dataset.synthetic.counts", default = "default_counts")]
    pub synthetic_counts: Vec<usize>,
    #[serde(rename = "dataset.synthetic.dims", default = "default_dims")]
    pub synthetic_dims: usize,
    #[serde(rename = "dataset.synthetic.separation", default = "default_separation")]
    pub synthetic_separation: f64,
    /// Used when no explicit test files are given.
    #[serde(rename = "dataset.test_fraction", default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(rename = "dataset.unbalance.minority", default)]
    pub unbalance_minority: Option<usize>,
    #[serde(rename = "dataset.unbalance.fraction", default)]
    pub unbalance_fraction: Option<f64>,

    #[serde(rename = "clip.c0", default = "one_f")]
    pub c0: f64,
    #[serde(rename = "clip.z0", default)]
    pub z0: Option<f64>,
    /// Defaults to `noise.rate` under linear or step decay, else 1.
    #[serde(rename = "clip.rate", default)]
    pub clip_rate: Option<f64>,
    /// Defaults to `noise.every` under linear or step decay, else 1.
    #[serde(rename = "clip.every", default)]
    pub clip_every: Option<usize>,
    #[serde(rename = "clip.w", default = "one_f")]
    pub stability: f64,
    #[serde(rename = "clip.r", default = "default_regularizer")]
    pub regularizer: f64,
    #[serde(rename = "clip.target_fraction", default)]
    pub target_fraction: f64,
    /// Standard deviation of the `global_adapt` count noise.
    #[serde(rename = "clip.count_noise", default = "default_count_noise")]
    pub count_noise: f64,

    #[serde(rename = "noise.decay", default = "default_decay")]
    pub decay: DecayKind,
    #[serde(rename = "noise.rate", default)]
    pub noise_rate: f64,
    #[serde(rename = "noise.every", default = "one")]
    pub noise_every: usize,
    #[serde(rename = "noise.sigma0_squared", default)]
    pub sigma0_squared: Option<f64>,

    #[serde(rename = "privacy.epsilon", default)]
    pub epsilon: Option<f64>,
    #[serde(rename = "privacy.delta", default = "default_delta")]
    pub delta: f64,

    #[serde(rename = "train.epochs", default = "default_epochs")]
    pub epochs: usize,
    #[serde(rename = "train.batch_size", default = "default_batch")]
    pub batch_size: usize,
    #[serde(rename = "train.lr", default = "default_lr")]
    pub lr: f64,
    /// `constant`, `step` or `one_cycle`.
    #[serde(rename = "train.lr_schedule", default = "default_lr_schedule")]
    pub lr_schedule: String,
    #[serde(rename = "train.lr_rate", default = "one_f")]
    pub lr_rate: f64,
    #[serde(rename = "train.lr_every", default = "one")]
    pub lr_every: usize,
    #[serde(rename = "train.optimizer", default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(rename = "train.weight_decay", default)]
    pub weight_decay: f64,
    #[serde(rename = "train.loss", default = "default_loss")]
    pub loss: LossName,
    #[serde(rename = "train.focal_alpha", default = "default_focal_alpha")]
    pub focal_alpha: f64,
    #[serde(rename = "train.focal_gamma", default = "default_focal_gamma")]
    pub focal_gamma: f64,
    /// 0 selects softmax regression.
    #[serde(rename = "train.hidden_width", default)]
    pub hidden_width: usize,
    #[serde(rename = "train.activation", default = "default_activation")]
    pub activation: Activation,

    /// Group pair for the privacy cost gap; defaults to (0, 1) for binary data.
    #[serde(rename = "fairness.groups", default)]
    pub fairness_groups: Option<(usize, usize)>,

    /// ε values for the accountant's inverse table.
    #[serde(rename = "accountant.epsilons", default)]
    pub accountant_epsilons: Vec<f64>,
    /// Schedule kinds for the inverse table; empty means `noise.decay` only.
    #[serde(rename = "accountant.kinds", default)]
    pub accountant_kinds: Vec<DecayKind>,
    /// ρ values to convert to ε.
    #[serde(rename = "accountant.rho_sweep", default)]
    pub rho_sweep: Vec<f64>,
    /// Overrides `n`; otherwise the training split is loaded to count it.
    #[serde(rename = "accountant.dataset_size", default)]
    pub accountant_dataset_size: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("defaults deserialize")
    }
}

/// Parses the right-hand side of `--set key=value`: JSON when it parses,
/// a plain string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// The flat key map inside a config file or a run manifest.
fn flat_map(value: Value, origin: &Path) -> Result<Map<String, Value>> {
    let Value::Object(mut map) = value else {
        return Err(Error::Config(format!(
            "{}: top level must be an object",
            origin.display()
        )));
    };
    if map.contains_key("version") {
        if let Some(Value::Object(inner)) = map.remove("config") {
            return Ok(inner);
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config (or manifest) file and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let value: Value =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                flat_map(value, p)?
            }
            None => Map::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    /// The fully resolved flat key map.
    pub fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// `(clip rule, decay override)`; `None` rule means non-private.
    pub fn algorithm_parts(&self) -> Result<(Option<ClipKind>, Option<DecayKind>)> {
        let name = self.algorithm.as_str();
        if name == "nonprivate" {
            return Ok((None, None));
        }
        if let Ok(kind) = name.parse::<ClipKind>() {
            return Ok((Some(kind), None));
        }
        if let Some((rule, decay)) = name.rsplit_once('_') {
            if let (Ok(kind), Ok(decay)) = (rule.parse::<ClipKind>(), decay.parse::<DecayKind>()) {
                return Ok((Some(kind), Some(decay)));
            }
        }
        Err(Error::Config(format!("unknown algorithm `{name}`")))
    }

    pub fn is_private(&self) -> Result<bool> {
        Ok(self.algorithm_parts()?.0.is_some())
    }

    fn decay_kind(&self) -> Result<DecayKind> {
        Ok(self.algorithm_parts()?.1.unwrap_or(self.decay))
    }

    /// Checks key combinations and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let private = self.is_private()?;
        if private {
            match (self.sigma0_squared, self.epsilon) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "give either noise.sigma0_squared or privacy.epsilon, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config(
                        "a private run needs noise.sigma0_squared or privacy.epsilon".into(),
                    ))
                }
                _ => {}
            }
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        let need = |p: &Option<PathBuf>, key: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("{key} is required for dataset.kind"))),
                Some(p) if !p.exists() => Err(Error::Config(format!("{key}: {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match self.dataset_kind {
            DatasetKind::Idx => {
                need(&self.images, "dataset.images")?;
                need(&self.labels, "dataset.labels")?;
                if self.test_images.is_some() || self.test_labels.is_some() {
                    need(&self.test_images, "dataset.test_images")?;
                    need(&self.test_labels, "dataset.test_labels")?;
                }
            }
            DatasetKind::Csv => need(&self.csv, "dataset.csv")?,
            DatasetKind::Synthetic => {}
        }
        if self.unbalance_minority.is_some() != self.unbalance_fraction.is_some() {
            return Err(Error::Config(
                "dataset.unbalance.minority and dataset.unbalance.fraction go together".into(),
            ));
        }
        self.loss_spec()?;
        self.learning_rate()?;
        Ok(())
    }

    fn loss_spec(&self) -> Result<LossSpec> {
        match self.loss {
            LossName::CrossEntropy => Ok(LossSpec::cross_entropy()),
            LossName::Focal => LossSpec::focal(self.focal_alpha, self.focal_gamma),
        }
    }

    fn learning_rate(&self) -> Result<LearningRate> {
        let schedule = match self.lr_schedule.as_str() {
            "constant" => LrSchedule::Constant,
            "step" => LrSchedule::Step {
                rate: self.lr_rate,
                every: self.lr_every,
            },
            "one_cycle" => LrSchedule::OneCycle,
            other => return Err(Error::Config(format!("unknown train.lr_schedule `{other}`"))),
        };
        Ok(LearningRate {
            base: self.lr,
            schedule,
        })
    }

    /// Decay schedule with the given `σ0²`.
    pub fn noise_schedule(&self, sigma0_squared: f64) -> Result<DecaySchedule> {
        self.noise_schedule_of(self.decay_kind()?, sigma0_squared)
    }

    fn noise_schedule_of(&self, kind: DecayKind, sigma0_squared: f64) -> Result<DecaySchedule> {
        DecaySchedule::new(kind, sigma0_squared, self.noise_rate, self.noise_every)
    }

    /// `(R, K)` of the threshold schedule, shared with a multiplicative
    /// noise decay unless set explicitly.
    pub fn clip_decay(&self) -> Result<(f64, usize)> {
        let (rate, every) = match self.decay_kind()? {
            DecayKind::Linear => (self.noise_rate, 1),
            DecayKind::Step => (self.noise_rate, self.noise_every),
            DecayKind::None | DecayKind::Time => (1.0, 1),
        };
        Ok((self.clip_rate.unwrap_or(rate), self.clip_every.unwrap_or(every)))
    }

    fn clip_policy(&self, kind: ClipKind) -> Result<ClipPolicy> {
        let z0 = || self.z0.ok_or_else(|| Error::Config(format!("{kind} needs clip.z0")));
        match kind {
            ClipKind::V2 => ClipPolicy::v2(self.c0, z0()?, self.stability),
            ClipKind::Dpsgd => ClipPolicy::dpsgd(self.c0),
            ClipKind::Autos => ClipPolicy::autos(self.c0, self.regularizer),
            ClipKind::Psac => ClipPolicy::psac(self.c0, self.stability),
            ClipKind::Global => ClipPolicy::global(self.c0, z0()?),
            ClipKind::GlobalAdapt => ClipPolicy::global_adapt(self.c0, z0()?, self.target_fraction),
        }
    }

    /// Privacy spec for a training set of size `n` with the given `σ0²`.
    pub fn privacy_spec(&self, n: usize, sigma0_squared: f64) -> Result<PrivacySpec> {
        self.privacy_spec_of(self.noise_schedule(sigma0_squared)?, n)
    }

    fn privacy_spec_of(&self, schedule: DecaySchedule, n: usize) -> Result<PrivacySpec> {
        PrivacySpec::new(self.c0, self.batch_size, n, self.epochs, schedule, self.delta)
    }

    /// Extra budget spent by privatized threshold updates.
    fn overhead(&self, spec: &PrivacySpec) -> Result<Option<TcdpBudget>> {
        match self.algorithm_parts()?.0 {
            Some(ClipKind::GlobalAdapt) => Ok(Some(threshold_update_budget(spec, self.count_noise.powi(2))?)),
            _ => Ok(None),
        }
    }

    /// Solves or checks the privacy side for a training set of size `n`.
    pub fn resolve_privacy(&self, n: usize) -> Result<Option<ResolvedPrivacy>> {
        if !self.is_private()? {
            return Ok(None);
        }
        // the overhead does not depend on σ0², so any placeholder works
        let placeholder = self.privacy_spec(n, 1.0)?;
        let overhead = self.overhead(&placeholder)?;
        let sigma0_squared = match (self.sigma0_squared, self.epsilon) {
            (Some(s), None) => s,
            (None, Some(eps)) => solve_sigma0_with_overhead(eps, &placeholder, overhead.map_or(0.0, |o| o.rho))?,
            _ => {
                return Err(Error::Config(
                    "exactly one of noise.sigma0_squared and privacy.epsilon".into(),
                ))
            }
        };
        let spec = self.privacy_spec(n, sigma0_squared)?;
        let mut budget = compose_closed_form(&spec)?;
        if let Some(o) = overhead {
            budget = budget.compose(o);
        }
        let mut report = account_budget(&spec, budget)?;
        if let Some(o) = overhead {
            report
                .warnings
                .push(AccountingWarning::ThresholdUpdateCharged { rho: o.rho });
        }
        Ok(Some(ResolvedPrivacy { sigma0_squared, report }))
    }

    /// Trainer config for one run.
    pub fn trainer_config(&self, sigma0_squared: Option<f64>, seed: u64) -> Result<TrainerConfig> {
        let (rule, _) = self.algorithm_parts()?;
        let privacy = match rule {
            None => None,
            Some(kind) => {
                let s0 = sigma0_squared.ok_or_else(|| Error::Config("missing σ0² for a private run".into()))?;
                let clip_schedule = match self.z0 {
                    Some(z0) if kind.uses_threshold() => {
                        let (rate, every) = self.clip_decay()?;
                        Some(ClipSchedule::new(z0, rate, every)?)
                    }
                    _ => None,
                };
                Some(PrivateConfig {
                    clip: self.clip_policy(kind)?,
                    noise: self.noise_schedule(s0)?,
                    clip_schedule,
                    threshold_noise_std: if kind == ClipKind::GlobalAdapt {
                        self.count_noise
                    } else {
                        0.0
                    },
                })
            }
        };
        let optimizer = match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig {
                weight_decay: self.weight_decay,
                ..OptimizerConfig::sgd()
            },
            OptimizerKind::Adamw => OptimizerConfig::adamw(self.weight_decay),
        };
        let hidden = (self.hidden_width > 0).then_some(Hidden {
            width: self.hidden_width,
            activation: self.activation,
        });
        let config = TrainerConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate()?,
            optimizer,
            loss: self.loss_spec()?,
            hidden,
            privacy,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Train and test splits.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let root = RandomSource::new(self.dataset_seed);
        let (train, test) = match self.dataset_kind {
            DatasetKind::Synthetic => {
                let spec = BlobSpec {
                    dims: self.synthetic_dims,
                    counts: self.synthetic_counts.clone(),
                    separation: self.synthetic_separation,
                };
                let all = make_synthetic(&spec, &mut root.child(0))?;
                all.split(self.test_fraction, &mut root.child(1))?
            }
            DatasetKind::Idx => {
                let images = self
                    .images
                    .as_deref()
                    .ok_or_else(|| Error::Config("dataset.images".into()))?;
                let labels = self
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Config("dataset.labels".into()))?;
                let all = load_idx(images, labels)?;
                match (&self.test_images, &self.test_labels) {
                    (Some(ti), Some(tl)) => (all, load_idx(ti, tl)?),
                    _ => all.split(self.test_fraction, &mut root.child(1))?,
                }
            }
            DatasetKind::Csv => {
                let path = self.csv.as_deref().ok_or_else(|| Error::Config("dataset.csv".into()))?;
                load_csv(path, &self.label_column)?
                    .dataset
                    .split(self.test_fraction, &mut root.child(1))?
            }
        };
        let train = match (self.unbalance_minority, self.unbalance_fraction) {
            (Some(m), Some(f)) => make_unbalanced(&train, m, f, &mut root.child(2))?,
            _ => train,
        };
        Ok((train, test))
    }

    /// Gap pair: configured, else `(0, 1)` for binary data.
    pub fn gap_groups(&self, classes: usize) -> Option<(usize, usize)> {
        self.fairness_groups.or((classes == 2).then_some((0, 1)))
    }

    /// The dataset-defining keys, for comparing configs.
    pub fn dataset_keys(&self) -> Map<String, Value> {
        self.to_map()
            .into_iter()
            .filter(|(k, _)| k.starts_with("dataset."))
            .collect()
    }

    /// Kinds for the accountant's inverse table.
    pub fn accountant_kinds(&self) -> Result<Vec<DecayKind>> {
        if self.accountant_kinds.is_empty() {
            Ok(vec![self.decay_kind()?])
        } else {
            Ok(self.accountant_kinds.clone())
        }
    }

    pub fn privacy_spec_for_kind(&self, kind: DecayKind, n: usize, sigma0_squared: f64) -> Result<PrivacySpec> {
        self.privacy_spec_of(self.noise_schedule_of(kind, sigma0_squared)?, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPrivacy {
    pub sigma0_squared: f64,
    pub report: AccountingReport,
}
