//! The private training loop: Poisson sampling, per-sample gradients,
//! scaling, Gaussian noise on the sum, optimizer step, per-epoch schedule
//! refresh and trajectory recording. A non-private mode runs the same loop
//! on raw batch-mean gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clipping::{ClipKind, ClipPolicy};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{Architecture, Hidden, LossSpec, ModelState};
use crate::numerics::{DenseVector, RandomSource};
use crate::schedules::{epoch_of_iteration, ClipSchedule, DecaySchedule};

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_THRESHOLD: u64 = 3;

/// Each index kept independently with probability `q`, in increasing order.
pub fn poisson_sample(rng: &mut RandomSource, n: usize, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("sampling_rate", format!("need 0 < q <= 1, got {q}")));
    }
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    Ok((0..n).filter(|_| rng.bernoulli(q)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `η R^⌊e/K⌋` on epochs.
    Step {
        rate: f64,
        every: usize,
    },
    /// Linear warm-up from `η` to `10 η` over the first 30% of iterations,
    /// then cosine decay back to `η`.
    OneCycle,
}

impl LrSchedule {
    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Step { .. } => "step",
            LrSchedule::OneCycle => "one_cycle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub base: f64,
    pub schedule: LrSchedule,
}

impl LearningRate {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            schedule: LrSchedule::Constant,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.base)));
        }
        if let LrSchedule::Step { rate, every } = self.schedule {
            if !(rate > 0.0 && rate <= 1.0) || every == 0 {
                return Err(Error::invalid("lr_schedule", "step needs 0 < R <= 1 and K >= 1"));
            }
        }
        Ok(())
    }

    /// Rate at iteration `t` of `total`, in epoch `epoch`.
    pub fn at(&self, t: usize, total: usize, epoch: usize) -> f64 {
        let eta = self.base;
        match self.schedule {
            LrSchedule::Constant => eta,
            LrSchedule::Step { rate, every } => eta * rate.powi((epoch / every) as i32),
            LrSchedule::OneCycle => {
                let warm = ((0.3 * total as f64).round() as usize).max(1);
                let peak = 10.0 * eta;
                if t < warm {
                    eta + (peak - eta) * t as f64 / warm as f64
                } else {
                    let span = total.saturating_sub(warm).max(1) as f64;
                    let progress = ((t - warm) as f64 / span).min(1.0);
                    eta + (peak - eta) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::Adamw),
            other => Err(Error::invalid("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adamw => "adamw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Decoupled: `θ <- θ - η λ θ` in addition to the gradient step.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::sgd()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates for AdamW; unused by SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, dim: usize) -> Self {
        let moments = if config.kind == OptimizerKind::Adamw { dim } else { 0 };
        Self {
            config,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            steps: 0,
        }
    }

    /// New parameters after one step on gradient `g`.
    pub fn step(&mut self, params: &[f64], g: &[f64], lr: f64) -> Vec<f64> {
        let decay = 1.0 - lr * self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::Sgd => params.iter().zip(g).map(|(p, g)| decay * p - lr * g).collect(),
            OptimizerKind::Adamw => {
                let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
                self.steps = self.steps.saturating_add(1);
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                params
                    .iter()
                    .zip(g)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                    .map(|((p, g), (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        decay * p - lr * m_hat / (v_hat.sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

/// The privatization half of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateConfig {
    pub clip: ClipPolicy,
    /// `σ_e²` of the noise added to the sum of scaled gradients.
    pub noise: DecaySchedule,
    /// Drives `z_e` for `v2` and `global`. Ignored by `global_adapt`, whose
    /// threshold starts at the policy's `z` and then adapts.
    pub clip_schedule: Option<ClipSchedule>,
    /// Standard deviation of the noise on the `global_adapt` count release.
    pub threshold_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: LearningRate,
    pub optimizer: OptimizerConfig,
    pub loss: LossSpec,
    pub hidden: Option<Hidden>,
    /// `None` trains without clipping or noise.
    pub privacy: Option<PrivateConfig>,
    pub seed: u64,
}

impl TrainerConfig {
    /// Checks everything that does not depend on the dataset size.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        self.learning_rate.validate()?;
        self.optimizer.validate()?;
        let Some(p) = &self.privacy else {
            return Ok(());
        };
        if !(p.threshold_noise_std >= 0.0) || !p.threshold_noise_std.is_finite() {
            return Err(Error::invalid("threshold_noise", "must be non-negative"));
        }
        let kind = p.clip.kind();
        // global_adapt moves z itself, starting from the policy's threshold
        if matches!(kind, ClipKind::V2 | ClipKind::Global) {
            let Some(schedule) = p.clip_schedule else {
                return Err(Error::invalid(
                    "clip_schedule",
                    format!("{kind} needs a threshold schedule"),
                ));
            };
            // z only decays, so the last epoch is the binding one
            let last = schedule.threshold_at(self.epochs - 1);
            if !(last > p.clip.lower()) {
                return Err(Error::invalid(
                    "clip_schedule",
                    format!("z reaches {last} by the final epoch, not above c0 = {}", p.clip.lower()),
                ));
            }
        }
        if kind == ClipKind::GlobalAdapt && !(p.threshold_noise_std > 0.0) {
            return Err(Error::invalid(
                "threshold_noise",
                "global_adapt needs positive count noise",
            ));
        }
        Ok(())
    }

    pub fn sampling_rate(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Dataset("empty training set".into()));
        }
        if self.batch_size > n {
            return Err(Error::invalid(
                "batch_size",
                format!("b = {} exceeds the dataset size {n}", self.batch_size),
            ));
        }
        Ok(self.batch_size as f64 / n as f64)
    }

    /// `T = round(E / q) = round(E n / b)`.
    pub fn total_iterations(&self, n: usize) -> usize {
        (self.epochs as f64 * n as f64 / self.batch_size as f64).round() as usize
    }
}

/// One row of the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub epoch: usize,
    pub sigma2: f64,
    /// `z_e` for threshold rules, `c0` for the others, 0 without privacy.
    pub threshold: f64,
    /// Mean raw per-sample gradient norm over the batch.
    pub avg_grad_norm: f64,
    pub discarded: usize,
    /// Mean training loss over the batch, before the update.
    pub loss: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-size weighted mean of the epoch's iteration losses.
    pub train_loss: f64,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sampling_rate: f64,
    pub total_iterations: usize,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_params: Vec<f64>,
}

impl RunRecord {
    pub fn final_evaluation(&self) -> Option<&Evaluation> {
        self.epochs.last().and_then(|e| e.evaluation.as_ref())
    }
}

/// Everything that changes while training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: ModelState,
    pub optimizer: OptimizerState,
    /// Live clipping rule, including the current `z`.
    pub policy: Option<ClipPolicy>,
    /// Current `σ_e²`.
    pub variance: f64,
    pub epoch: usize,
    sampling_rate: f64,
    total_iterations: usize,
}

impl TrainerState {
    pub fn new(config: &TrainerConfig, model: ModelState, n: usize) -> Result<Self> {
        config.validate()?;
        let sampling_rate = config.sampling_rate(n)?;
        let mut policy = config.privacy.as_ref().map(|p| p.clip.clone());
        if let (Some(policy), Some(p)) = (policy.as_mut(), &config.privacy) {
            if let (true, Some(s)) = (policy.kind().uses_threshold(), p.clip_schedule) {
                policy.set_threshold(s.initial())?;
            }
        }
        let optimizer = OptimizerState::new(config.optimizer, model.param_count());
        let mut state = Self {
            model,
            optimizer,
            policy,
            variance: 0.0,
            epoch: 0,
            sampling_rate,
            total_iterations: config.total_iterations(n),
        };
        state.refresh(config, 0)?;
        Ok(state)
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn total_iterations(&self) -> usize {
        self.total_iterations
    }

    /// Sets `σ_e²` and (for scheduled thresholds) `z_e` for epoch `e`.
    fn refresh(&mut self, config: &TrainerConfig, epoch: usize) -> Result<()> {
        self.epoch = epoch;
        let Some(p) = &config.privacy else {
            return Ok(());
        };
        self.variance = p.noise.variance_at(epoch);
        if let (Some(policy), Some(schedule)) = (self.policy.as_mut(), p.clip_schedule) {
            if matches!(policy.kind(), ClipKind::V2 | ClipKind::Global) {
                policy.set_threshold(schedule.threshold_at(epoch))?;
            }
        }
        Ok(())
    }

    fn recorded_threshold(&self) -> f64 {
        match &self.policy {
            None => 0.0,
            Some(p) if p.kind().uses_threshold() => p.threshold(),
            Some(p) => p.lower(),
        }
    }
}

/// Randomness consumed by a step.
pub struct StepStreams<'a> {
    pub noise: &'a mut RandomSource,
    pub threshold: &'a mut RandomSource,
}

/// One iteration on a given batch. Refreshes the schedules first when
/// `⌊q t⌋` has moved past the state's epoch.
pub fn train_step(
    state: &mut TrainerState,
    config: &TrainerConfig,
    data: &LabeledDataset,
    batch: &[usize],
    t: usize,
    streams: StepStreams<'_>,
) -> Result<IterationRecord> {
    let epoch = epoch_of_iteration(t, state.sampling_rate);
    if epoch != state.epoch {
        state.refresh(config, epoch)?;
    }
    let mut record = IterationRecord {
        t,
        epoch,
        sigma2: state.variance,
        threshold: state.recorded_threshold(),
        avg_grad_norm: 0.0,
        discarded: 0,
        loss: 0.0,
        batch_size: batch.len(),
    };
    if batch.is_empty() {
        return Ok(record);
    }
    let size = batch.len() as f64;
    let lr = config.learning_rate.at(t, state.total_iterations, epoch);

    let (gradient, norms) = match state.policy.as_ref() {
        None => {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| data.row(i)).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (g, loss) = state.model.batch_gradient(&config.loss, &xs, &ys)?;
            record.loss = loss;
            // norms are only recorded here, not used
            let norms = per_sample_norms(&state.model, config, data, batch)?;
            (g, norms)
        }
        Some(policy) => {
            let mut grads = Vec::with_capacity(batch.len());
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = state
                    .model
                    .loss_and_gradient(&config.loss, data.row(i), data.labels()[i])?;
                loss += l;
                grads.push(g);
            }
            record.loss = loss / size;
            let scaled = policy.scale_batch(&grads)?;
            record.discarded = scaled.discarded;
            let mut sum = scaled.sum()?;
            if state.variance > 0.0 {
                let noise = streams.noise.gaussian_noise(sum.len(), state.variance)?;
                sum.add_assign(&noise)?;
            }
            (sum.scaled(1.0 / size)?, scaled.norms)
        }
    };
    record.avg_grad_norm = norms.iter().sum::<f64>() / size;

    let next = state.optimizer.step(state.model.params(), gradient.as_slice(), lr);
    state.model.set_params(next).map_err(|e| Error::Diverged {
        iteration: t,
        reason: e.to_string(),
    })?;

    // one privatized threshold update at the end of each epoch
    let last_of_epoch = t + 1 >= state.total_iterations || epoch_of_iteration(t + 1, state.sampling_rate) != epoch;
    if let (Some(policy), Some(p)) = (state.policy.as_mut(), &config.privacy) {
        if policy.kind() == ClipKind::GlobalAdapt && last_of_epoch {
            policy.adapt_threshold(&norms, streams.threshold, p.threshold_noise_std)?;
        }
    }
    Ok(record)
}

fn per_sample_norms(
    model: &ModelState,
    config: &TrainerConfig,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|&i| {
            model
                .per_sample_gradient(&config.loss, data.row(i), data.labels()[i])
                .map(|g| g.l2_norm())
        })
        .collect()
}

/// Class-probability rows of a model on a dataset.
pub fn predict_proba(model: &ModelState, data: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len()).map(|i| model.forward(data.row(i))).collect()
}

pub fn evaluate_model(model: &ModelState, data: &LabeledDataset) -> Result<Evaluation> {
    let probs = predict_proba(model, data)?;
    evaluate(&probs, data.labels(), data.groups(), data.classes())
}

/// The architecture a config implies for a dataset.
pub fn architecture_for(config: &TrainerConfig, data: &LabeledDataset) -> Architecture {
    Architecture {
        input_dim: data.feature_dim(),
        hidden: config.hidden,
        classes: data.classes(),
    }
}

/// Full run: `T = round(E/q)` iterations, evaluation on `test` after each
/// epoch.
pub fn train(config: &TrainerConfig, data: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<RunRecord> {
    train_observed(config, data, test, &mut |_| Ok(()))
}

/// As [`train`], handing every iteration record to `observer` as soon as it
/// exists, so callers can persist a partial trajectory if training aborts.
pub fn train_observed(
    config: &TrainerConfig,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    observer: &mut dyn FnMut(&IterationRecord) -> Result<()>,
) -> Result<RunRecord> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let root = RandomSource::new(config.seed);
    let mut init_rng = root.child(STREAM_INIT);
    let mut sampling_rng = root.child(STREAM_SAMPLING);
    let mut noise_rng = root.child(STREAM_NOISE);
    let mut threshold_rng = root.child(STREAM_THRESHOLD);

    let model = ModelState::init(architecture_for(config, data), &mut init_rng)?;
    let mut state = TrainerState::new(config, model, data.len())?;
    let q = state.sampling_rate();
    let total = state.total_iterations();

    let mut iterations = Vec::with_capacity(total);
    let mut epochs = Vec::new();
    let (mut loss_sum, mut loss_weight) = (0.0, 0usize);
    for t in 0..total {
        let batch = poisson_sample(&mut sampling_rng, data.len(), q)?;
        let streams = StepStreams {
            noise: &mut noise_rng,
            threshold: &mut threshold_rng,
        };
        let record = train_step(&mut state, config, data, &batch, t, streams)?;
        observer(&record)?;
        loss_sum += record.loss * record.batch_size as f64;
        loss_weight += record.batch_size;
        iterations.push(record);

        let epoch_done = t + 1 == total || epoch_of_iteration(t + 1, q) != record.epoch;
        if epoch_done {
            let evaluation = test.map(|d| evaluate_model(&state.model, d)).transpose()?;
            epochs.push(EpochRecord {
                epoch: record.epoch,
                train_loss: if loss_weight > 0 {
                    loss_sum / loss_weight as f64
                } else {
                    0.0
                },
                evaluation,
            });
            loss_sum = 0.0;
            loss_weight = 0;
        }
    }
    Ok(RunRecord {
        sampling_rate: q,
        total_iterations: total,
        iterations,
        epochs,
        final_params: state.model.params().to_vec(),
    })
}

/// Mean loss gradient over the rows in `batch`.
pub fn mean_gradient(
    model: &ModelState,
    loss: &LossSpec,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<DenseVector> {
    let xs: Vec<&[f64]> = batch.iter().map(|&i| data.row(i)).collect();
    let ys: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
    Ok(model.batch_gradient(loss, &xs, &ys)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, BlobSpec};
    use crate::schedules::DecayKind;

    fn blobs(seed: u64) -> LabeledDataset {
        let spec = BlobSpec {
            dims: 3,
            counts: vec![60, 40],
            separation: 3.0,
        };
        make_synthetic(&spec, &mut RandomSource::new(seed)).unwrap()
    }

    fn private_config(clip: ClipPolicy, noise: DecaySchedule, schedule: Option<ClipSchedule>) -> TrainerConfig {
        TrainerConfig {
            epochs: 4,
            batch_size: 20,
            learning_rate: LearningRate::constant(0.1),
            optimizer: OptimizerConfig::sgd(),
            loss: LossSpec::cross_entropy(),
            hidden: None,
            privacy: Some(PrivateConfig {
                clip,
                noise,
                clip_schedule: schedule,
                threshold_noise_std: 0.0,
            }),
            seed: 5,
        }
    }

    #[test]
    fn full_rate_takes_everything() {
        let mut rng = RandomSource::new(0);
        assert_eq!(poisson_sample(&mut rng, 7, 1.0).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(poisson_sample(&mut rng, 7, 0.0).is_err());
        assert!(poisson_sample(&mut rng, 7, 1.5).is_err());
    }

    #[test]
    fn poisson_batch_size_statistics() {
        let mut rng = RandomSource::new(1);
        let (n, q) = (100_000usize, 0.1);
        let draws = 100;
        let mean = (0..draws)
            .map(|_| poisson_sample(&mut rng, n, q).unwrap().len() as f64)
            .sum::<f64>()
            / draws as f64;
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        assert!((mean - 1e4).abs() <= 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn one_epoch_full_rate_is_one_iteration() {
        let d = blobs(0);
        let mut c = private_config(
            ClipPolicy::dpsgd(1.0).unwrap(),
            DecaySchedule::constant(1.0).unwrap(),
            None,
        );
        c.epochs = 1;
        c.batch_size = d.len();
        let r = train(&c, &d, None).unwrap();
        assert_eq!(r.iterations.len(), 1);
        assert_eq!(r.epochs.len(), 1);
    }

    #[test]
    fn disabled_mechanism_is_plain_sgd() {
        let d = blobs(1);
        // every norm sits below c0, so dpsgd leaves gradients untouched
        let c = private_config(
            ClipPolicy::dpsgd(1e9).unwrap(),
            DecaySchedule::constant(1.0).unwrap(),
            None,
        );
        let mut rng = RandomSource::new(2);
        let model = ModelState::init(architecture_for(&c, &d), &mut rng).unwrap();
        let mut state = TrainerState::new(&c, model.clone(), d.len()).unwrap();
        state.variance = 0.0;
        let batch: Vec<usize> = (0..d.len()).step_by(3).collect();
        let mut a = RandomSource::new(0);
        let mut b = RandomSource::new(0);
        train_step(
            &mut state,
            &c,
            &d,
            &batch,
            0,
            StepStreams {
                noise: &mut a,
                threshold: &mut b,
            },
        )
        .unwrap();
        let g = mean_gradient(&model, &c.loss, &d, &batch).unwrap();
        for ((after, before), g) in state.model.params().iter().zip(model.params()).zip(g.as_slice()) {
            assert!((after - (before - 0.1 * g)).abs() < 1e-14);
        }
    }

    #[test]
    fn noise_on_the_mean_has_variance_over_batch_squared() {
        // zero model and a huge c0 on all-zero features: gradients are constant
        let d = LabeledDataset::new(
            crate::numerics::DenseMatrix::zeros(50, 2),
            vec![0; 25].into_iter().chain(vec![1; 25]).collect(),
            2,
        )
        .unwrap();
        let variance = 4.0;
        let c = private_config(
            ClipPolicy::dpsgd(1e9).unwrap(),
            DecaySchedule::constant(variance).unwrap(),
            None,
        );
        let batch: Vec<usize> = (0..10).collect();
        let arch = architecture_for(&c, &d);
        let mut noise = RandomSource::new(8);
        let mut thr = RandomSource::new(9);
        let mut samples = Vec::new();
        let model = ModelState::zeros(arch).unwrap();
        let clean = mean_gradient(&model, &c.loss, &d, &batch).unwrap();
        for _ in 0..20_000 {
            let mut state = TrainerState::new(&c, model.clone(), d.len()).unwrap();
            train_step(
                &mut state,
                &c,
                &d,
                &batch,
                0,
                StepStreams {
                    noise: &mut noise,
                    threshold: &mut thr,
                },
            )
            .unwrap();
            // bias coordinate of class 0; lr 0.1
            let i = 4;
            samples.push((-state.model.params()[i] / 0.1) - clean.as_slice()[i]);
        }
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        let v = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let expected = variance / 100.0;
        assert!((v / expected - 1.0).abs() < 0.05, "variance {v} vs {expected}");
    }

    #[test]
    fn same_seed_same_record() {
        let d = blobs(3);
        let c = private_config(
            ClipPolicy::v2(0.1, 1.0, 1.0).unwrap(),
            DecaySchedule::new(DecayKind::Step, 0.5, 0.5, 2).unwrap(),
            Some(ClipSchedule::new(1.0, 0.5, 2).unwrap()),
        );
        let a = train(&c, &d, Some(&d)).unwrap();
        let b = train(&c, &d, Some(&d)).unwrap();
        assert_eq!(a, b);
        let bits = |r: &RunRecord| r.final_params.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn recorded_schedules_follow_formulas() {
        let d = blobs(4);
        let noise = DecaySchedule::new(DecayKind::Step, 0.5, 0.5, 2).unwrap();
        let clip = ClipSchedule::new(1.0, 0.5, 2).unwrap();
        let c = private_config(ClipPolicy::v2(0.1, 1.0, 1.0).unwrap(), noise, Some(clip));
        let r = train(&c, &d, None).unwrap();
        assert_eq!(r.total_iterations, 20);
        assert_eq!(r.epochs.len(), 4);
        for it in &r.iterations {
            assert_eq!(it.sigma2, noise.variance_at(it.epoch));
            assert_eq!(it.threshold, clip.threshold_at(it.epoch));
        }
    }

    #[test]
    fn threshold_schedule_must_stay_above_c0() {
        let c = private_config(
            ClipPolicy::v2(0.4, 1.0, 1.0).unwrap(),
            DecaySchedule::constant(1.0).unwrap(),
            Some(ClipSchedule::new(1.0, 0.5, 2).unwrap()),
        );
        // z at epoch 3 is 0.5 > 0.4: fine; with c0 0.6 it is not
        assert!(c.validate().is_ok());
        let mut bad = c.clone();
        bad.privacy.as_mut().unwrap().clip = ClipPolicy::v2(0.6, 1.0, 1.0).unwrap();
        assert!(bad.validate().is_err());
        let mut missing = c;
        missing.privacy.as_mut().unwrap().clip_schedule = None;
        assert!(missing.validate().is_err());
    }

    #[test]
    fn empty_batch_only_advances_time() {
        let d = blobs(5);
        let c = private_config(
            ClipPolicy::dpsgd(1.0).unwrap(),
            DecaySchedule::constant(1.0).unwrap(),
            None,
        );
        let model = ModelState::init(architecture_for(&c, &d), &mut RandomSource::new(1)).unwrap();
        let mut state = TrainerState::new(&c, model.clone(), d.len()).unwrap();
        let mut a = RandomSource::new(0);
        let mut b = RandomSource::new(0);
        let r = train_step(
            &mut state,
            &c,
            &d,
            &[],
            3,
            StepStreams {
                noise: &mut a,
                threshold: &mut b,
            },
        )
        .unwrap();
        assert_eq!(r.batch_size, 0);
        assert_eq!(state.model, model);
    }

    #[test]
    fn divergence_is_reported() {
        let d = blobs(6);
        let mut c = private_config(
            ClipPolicy::dpsgd(1.0).unwrap(),
            DecaySchedule::constant(1e300).unwrap(),
            None,
        );
        c.learning_rate = LearningRate::constant(1e300);
        assert!(matches!(train(&c, &d, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn nonprivate_training_fits_separable_blobs() {
        let spec = BlobSpec {
            dims: 2,
            counts: vec![50, 50],
            separation: 100.0,
        };
        let d = make_synthetic(&spec, &mut RandomSource::new(7)).unwrap();
        let mut c = private_config(
            ClipPolicy::dpsgd(1.0).unwrap(),
            DecaySchedule::constant(1.0).unwrap(),
            None,
        );
        c.privacy = None;
        c.epochs = 20;
        let r = train(&c, &d, Some(&d)).unwrap();
        assert_eq!(r.final_evaluation().unwrap().accuracy, 100.0);
    }

    #[test]
    fn one_cycle_shape() {
        let lr = LearningRate {
            base: 0.01,
            schedule: LrSchedule::OneCycle,
        };
        assert_eq!(lr.at(0, 100, 0), 0.01);
        assert!((lr.at(30, 100, 0) - 0.1).abs() < 1e-15);
        assert!((lr.at(100, 100, 0) - 0.01).abs() < 1e-15);
        assert!(lr.at(15, 100, 0) < lr.at(29, 100, 0));
        assert!(lr.at(60, 100, 0) > lr.at(90, 100, 0));
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let mut opt = OptimizerState::new(OptimizerConfig::adamw(0.0), 3);
        let next = opt.step(&[1.0, 1.0, 1.0], &[0.5, -2.0, 0.0], 0.1);
        assert!((next[0] - 0.9).abs() < 1e-6);
        assert!((next[1] - 1.1).abs() < 1e-6);
        assert_eq!(next[2], 1.0);
        let mut decayed = OptimizerState::new(OptimizerConfig::adamw(0.5), 1);
        assert!((decayed.step(&[2.0], &[0.0], 0.1)[0] - 1.9).abs() < 1e-15);
    }
}
