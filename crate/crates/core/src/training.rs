//! Training strategies TS1–TS5 as schedules over which loss terms are active
//! and when the filter targets and thresholds are computed.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy, ArchConfig, BackboneModel, Params};
use crate::dataset::{DatasetSplit, LabeledImage, Raster};
use crate::sparsity::{
    activations_from_norms, compute_p_method1, compute_p_method2, compute_thresholds, sparsity_loss,
    FilterProbabilityMatrix, PMethod, SparsityConfig, ThresholdTensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ts1,
    Ts2,
    Ts3,
    Ts4,
    Ts5,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Ts1, Strategy::Ts2, Strategy::Ts3, Strategy::Ts4, Strategy::Ts5];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ts1 => "ts1",
            Strategy::Ts2 => "ts2",
            Strategy::Ts3 => "ts3",
            Strategy::Ts4 => "ts4",
            Strategy::Ts5 => "ts5",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ts1" => Ok(Strategy::Ts1),
            "ts2" => Ok(Strategy::Ts2),
            "ts3" => Ok(Strategy::Ts3),
            "ts4" => Ok(Strategy::Ts4),
            "ts5" => Ok(Strategy::Ts5),
            other => Err(Error::InvalidArgument(format!("unknown strategy '{other}' (expected ts1..ts5)"))),
        }
    }
}

/// Inclusive 1-based epoch range with its active loss terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub use_cross_entropy: bool,
    pub use_sparsity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySchedule {
    pub strategy: Strategy,
    pub total_epochs: usize,
    pub phases: Vec<Phase>,
    pub p_method: PMethod,
    /// Targets and thresholds are computed after this epoch (0 = before training).
    pub p_compute_epoch: usize,
    pub thresholds_enabled: bool,
}

impl StrategySchedule {
    pub fn phase_at(&self, epoch: usize) -> &Phase {
        self.phases
            .iter()
            .find(|p| p.start <= epoch && epoch <= p.end)
            .expect("validated schedule covers every epoch")
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 1;
        for p in &self.phases {
            if p.start != next || p.end < p.start {
                return Err(Error::InvalidArgument(format!(
                    "phase {} [{}, {}] does not continue from epoch {next}",
                    p.name, p.start, p.end
                )));
            }
            if p.use_sparsity && p.start <= self.p_compute_epoch {
                return Err(Error::InvalidArgument(format!(
                    "phase {} uses the sparsity loss before P is computed",
                    p.name
                )));
            }
            next = p.end + 1;
        }
        if next != self.total_epochs + 1 {
            return Err(Error::InvalidArgument(format!(
                "phases cover epochs 1..{} but training runs {} epochs",
                next - 1,
                self.total_epochs
            )));
        }
        Ok(())
    }
}

pub fn build_schedule(strategy: Strategy, config: &TrainConfig) -> Result<StrategySchedule> {
    let e = config.epochs;
    let phase = |name: &str, start, end, ce, sp| Phase {
        name: name.to_string(),
        start,
        end,
        use_cross_entropy: ce,
        use_sparsity: sp,
    };
    let schedule = match strategy {
        Strategy::Ts1 => {
            if e < 2 {
                return Err(Error::InvalidArgument("ts1 needs at least 2 epochs".into()));
            }
            let half = e / 2;
            StrategySchedule {
                strategy,
                total_epochs: e,
                phases: vec![phase("warmup", 1, half, true, false), phase("sparse", half + 1, e, true, true)],
                p_method: PMethod::ActivationFrequency,
                p_compute_epoch: half,
                thresholds_enabled: true,
            }
        }
        Strategy::Ts2 | Strategy::Ts3 | Strategy::Ts4 | Strategy::Ts5 => StrategySchedule {
            strategy,
            total_epochs: e,
            phases: vec![phase("sparse", 1, e, strategy != Strategy::Ts4, true)],
            p_method: if strategy == Strategy::Ts2 {
                PMethod::ActivationFrequency
            } else {
                PMethod::Random
            },
            p_compute_epoch: 0,
            thresholds_enabled: strategy != Strategy::Ts5,
        },
    };
    schedule.validate()?;
    Ok(schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub seed: u64,
    /// Last-layer filter count `F`.
    pub filters: usize,
    pub hidden_channels: Vec<usize>,
    pub sparsity: SparsityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
            l2_reg: 5e-3,
            decay_factor: 0.5,
            patience: 10,
            seed: 0,
            filters: 16,
            hidden_channels: vec![16, 32],
            sparsity: SparsityConfig {
                k: 2,
                ..SparsityConfig::default()
            },
        }
    }

    /// The VGG16-scale hyperparameters; the architecture fields keep the
    /// desk backbone.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-6,
            l2_reg: 5e-3,
            decay_factor: 0.5,
            patience: 10,
            sparsity: SparsityConfig::default(),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("epochs, batch_size and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.l2_reg >= 0.0 && self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid optimiser settings lr={} l2={} decay={}",
                self.learning_rate, self.l2_reg, self.decay_factor
            )));
        }
        if self.patience >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "patience {} must be below epochs {}",
                self.patience, self.epochs
            )));
        }
        self.sparsity.validate(self.filters)
    }

    pub fn arch(&self, image_size: usize, classes: usize) -> ArchConfig {
        ArchConfig {
            hidden_channels: self.hidden_channels.clone(),
            ..ArchConfig::reference(image_size, self.filters, classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub ce_loss: Option<f64>,
    pub sparsity_loss: Option<f64>,
    pub total: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Smallest sigmoid activation seen in training batches this epoch.
    pub min_activation: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, strategy: Strategy) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<EpochRecord> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::parse(path.display().to_string(), i + 1, e.to_string()))
            })
            .collect::<Result<_>>()?;
        let seed = records.first().map_or(0, |r| r.seed);
        Ok(TrainLog { strategy, seed, records })
    }
}

/// Adam with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    fn new(params: &Params, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn step(&mut self, params: &mut Params, grad: &Params) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grad.blocks();
        let blocks = params.blocks_mut().into_iter().zip(self.m.blocks_mut()).zip(self.v.blocks_mut());
        for (((p, m), v), (_, _, g)) in blocks.zip(grads) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Which terms of the objective are active, with their weights.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub alpha: f64,
    pub beta: f64,
    pub use_cross_entropy: bool,
    pub p: Option<&'a FilterProbabilityMatrix>,
    pub thresholds: Option<&'a ThresholdTensor>,
    pub class_weights: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub cross_entropy: Option<f64>,
    pub sparsity: Option<f64>,
    pub total: f64,
    pub min_activation: Option<f64>,
}

impl Objective<'_> {
    /// `α·CE + β·sparsity` over the active terms, with the gradient w.r.t.
    /// every backbone parameter (regularisation excluded).
    pub fn value_and_grad(&self, model: &BackboneModel, images: &[&Raster], labels: &[usize]) -> Result<(ObjectiveValue, Params)> {
        let (fm, logits, cache) = model.forward_cached(images)?;
        let mut value = ObjectiveValue {
            cross_entropy: None,
            sparsity: None,
            total: 0.0,
            min_activation: None,
        };
        let mut d_logits = None;
        if self.use_cross_entropy {
            let (ce, mut g) = cross_entropy(&logits, labels, self.class_weights)?;
            g.mapv_inplace(|v| v * self.alpha);
            value.cross_entropy = Some(ce);
            value.total += self.alpha * ce;
            d_logits = Some(g);
        }
        let mut d_maps = None;
        if let Some(p) = self.p {
            let (sp, mut g) = sparsity_loss(&fm, labels, p, self.thresholds)?;
            g.mapv_inplace(|v| v * self.beta);
            let act = activations_from_norms(&crate::backbone::l2_norm(&fm), self.thresholds);
            value.min_activation = act.iter().cloned().reduce(f64::min);
            value.sparsity = Some(sp);
            value.total += self.beta * sp;
            d_maps = Some(g);
        }
        let grad = model.backward(&cache, d_maps.as_ref(), d_logits.as_ref());
        Ok((value, grad))
    }

    pub fn value(&self, model: &BackboneModel, images: &[&Raster], labels: &[usize]) -> Result<f64> {
        let (fm, logits) = model.forward(images)?;
        let mut total = 0.0;
        if self.use_cross_entropy {
            total += self.alpha * cross_entropy(&logits, labels, self.class_weights)?.0;
        }
        if let Some(p) = self.p {
            total += self.beta * sparsity_loss(&fm, labels, p, self.thresholds)?.0;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BackboneModel,
    pub p: FilterProbabilityMatrix,
    pub thresholds: Option<ThresholdTensor>,
    pub log: TrainLog,
}

fn compute_targets(
    schedule: &StrategySchedule,
    model: &BackboneModel,
    train: &[LabeledImage],
    config: &TrainConfig,
) -> Result<(FilterProbabilityMatrix, Option<ThresholdTensor>)> {
    let s = &config.sparsity;
    let p = match schedule.p_method {
        PMethod::ActivationFrequency => compute_p_method1(model, train, s.k)?.0,
        PMethod::Random => compute_p_method2(model.config.classes, model.config.filters, s.k, s.seed)?,
    };
    let t = if schedule.thresholds_enabled {
        Some(compute_thresholds(model, train, s.h1, s.h2)?)
    } else {
        None
    };
    Ok((p, t))
}

/// Trains a fresh backbone under `schedule`. Deterministic given the seeds in
/// `config`; on a non-finite loss returns [`Error::Diverged`] carrying the
/// parameters from the last completed epoch.
pub fn run_strategy(schedule: &StrategySchedule, dataset: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if schedule.total_epochs != config.epochs {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} epochs, config {}",
            schedule.total_epochs, config.epochs
        )));
    }
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(Error::Dataset("training needs non-empty train and validation splits".into()));
    }
    let image_size = dataset.train[0].pixels.height;
    let mut model = BackboneModel::new(config.arch(image_size, dataset.num_classes()), config.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut adam = Adam::new(&model.params, config.learning_rate);

    let mut targets = None;
    if schedule.p_compute_epoch == 0 {
        targets = Some(compute_targets(schedule, &model, &dataset.train, config)?);
    }

    let val_images: Vec<&Raster> = dataset.validation.iter().map(|im| &im.pixels).collect();
    let val_labels: Vec<usize> = dataset.validation.iter().map(|im| im.label).collect();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut wait = 0;
    let mut last_good = model.clone();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let phase = schedule.phase_at(epoch);
        let (p, t) = match (&targets, phase.use_sparsity) {
            (Some((p, t)), true) => (Some(p), t.as_ref()),
            _ => (None, None),
        };
        let objective = Objective {
            alpha: config.sparsity.alpha,
            beta: config.sparsity.beta,
            use_cross_entropy: phase.use_cross_entropy,
            p,
            thresholds: t,
            class_weights: &dataset.class_weights,
        };
        order.shuffle(&mut shuffle_rng);
        let (mut ce_sum, mut sp_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut min_act: Option<f64> = None;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&Raster> = batch.iter().map(|&i| &dataset.train[i].pixels).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.train[i].label).collect();
            let (value, mut grad) = objective.value_and_grad(&model, &images, &labels)?;
            if !value.total.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss {}", value.total),
                    last_good: Box::new(last_good),
                });
            }
            if config.l2_reg > 0.0 {
                let mut reg = model.params.clone();
                reg.scale(2.0 * config.l2_reg);
                grad.add_assign(&reg);
            }
            adam.step(&mut model.params, &grad);
            let w = batch.len() as f64;
            ce_sum += value.cross_entropy.unwrap_or(0.0) * w;
            sp_sum += value.sparsity.unwrap_or(0.0) * w;
            total_sum += value.total * w;
            if let Some(m) = value.min_activation {
                min_act = Some(min_act.map_or(m, |x: f64| x.min(m)));
            }
        }
        let n = dataset.train.len() as f64;
        let val_loss = objective.value(&model, &val_images, &val_labels)?;
        if !val_loss.is_finite() || !model.params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("non-finite validation loss {val_loss}"),
                last_good: Box::new(last_good),
            });
        }
        if val_loss < best_val {
            best_val = val_loss;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                adam.lr *= config.decay_factor;
                wait = 0;
            }
        }
        let mut events = Vec::new();
        if epoch == schedule.p_compute_epoch {
            targets = Some(compute_targets(schedule, &model, &dataset.train, config)?);
            events.push("targets_computed".to_string());
            // the monitored objective changes meaning at the boundary
            best_val = f64::INFINITY;
            wait = 0;
        }
        records.push(EpochRecord {
            epoch,
            phase: phase.name.clone(),
            ce_loss: phase.use_cross_entropy.then_some(ce_sum / n),
            sparsity_loss: phase.use_sparsity.then_some(sp_sum / n),
            total: total_sum / n,
            val_loss,
            lr: adam.lr,
            min_activation: min_act,
            seed: config.seed,
            events,
        });
        log::debug!("{} epoch {epoch}: total {:.5} val {val_loss:.5}", schedule.strategy, total_sum / n);
        last_good = model.clone();
    }

    let (p, thresholds) = targets.expect("every schedule computes targets");
    Ok(TrainOutcome {
        model,
        p,
        thresholds,
        log: TrainLog {
            strategy: schedule.strategy,
            seed: config.seed,
            records,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ts1_splits_training_in_half() {
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::desk()
        };
        let s = build_schedule(Strategy::Ts1, &cfg).unwrap();
        for e in 1..=50 {
            assert!(!s.phase_at(e).use_sparsity);
            assert!(s.phase_at(e).use_cross_entropy);
        }
        for e in 51..=100 {
            assert!(s.phase_at(e).use_sparsity);
        }
        assert_eq!(s.p_compute_epoch, 50);
        assert_eq!(s.p_method, PMethod::ActivationFrequency);
        assert!(s.thresholds_enabled);
    }

    #[test]
    fn other_strategies() {
        let cfg = TrainConfig::desk();
        let ts2 = build_schedule(Strategy::Ts2, &cfg).unwrap();
        assert_eq!((ts2.p_method, ts2.p_compute_epoch), (PMethod::ActivationFrequency, 0));
        let ts3 = build_schedule(Strategy::Ts3, &cfg).unwrap();
        assert_eq!(ts3.p_method, PMethod::Random);
        assert!(ts3.phases.iter().all(|p| p.use_cross_entropy && p.use_sparsity));
        let ts4 = build_schedule(Strategy::Ts4, &cfg).unwrap();
        assert!(ts4.phases.iter().all(|p| !p.use_cross_entropy && p.use_sparsity));
        let ts5 = build_schedule(Strategy::Ts5, &cfg).unwrap();
        assert!(!ts5.thresholds_enabled);
        assert_eq!(ts5.p_method, PMethod::Random);
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        assert!("ts6".parse::<Strategy>().is_err());
        assert_eq!("TS3".parse::<Strategy>().unwrap(), Strategy::Ts3);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let cfg = TrainConfig::desk();
        let mut s = build_schedule(Strategy::Ts3, &cfg).unwrap();
        s.p_compute_epoch = 5;
        assert!(s.validate().is_err());
        let mut s = build_schedule(Strategy::Ts1, &cfg).unwrap();
        s.phases[1].start += 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk();
        cfg.patience = cfg.epochs;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.sparsity.k = cfg.filters + 1;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn log_jsonl_round_trip() {
        let log = TrainLog {
            strategy: Strategy::Ts3,
            seed: 4,
            records: vec![EpochRecord {
                epoch: 1,
                phase: "sparse".into(),
                ce_loss: Some(1.0986),
                sparsity_loss: None,
                total: 1.0 / 3.0,
                val_loss: 0.25,
                lr: 1e-3,
                min_activation: Some(0.5),
                seed: 4,
                events: vec!["targets_computed".into()],
            }],
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        assert_eq!(TrainLog::read_jsonl(&path, Strategy::Ts3).unwrap(), log);
    }
}
