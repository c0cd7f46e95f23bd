//! Alternating-phase training driver.
//!
//! Both alignment datasets are split into N mutually exclusive subsets and
//! consumed in strict alternation: ifa1, hpa1, ifa2, hpa2, … The first
//! instruction phase trains with plain MLE; every later phase adds the
//! consolidation penalty (or freeze mask) anchored at the opposite side's
//! latest snapshot, weighted by a softmax over that side's accumulated
//! parameter changes.

mod engine;

pub use engine::{
    cold_start_value_training, pairwise_accuracy, run_hbat, run_hbat_freeze, run_hpa_only,
    run_sft, run_two_stage, train_reward_model, PhaseResult, PhaseValidation, RunData,
    RunOutput, RmTrainOutput,
};

use crate::error::{Error, Result};
use crate::importance::Side;
use crate::losses::{DpoSettings, EwcSettings, KlSettings};
use crate::model::GenerationSettings;
use crate::tensor::TensorData;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Preference-side optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpaAlgorithm {
    Ppo,
    Dpo,
}

impl std::str::FromStr for HpaAlgorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(HpaAlgorithm::Ppo),
            "dpo" => Ok(HpaAlgorithm::Dpo),
            other => Err(Error::Config(format!("unknown preference algorithm `{other}`"))),
        }
    }
}

/// Objective a phase trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// First instruction subset: no preference anchor exists yet.
    MleOnly,
    /// Instruction subsets after the first: MLE plus the penalty anchored at
    /// the latest preference-side snapshot.
    EwcIfa,
    /// Every preference subset: the chosen algorithm plus the penalty
    /// anchored at the latest instruction-side snapshot.
    EwcHpa(HpaAlgorithm),
}

/// One entry of the alternating schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub side: Side,
    /// 1-based subset index within the side.
    pub subset: usize,
    pub loss_kind: LossKind,
    /// 1-based position in the overall sequence.
    pub index: usize,
}

impl Phase {
    pub fn label(&self) -> String {
        format!("{}{}", self.side.tag(), self.subset)
    }
}

/// The ordered phase list for N subset pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSchedule {
    phases: Vec<Phase>,
}

impl AlignmentSchedule {
    /// Strict alternation ifa1, hpa1, …, ifaN, hpaN with the first-subset
    /// MLE-only rule.
    pub fn build(n: usize, algorithm: HpaAlgorithm) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("subset count must be at least 1".into()));
        }
        let mut phases = Vec::with_capacity(2 * n);
        for subset in 1..=n {
            phases.push(Phase {
                side: Side::Ifa,
                subset,
                loss_kind: if subset == 1 { LossKind::MleOnly } else { LossKind::EwcIfa },
                index: phases.len() + 1,
            });
            phases.push(Phase {
                side: Side::Hpa,
                subset,
                loss_kind: LossKind::EwcHpa(algorithm),
                index: phases.len() + 1,
            });
        }
        Ok(Self { phases })
    }

    /// Instruction-only schedule (plain supervised training).
    pub fn ifa_only(algorithm: HpaAlgorithm) -> Self {
        let _ = algorithm;
        Self {
            phases: vec![Phase {
                side: Side::Ifa,
                subset: 1,
                loss_kind: LossKind::MleOnly,
                index: 1,
            }],
        }
    }

    /// Preference-only schedule starting from an already-tuned policy.
    pub fn hpa_only(algorithm: HpaAlgorithm) -> Self {
        Self {
            phases: vec![Phase {
                side: Side::Hpa,
                subset: 1,
                loss_kind: LossKind::EwcHpa(algorithm),
                index: 1,
            }],
        }
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }
}

/// Per-phase optimizer settings. Plain SGD with momentum; momentum state
/// resets at every phase boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub ifa_lr: f64,
    pub hpa_lr: f64,
    pub value_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub ifa_epochs: usize,
    pub hpa_epochs: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            ifa_lr: 0.1,
            hpa_lr: 0.02,
            value_lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            ifa_epochs: 4,
            hpa_epochs: 2,
        }
    }
}

/// Everything a run needs besides data and initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbatConfig {
    /// Number of subset pairs N.
    pub n_subsets: usize,
    pub ewc: EwcSettings,
    pub f_max: f64,
    pub algorithm: HpaAlgorithm,
    pub kl: KlSettings,
    pub dpo: DpoSettings,
    /// Subtract the learned value baseline from rewards before the policy
    /// update (REINFORCE objective only).
    pub baseline_subtract: bool,
    /// Value-model-only steps at the start of the first preference phase.
    pub cold_start_steps: usize,
    /// Fraction of units frozen by the freezing baseline.
    pub freeze_fraction: f64,
    pub opt: OptimizerSettings,
    pub generation: GenerationSettings,
    pub seed: u64,
}

impl Default for HbatConfig {
    fn default() -> Self {
        Self {
            n_subsets: 2,
            ewc: EwcSettings { lambda: 1.0 },
            f_max: 50.0,
            algorithm: HpaAlgorithm::Dpo,
            kl: KlSettings { alpha: 0.05 },
            dpo: DpoSettings { beta: 1.0 },
            baseline_subtract: true,
            cold_start_steps: 50,
            freeze_fraction: 0.2,
            opt: OptimizerSettings::default(),
            generation: GenerationSettings::default(),
            seed: 42,
        }
    }
}

impl HbatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subsets == 0 {
            return Err(Error::Config("subset count must be at least 1".into()));
        }
        if !(self.f_max > 0.0) {
            return Err(Error::Config("F_max must be positive".into()));
        }
        if self.opt.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.freeze_fraction >= 0.0 && self.freeze_fraction < 1.0) {
            return Err(Error::Config("freeze fraction must lie in [0, 1)".into()));
        }
        self.generation.validate()?;
        Ok(())
    }
}

/// Deterministic shuffle-then-chunk split into `n` mutually exclusive
/// subsets whose sizes differ by at most one and whose union is the input.
pub fn split_dataset<T: Clone>(
    records: &[T],
    n: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<Vec<T>>> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot split into zero subsets".into()));
    }
    if records.len() < n {
        return Err(Error::InvalidInput(format!(
            "cannot split {} records into {} subsets",
            records.len(),
            n
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    let base = records.len() / n;
    let extra = records.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        let chunk = order[cursor..cursor + size]
            .iter()
            .map(|&idx| records[idx].clone())
            .collect();
        out.push(chunk);
        cursor += size;
    }
    Ok(out)
}

/// SGD with momentum over named units. Frozen units receive no update and
/// keep no momentum state.
pub(crate) struct Sgd {
    lr: f32,
    momentum: f32,
    buf: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr: lr as f32, momentum: momentum as f32, buf: IndexMap::new() }
    }

    pub fn step(
        &mut self,
        params: &mut crate::model::ParameterSet<f32>,
        grads: &IndexMap<String, TensorData<f32>>,
        frozen: &std::collections::HashSet<String>,
    ) {
        for (name, grad) in grads {
            if frozen.contains(name) {
                continue;
            }
            let Some(tensor) = params.units_mut().get_mut(name) else {
                continue;
            };
            let buf = self
                .buf
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for ((v, b), g) in tensor.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
                *b = self.momentum * *b + *g;
                *v -= self.lr * *b;
            }
        }
    }
}

/// Standardize in place: mean-center, then scale to unit variance when the
/// spread is meaningful. Identity for fewer than two values.
pub(crate) fn standardize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 1e-8 {
            *v /= std;
        }
    }
}

#[cfg(test)]
mod tests;
