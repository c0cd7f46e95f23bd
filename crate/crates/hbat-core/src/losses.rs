//! Training objectives.
//!
//! Instruction-following training minimizes the MLE loss on response tokens.
//! Preference training minimizes either a sequence-level REINFORCE objective
//! with a KL term against the instruction-tuned policy, or the direct
//! preference objective on chosen/rejected pairs. Either preference loss and
//! the MLE loss can be augmented with a quadratic tether
//! `Σ_i (λ/2) F_i ‖θ_i − θ*_i‖²` toward the opposite side's latest anchor.

use crate::error::{Error, Result};
use crate::importance::Snapshot;
use crate::model::{sequence_logprob, Binding};
use crate::tensor::{Scalar, Tape, TensorData, ValueId};
use indexmap::IndexMap;

/// KL regularizer strength for the REINFORCE objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KlSettings {
    pub alpha: f64,
}

impl KlSettings {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidInput("KL coefficient must be nonnegative".into()));
        }
        Ok(Self { alpha })
    }
}

/// Scaling factor for the direct preference objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DpoSettings {
    pub beta: f64,
}

impl DpoSettings {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidInput("DPO beta must be positive".into()));
        }
        Ok(Self { beta })
    }
}

/// Balance factor for the consolidation penalty.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EwcSettings {
    pub lambda: f64,
}

impl EwcSettings {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidInput("lambda must be nonnegative".into()));
        }
        Ok(Self { lambda })
    }
}

impl Default for EwcSettings {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Negative log-likelihood of the response given the prompt, summed over
/// response tokens only.
pub fn mle_loss<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    prompt: &[usize],
    response: &[usize],
) -> Result<ValueId> {
    let lp = sequence_logprob(tape, policy, prompt, response)?;
    tape.neg(lp)
}

/// Pairwise logistic ranking loss for reward models:
/// `-log σ(r(y_w) − r(y_l))`, strictly decreasing in the reward margin.
pub fn ranking_loss<S: Scalar>(
    tape: &mut Tape<S>,
    reward_model: &Binding,
    prompt: &[usize],
    chosen: &[usize],
    rejected: &[usize],
) -> Result<ValueId> {
    if chosen == rejected {
        return Err(Error::InvalidInput(
            "ranking loss needs two distinct responses".into(),
        ));
    }
    let rw = crate::model::reward_forward(tape, reward_model, prompt, chosen)?;
    let rl = crate::model::reward_forward(tape, reward_model, prompt, rejected)?;
    let margin = tape.sub(rw, rl)?;
    neg_log_sigmoid(tape, margin)
}

/// `-log σ(x)` evaluated as `softplus(-x)` for stability.
fn neg_log_sigmoid<S: Scalar>(tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
    let nx = tape.neg(x)?;
    tape.softplus(nx)
}

/// REINFORCE-with-KL objective assembled from already-computed sequence
/// log-probabilities. Per sample: `−log p_θ(ŷ|x)·r̃(ŷ) − α·(log p_θ(ŷ|x) −
/// log p_old(ŷ|x))`, averaged over samples. Rewards are constants.
pub fn ppo_from_logprobs<S: Scalar>(
    tape: &mut Tape<S>,
    logprobs: &[ValueId],
    old_logprobs: &[ValueId],
    rewards: &[f64],
    kl: &KlSettings,
) -> Result<ValueId> {
    if logprobs.is_empty() {
        return Err(Error::InvalidInput("policy loss needs at least one sample".into()));
    }
    if logprobs.len() != old_logprobs.len() || logprobs.len() != rewards.len() {
        return Err(Error::InvalidInput(format!(
            "sample count mismatch: {} logprobs, {} reference logprobs, {} rewards",
            logprobs.len(),
            old_logprobs.len(),
            rewards.len()
        )));
    }
    let mut total: Option<ValueId> = None;
    for ((&lp, &lp_old), &r) in logprobs.iter().zip(old_logprobs).zip(rewards) {
        let reinforce = tape.scalar_mul(lp, S::from_f64(-r))?;
        let ratio = tape.sub(lp, lp_old)?;
        let kl_term = tape.scalar_mul(ratio, S::from_f64(-kl.alpha))?;
        let term = tape.add(reinforce, kl_term)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("nonempty samples");
    tape.scalar_mul(total, S::from_f64(1.0 / logprobs.len() as f64))
}

/// REINFORCE-with-KL loss over frozen samples from the current policy.
/// `rewards[k]` belongs to `samples[k]`; the reference policy is the
/// instruction-tuned anchor and receives no gradient.
pub fn ppo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    reference: &Binding,
    prompt: &[usize],
    samples: &[Vec<usize>],
    rewards: &[f64],
    kl: &KlSettings,
) -> Result<ValueId> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("policy loss needs at least one sample".into()));
    }
    let mut lps = Vec::with_capacity(samples.len());
    let mut old_lps = Vec::with_capacity(samples.len());
    for y in samples {
        lps.push(sequence_logprob(tape, policy, prompt, y)?);
        old_lps.push(sequence_logprob(tape, reference, prompt, y)?);
    }
    ppo_from_logprobs(tape, &lps, &old_lps, rewards, kl)
}

/// Direct preference objective assembled from sequence log-probabilities:
/// `−log σ(β·[(lp_w − lp_w_ref) − (lp_l − lp_l_ref)])`.
pub fn dpo_from_logprobs<S: Scalar>(
    tape: &mut Tape<S>,
    lp_chosen: ValueId,
    lp_chosen_ref: ValueId,
    lp_rejected: ValueId,
    lp_rejected_ref: ValueId,
    settings: &DpoSettings,
) -> Result<ValueId> {
    let dw = tape.sub(lp_chosen, lp_chosen_ref)?;
    let dl = tape.sub(lp_rejected, lp_rejected_ref)?;
    let diff = tape.sub(dw, dl)?;
    let scaled = tape.scalar_mul(diff, S::from_f64(settings.beta))?;
    neg_log_sigmoid(tape, scaled)
}

/// Direct preference loss on one chosen/rejected pair against a frozen
/// reference policy.
pub fn dpo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    reference: &Binding,
    prompt: &[usize],
    chosen: &[usize],
    rejected: &[usize],
    settings: &DpoSettings,
) -> Result<ValueId> {
    if chosen == rejected {
        return Err(Error::InvalidInput(
            "preference loss needs two distinct responses".into(),
        ));
    }
    let lp_w = sequence_logprob(tape, policy, prompt, chosen)?;
    let lp_w_ref = sequence_logprob(tape, reference, prompt, chosen)?;
    let lp_l = sequence_logprob(tape, policy, prompt, rejected)?;
    let lp_l_ref = sequence_logprob(tape, reference, prompt, rejected)?;
    dpo_from_logprobs(tape, lp_w, lp_w_ref, lp_l, lp_l_ref, settings)
}

/// Quadratic consolidation penalty with one importance weight per unit:
/// `Σ_i (λ/2) F_i Σ_j (θ_ij − θ*_ij)²`. Zero iff the parameters sit at the
/// anchor (for positive weights).
pub fn ewc_penalty<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    anchor: &Snapshot<S>,
    f: &IndexMap<String, f64>,
    lambda: f64,
) -> Result<ValueId> {
    penalty_impl(tape, policy, anchor, lambda, |name| {
        f.get(name).copied().ok_or_else(|| Error::MissingUnit {
            unit: name.to_string(),
            context: "importance weights",
        })
        .map(Weight::PerUnit)
    })
}

/// Consolidation penalty with per-neuron weights (the original Fisher-diagonal
/// variant): `Σ_i (λ/2) Σ_j F_ij (θ_ij − θ*_ij)²`.
pub fn ewc_penalty_per_neuron<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    anchor: &Snapshot<S>,
    fisher: &IndexMap<String, TensorData<f64>>,
    lambda: f64,
) -> Result<ValueId> {
    penalty_impl(tape, policy, anchor, lambda, |name| {
        fisher
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingUnit {
                unit: name.to_string(),
                context: "fisher weights",
            })
            .map(Weight::PerNeuron)
    })
}

enum Weight {
    PerUnit(f64),
    PerNeuron(TensorData<f64>),
}

fn penalty_impl<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    anchor: &Snapshot<S>,
    lambda: f64,
    weight_of: impl Fn(&str) -> Result<Weight>,
) -> Result<ValueId> {
    let mut total: Option<ValueId> = None;
    for (name, &live_id) in policy.unit_ids() {
        let anchor_tensor = anchor.unit(name).ok_or_else(|| Error::MissingUnit {
            unit: name.clone(),
            context: "anchor snapshot",
        })?;
        if anchor_tensor.shape() != tape.value(live_id).shape() {
            return Err(Error::Shape {
                op: "ewc-penalty",
                detail: format!(
                    "unit `{name}`: {:?} vs anchor {:?}",
                    tape.value(live_id).shape(),
                    anchor_tensor.shape()
                ),
            });
        }
        let weight = weight_of(name)?;
        let anchor_id = tape.constant(anchor_tensor.clone());
        let diff = tape.sub(live_id, anchor_id)?;
        let sq = tape.mul(diff, diff)?;
        let term = match weight {
            Weight::PerUnit(f) => {
                let s = tape.sum_all(sq)?;
                tape.scalar_mul(s, S::from_f64(0.5 * lambda * f))?
            }
            Weight::PerNeuron(f) => {
                if f.shape() != anchor_tensor.shape() {
                    return Err(Error::Shape {
                        op: "ewc-penalty",
                        detail: format!("fisher for `{name}` has shape {:?}", f.shape()),
                    });
                }
                let w = tape.constant(TensorData::<S>::from_f64_tensor(&f));
                let weighted = tape.mul(sq, w)?;
                let s = tape.sum_all(weighted)?;
                tape.scalar_mul(s, S::from_f64(0.5 * lambda))?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidInput("penalty over an empty parameter set".into()))
}

/// Preference-side objective with consolidation: a previously built base loss
/// (REINFORCE or DPO) plus the penalty anchored at the latest
/// instruction-tuned snapshot.
pub fn hpa_loss<S: Scalar>(
    tape: &mut Tape<S>,
    base: ValueId,
    policy: &Binding,
    anchor: &Snapshot<S>,
    f: &IndexMap<String, f64>,
    settings: &EwcSettings,
) -> Result<ValueId> {
    let penalty = ewc_penalty(tape, policy, anchor, f, settings.lambda)?;
    tape.add(base, penalty)
}

/// Penalty configuration for the instruction-following objective.
pub enum IfaPenalty<'a, S> {
    /// The very first instruction subset trains with plain MLE; no
    /// preference-side anchor exists yet.
    FirstSubset,
    Ewc {
        anchor: &'a Snapshot<S>,
        f: &'a IndexMap<String, f64>,
        settings: EwcSettings,
    },
}

/// Instruction-following objective: MLE plus, after the first subset, the
/// consolidation penalty anchored at the latest preference-side snapshot.
pub fn ifa_loss<S: Scalar>(
    tape: &mut Tape<S>,
    policy: &Binding,
    prompt: &[usize],
    response: &[usize],
    penalty: IfaPenalty<'_, S>,
) -> Result<ValueId> {
    let base = mle_loss(tape, policy, prompt, response)?;
    match penalty {
        IfaPenalty::FirstSubset => Ok(base),
        IfaPenalty::Ewc { anchor, f, settings } => {
            let p = ewc_penalty(tape, policy, anchor, f, settings.lambda)?;
            tape.add(base, p)
        }
    }
}
