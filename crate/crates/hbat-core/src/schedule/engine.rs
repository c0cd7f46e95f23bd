//! The sequential phase driver shared by every pipeline variant.
//!
//! All variants run the same engine with a different penalty mode, so the
//! alternating run with λ = 0 and N = 1 is bit-identical to the two-stage
//! baseline under shared seeds. Every random draw comes from a stream named
//! after the phase, so a two-stage run and the equivalent chain of
//! single-stage runs consume identical randomness.

use super::{
    split_dataset, standardize, AlignmentSchedule, HbatConfig, HpaAlgorithm, LossKind, Phase,
    Sgd,
};
use crate::data::{PreferenceRecord, PromptResponseRecord};
use crate::error::{Error, Result};
use crate::importance::{
    compute_f, fisher_diagonal_lm, freeze_mask, save_ledger, unit_change, ImportanceLedger,
    Side, Snapshot, SnapshotLabel,
};
use crate::losses::{
    dpo_loss, ewc_penalty, ewc_penalty_per_neuron, mle_loss, ppo_from_logprobs, ranking_loss,
};
use crate::metrics::{mean_reward, perplexity, preference_margin, MetricsRow};
use crate::model::{
    attach_score_head, checkpoint, generate, reward_value, sequence_logprob, value_forward,
    value_value, Binding, GenerationSettings, ParameterSet,
};
use crate::rng;
use crate::tensor::{Tape, TensorData, ValueId};
use indexmap::IndexMap;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// How a phase constrains drift away from the opposite side's anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PenaltyMode {
    /// Quadratic penalty with per-unit weights from accumulated changes.
    Ewc,
    /// Quadratic penalty with the per-neuron Fisher diagonal.
    EwcOriginalFisher,
    /// Hard-freeze the top-fraction units instead of penalizing.
    Freeze,
    /// No constraint (two-stage baseline, ablations).
    Off,
}

/// Training and validation datasets for a run.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train_ifa: &'a [PromptResponseRecord],
    pub train_pref: &'a [PreferenceRecord],
    pub val_ifa: &'a [PromptResponseRecord],
    pub val_pref: &'a [PreferenceRecord],
}

/// Phase-end validation scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseValidation {
    pub mle_loss: f64,
    pub perplexity: f64,
    pub margin: f64,
    /// Mean generated reward; present when a reward model is available.
    pub reward: Option<f64>,
}

impl PhaseValidation {
    /// Checkpoint-selection score: the reward score when a reward model
    /// exists, otherwise the policy preference margin.
    pub fn selection_score(&self) -> f64 {
        self.reward.unwrap_or(self.margin)
    }
}

/// Everything recorded about one completed phase.
#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub phase: Phase,
    pub checkpoint: PathBuf,
    pub c_map: IndexMap<String, f64>,
    /// Label of the anchor snapshot this phase trained against, if any.
    pub anchor: Option<SnapshotLabel>,
    pub validation: PhaseValidation,
    pub wall_secs: f64,
}

/// Final model plus the per-phase record.
#[derive(Debug)]
pub struct RunOutput {
    pub final_params: ParameterSet<f32>,
    pub phases: Vec<PhaseResult>,
    /// Index into `phases` of the retained checkpoint.
    pub best_phase: usize,
    pub rows: Vec<MetricsRow>,
}

/// Removes the lock file when the run ends, including on error returns.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(
                format!("output directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Alternating run with the softmax-weighted consolidation penalty.
/// `ewc_original_fisher` switches the penalty weights to the per-neuron
/// Fisher diagonal; a zero λ disables the penalty arithmetic entirely.
pub fn run_hbat(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    reward_model: Option<&ParameterSet<f32>>,
    out_dir: &Path,
    ewc_original_fisher: bool,
) -> Result<RunOutput> {
    let schedule = AlignmentSchedule::build(config.n_subsets, config.algorithm)?;
    let mode = if ewc_original_fisher { PenaltyMode::EwcOriginalFisher } else { PenaltyMode::Ewc };
    run_engine(config, init, data, reward_model, out_dir, schedule, mode, config.n_subsets)
}

/// Alternating run that freezes the top-fraction units instead of
/// penalizing them. A fraction of zero degenerates to alternating training
/// without any constraint.
pub fn run_hbat_freeze(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    reward_model: Option<&ParameterSet<f32>>,
    out_dir: &Path,
) -> Result<RunOutput> {
    let schedule = AlignmentSchedule::build(config.n_subsets, config.algorithm)?;
    let mode = if config.freeze_fraction > 0.0 { PenaltyMode::Freeze } else { PenaltyMode::Off };
    run_engine(config, init, data, reward_model, out_dir, schedule, mode, config.n_subsets)
}

/// Standard two-stage baseline: one full instruction pass, then one full
/// preference pass with no consolidation. With no preference data the run
/// reduces to plain supervised training.
pub fn run_two_stage(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    reward_model: Option<&ParameterSet<f32>>,
    out_dir: &Path,
) -> Result<RunOutput> {
    let schedule = if data.train_pref.is_empty() {
        AlignmentSchedule::ifa_only(config.algorithm)
    } else {
        AlignmentSchedule::build(1, config.algorithm)?
    };
    run_engine(config, init, data, reward_model, out_dir, schedule, PenaltyMode::Off, 1)
}

/// Instruction-only training (the supervised baseline).
pub fn run_sft(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    out_dir: &Path,
) -> Result<RunOutput> {
    let schedule = AlignmentSchedule::ifa_only(config.algorithm);
    run_engine(config, init, data, None, out_dir, schedule, PenaltyMode::Off, 1)
}

/// Preference-only training from an already instruction-tuned policy; the
/// initial parameters serve as both reference policy and anchor.
pub fn run_hpa_only(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    reward_model: Option<&ParameterSet<f32>>,
    out_dir: &Path,
) -> Result<RunOutput> {
    let schedule = AlignmentSchedule::hpa_only(config.algorithm);
    run_engine(config, init, data, reward_model, out_dir, schedule, PenaltyMode::Off, 1)
}

#[allow(clippy::too_many_arguments)]
fn run_engine(
    config: &HbatConfig,
    init: &ParameterSet<f32>,
    data: RunData<'_>,
    reward_model: Option<&ParameterSet<f32>>,
    out_dir: &Path,
    schedule: AlignmentSchedule,
    mode: PenaltyMode,
    n_splits: usize,
) -> Result<RunOutput> {
    config.validate()?;
    let needs_ppo = schedule
        .phases()
        .iter()
        .any(|p| matches!(p.loss_kind, LossKind::EwcHpa(HpaAlgorithm::Ppo)));
    if needs_ppo && reward_model.is_none() {
        return Err(Error::Config(
            "preference training with the sampling objective needs a reward model".into(),
        ));
    }
    if data.val_ifa.is_empty() || data.val_pref.is_empty() {
        return Err(Error::InvalidInput("validation sets must be nonempty".into()));
    }

    let _lock = RunLock::acquire(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let has_ifa = schedule.phases().iter().any(|p| p.side == Side::Ifa);
    let has_hpa = schedule.phases().iter().any(|p| p.side == Side::Hpa);
    let ifa_subsets = if has_ifa {
        split_dataset(data.train_ifa, n_splits, &mut rng::stream(config.seed, "split.ifa"))?
    } else {
        Vec::new()
    };
    let pref_subsets = if has_hpa {
        split_dataset(data.train_pref, n_splits, &mut rng::stream(config.seed, "split.hpa"))?
    } else {
        Vec::new()
    };

    let mut params = init.clone();
    let mut ledger = ImportanceLedger::new(init.unit_names(), config.f_max)?;
    let mut prev_snapshot = Snapshot::capture(&params, SnapshotLabel::initial());
    // a preference-only run anchors at its initial (instruction-tuned) params
    let mut last_ifa: Option<Snapshot<f32>> = if has_ifa {
        None
    } else {
        Some(prev_snapshot.clone())
    };
    let mut last_hpa: Option<Snapshot<f32>> = None;
    // per-neuron Fisher weights per side (original-EWC comparison path)
    let mut fisher_ifa: Option<IndexMap<String, TensorData<f64>>> = None;
    let mut fisher_hpa: Option<IndexMap<String, TensorData<f64>>> = None;
    let mut value_params: Option<ParameterSet<f32>> = None;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut results: Vec<PhaseResult> = Vec::new();
    let mut best: Option<(usize, f64)> = None;

    for phase in schedule.phases() {
        let started = std::time::Instant::now();
        let label = phase.label();

        // resolve the constraint against the opposite side
        let constraint = match phase.loss_kind {
            LossKind::MleOnly => Constraint::None,
            LossKind::EwcIfa | LossKind::EwcHpa(_) => {
                let opposite = phase.side.opposite();
                let anchor = match opposite {
                    Side::Ifa => last_ifa.as_ref(),
                    Side::Hpa => last_hpa.as_ref(),
                };
                match (anchor, mode) {
                    (None, _) | (_, PenaltyMode::Off) => Constraint::None,
                    (Some(anchor), PenaltyMode::Ewc) => {
                        if config.ewc.lambda == 0.0 {
                            Constraint::None
                        } else {
                            let f = compute_f(ledger.ac(opposite), config.f_max)?;
                            Constraint::Penalty { anchor, f }
                        }
                    }
                    (Some(anchor), PenaltyMode::EwcOriginalFisher) => {
                        if config.ewc.lambda == 0.0 {
                            Constraint::None
                        } else {
                            let fisher = match opposite {
                                Side::Ifa => fisher_ifa.clone(),
                                Side::Hpa => fisher_hpa.clone(),
                            }
                            .ok_or_else(|| Error::InvalidInput(
                                "fisher weights missing for the anchor side".into(),
                            ))?;
                            Constraint::FisherPenalty { anchor, fisher }
                        }
                    }
                    (Some(_), PenaltyMode::Freeze) => {
                        let f = compute_f(ledger.ac(opposite), config.f_max)?;
                        let mask = freeze_mask(&f, config.freeze_fraction)?;
                        Constraint::Frozen(mask.into_iter().collect())
                    }
                }
            }
        };
        let anchor_label = match &constraint {
            Constraint::Penalty { anchor, .. } | Constraint::FisherPenalty { anchor, .. } => {
                Some(anchor.label)
            }
            _ => None,
        };

        // train
        let abort = |step: usize, detail: String, results: &[PhaseResult]| Error::PhaseAborted {
            phase: label.clone(),
            step,
            detail,
            last_checkpoint: results.last().map(|r| r.checkpoint.clone()),
        };
        let train_result = match phase.side {
            Side::Ifa => train_ifa_phase(
                config,
                &mut params,
                &ifa_subsets[phase.subset - 1],
                &constraint,
                &label,
                &mut rows,
            ),
            Side::Hpa => match phase.loss_kind {
                LossKind::EwcHpa(HpaAlgorithm::Dpo) => train_dpo_phase(
                    config,
                    &mut params,
                    last_ifa.as_ref().expect("preference phase needs an instruction anchor"),
                    &pref_subsets[phase.subset - 1],
                    &constraint,
                    &label,
                    &mut rows,
                ),
                LossKind::EwcHpa(HpaAlgorithm::Ppo) => {
                    // value model: fresh from the current policy at the first
                    // preference phase, carried over afterwards
                    let first_hpa = value_params.is_none();
                    if first_hpa {
                        value_params = Some(attach_score_head(&params)?);
                    }
                    train_ppo_phase(
                        config,
                        &mut params,
                        last_ifa.as_ref().expect("preference phase needs an instruction anchor"),
                        reward_model.expect("checked above"),
                        value_params.as_mut().expect("just initialized"),
                        &pref_subsets[phase.subset - 1],
                        &constraint,
                        first_hpa,
                        &label,
                        &mut rows,
                    )
                }
                _ => unreachable!("preference phases always carry a preference loss"),
            },
        };
        if let Err(e) = train_result {
            return Err(match e {
                Error::NonFinite { context } => {
                    abort(0, format!("non-finite value in {context}"), &results)
                }
                Error::PhaseAborted { step, detail, .. } => abort(step, detail, &results),
                other => other,
            });
        }

        // snapshot, change statistics, accumulation
        let after = Snapshot::capture(
            &params,
            SnapshotLabel { side: phase.side, subset: phase.subset, phase_index: phase.index },
        );
        let c_map = unit_change(&prev_snapshot, &after)?;
        ledger.accumulate(phase.side, c_map.clone())?;
        ledger.compute_f(phase.side)?;
        if mode == PenaltyMode::EwcOriginalFisher {
            let side_fisher = match phase.side {
                Side::Ifa => &mut fisher_ifa,
                Side::Hpa => &mut fisher_hpa,
            };
            *side_fisher = Some(phase_fisher(&params, phase, &ifa_subsets, &pref_subsets)?);
        }
        prev_snapshot = after.clone();
        match phase.side {
            Side::Ifa => last_ifa = Some(after),
            Side::Hpa => last_hpa = Some(after),
        }
        if let (LossKind::EwcHpa(HpaAlgorithm::Ppo), Some(v)) = (&phase.loss_kind, &value_params)
        {
            checkpoint::save(v, &out_dir.join("value_model.hbck"))?;
        }

        // checkpoint + validation
        let ckpt_path = ckpt_dir.join(format!("phase_{:02}_{}.hbck", phase.index, label));
        checkpoint::save(&params, &ckpt_path)?;
        let validation = validate(config, &params, reward_model, data)?;
        rows.push(MetricsRow {
            phase: label.clone(),
            step: 0,
            loss: Some(validation.mle_loss),
            reward: validation.reward,
            margin: Some(validation.margin),
            perplexity: Some(validation.perplexity),
        });
        let score = validation.selection_score();
        let result_index = results.len();
        if best.map(|(_, s)| score > s).unwrap_or(true) {
            best = Some((result_index, score));
        }
        results.push(PhaseResult {
            phase: *phase,
            checkpoint: ckpt_path,
            c_map,
            anchor: anchor_label,
            validation,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    let (best_phase, _) = best.expect("schedules are nonempty");
    let final_params = checkpoint::load::<f32>(&results[best_phase].checkpoint)?;
    std::fs::copy(&results[best_phase].checkpoint, out_dir.join("final.hbck"))?;
    let final_manifest = serde_json::json!({
        "best_phase": results[best_phase].phase.label(),
        "best_phase_index": results[best_phase].phase.index,
        "checkpoint": results[best_phase]
            .checkpoint
            .strip_prefix(out_dir)
            .unwrap_or(&results[best_phase].checkpoint)
            .to_string_lossy(),
    });
    std::fs::write(
        out_dir.join("final.json"),
        format!("{}\n", serde_json::to_string_pretty(&final_manifest)?),
    )?;
    save_ledger(&ledger, &out_dir.join("ledger.hbledger"))?;
    crate::metrics::emit_metrics(&rows, out_dir)?;

    Ok(RunOutput { final_params, phases: results, best_phase, rows })
}

/// Fisher diagonal over the subset a phase just trained on (chosen responses
/// stand in for the preference side's targets).
fn phase_fisher(
    params: &ParameterSet<f32>,
    phase: &Phase,
    ifa_subsets: &[Vec<PromptResponseRecord>],
    pref_subsets: &[Vec<PreferenceRecord>],
) -> Result<IndexMap<String, TensorData<f64>>> {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = match phase.side {
        Side::Ifa => ifa_subsets[phase.subset - 1]
            .iter()
            .map(|r| r.encode())
            .collect(),
        Side::Hpa => pref_subsets[phase.subset - 1]
            .iter()
            .map(|r| {
                let (x, yw, _) = r.encode();
                (x, yw)
            })
            .collect(),
    };
    fisher_diagonal_lm(params, &pairs)
}

enum Constraint<'a> {
    None,
    Penalty { anchor: &'a Snapshot<f32>, f: IndexMap<String, f64> },
    FisherPenalty { anchor: &'a Snapshot<f32>, fisher: IndexMap<String, TensorData<f64>> },
    Frozen(HashSet<String>),
}

impl Constraint<'_> {
    fn frozen_units(&self) -> HashSet<String> {
        match self {
            Constraint::Frozen(set) => set.clone(),
            _ => HashSet::new(),
        }
    }

    /// Append the penalty to a base loss if this constraint carries one.
    fn apply(
        &self,
        tape: &mut Tape<f32>,
        binding: &Binding,
        lambda: f64,
        base: ValueId,
    ) -> Result<ValueId> {
        match self {
            Constraint::Penalty { anchor, f } => {
                let p = ewc_penalty(tape, binding, anchor, f, lambda)?;
                tape.add(base, p)
            }
            Constraint::FisherPenalty { anchor, fisher } => {
                let p = ewc_penalty_per_neuron(tape, binding, anchor, fisher, lambda)?;
                tape.add(base, p)
            }
            Constraint::None | Constraint::Frozen(_) => Ok(base),
        }
    }
}

fn finite_loss(tape: &Tape<f32>, loss: ValueId, step: usize) -> Result<f64> {
    let v = tape.value(loss).item() as f64;
    if !v.is_finite() {
        return Err(Error::PhaseAborted {
            phase: String::new(),
            step,
            detail: format!("loss became {v}"),
            last_checkpoint: None,
        });
    }
    Ok(v)
}

fn epoch_order(
    len: usize,
    seed: u64,
    label: &str,
    epoch: usize,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &format!("phase.{label}.epoch{epoch}")));
    order
}

fn train_ifa_phase(
    config: &HbatConfig,
    params: &mut ParameterSet<f32>,
    subset: &[PromptResponseRecord],
    constraint: &Constraint<'_>,
    label: &str,
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    let frozen = constraint.frozen_units();
    let mut opt = Sgd::new(config.opt.ifa_lr, config.opt.momentum);
    let mut step = 0usize;
    for epoch in 0..config.opt.ifa_epochs {
        let order = epoch_order(subset.len(), config.seed, label, epoch);
        for batch in order.chunks(config.opt.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, params, true);
            let mut total: Option<ValueId> = None;
            for &idx in batch {
                let (x, y) = subset[idx].encode();
                let l = mle_loss(&mut tape, &binding, &x, &y)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let mean =
                tape.scalar_mul(total.expect("nonempty batch"), 1.0 / batch.len() as f32)?;
            let loss = constraint.apply(&mut tape, &binding, config.ewc.lambda, mean)?;
            let loss_value = finite_loss(&tape, loss, step)?;
            let grads = tape.backward(loss)?;
            opt.step(params, &grads, &frozen);
            rows.push(MetricsRow {
                phase: label.to_string(),
                step,
                loss: Some(loss_value),
                reward: None,
                margin: None,
                perplexity: None,
            });
        }
    }
    Ok(())
}

fn train_dpo_phase(
    config: &HbatConfig,
    params: &mut ParameterSet<f32>,
    anchor: &Snapshot<f32>,
    subset: &[PreferenceRecord],
    constraint: &Constraint<'_>,
    label: &str,
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    let frozen = constraint.frozen_units();
    let reference = ParameterSet::from_units(params.config().clone(), anchor.units().clone())?;
    let mut opt = Sgd::new(config.opt.hpa_lr, config.opt.momentum);
    let mut step = 0usize;
    for epoch in 0..config.opt.hpa_epochs {
        let order = epoch_order(subset.len(), config.seed, label, epoch);
        for batch in order.chunks(config.opt.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, params, true);
            let ref_binding = Binding::bind(&mut tape, &reference, false);
            let mut total: Option<ValueId> = None;
            for &idx in batch {
                let (x, yw, yl) = subset[idx].encode();
                let l = dpo_loss(&mut tape, &binding, &ref_binding, &x, &yw, &yl, &config.dpo)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let mean =
                tape.scalar_mul(total.expect("nonempty batch"), 1.0 / batch.len() as f32)?;
            let loss = constraint.apply(&mut tape, &binding, config.ewc.lambda, mean)?;
            let loss_value = finite_loss(&tape, loss, step)?;
            let grads = tape.backward(loss)?;
            opt.step(params, &grads, &frozen);
            rows.push(MetricsRow {
                phase: label.to_string(),
                step,
                loss: Some(loss_value),
                reward: None,
                margin: None,
                perplexity: None,
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_ppo_phase(
    config: &HbatConfig,
    params: &mut ParameterSet<f32>,
    anchor: &Snapshot<f32>,
    reward_model: &ParameterSet<f32>,
    value_params: &mut ParameterSet<f32>,
    subset: &[PreferenceRecord],
    constraint: &Constraint<'_>,
    run_cold_start: bool,
    label: &str,
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    let frozen = constraint.frozen_units();
    let reference = ParameterSet::from_units(params.config().clone(), anchor.units().clone())?;
    let prompts: Vec<Vec<usize>> = subset
        .iter()
        .map(|r| crate::data::encode_prompt(&r.prompt))
        .collect();

    if run_cold_start && config.cold_start_steps > 0 {
        cold_start_value_training(
            params,
            reward_model,
            value_params,
            &prompts,
            config.cold_start_steps,
            config.opt.value_lr,
            config.opt.momentum,
            &config.generation,
            rng::mix(config.seed, rng::fnv1a64(format!("phase.{label}.coldstart").as_bytes())),
        )?;
    }

    let mut opt = Sgd::new(config.opt.hpa_lr, config.opt.momentum);
    let mut value_opt = Sgd::new(config.opt.value_lr, config.opt.momentum);
    let sample_root = rng::mix(
        config.seed,
        rng::fnv1a64(format!("phase.{label}.sampling").as_bytes()),
    );
    let mut step = 0usize;
    for epoch in 0..config.opt.hpa_epochs {
        let order = epoch_order(prompts.len(), config.seed, label, epoch);
        for batch in order.chunks(config.opt.batch_size) {
            step += 1;
            // roll out one frozen sample per prompt from the current policy
            let mut samples: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
            let mut rewards: Vec<f64> = Vec::with_capacity(batch.len());
            for (k, &idx) in batch.iter().enumerate() {
                let settings = GenerationSettings {
                    seed: rng::mix(sample_root, (step as u64) << 20 | k as u64),
                    ..config.generation.clone()
                };
                let y = generate(params, &prompts[idx], &settings)?;
                rewards.push(reward_value(reward_model, &prompts[idx], &y)?);
                samples.push(y);
            }
            // advantage: optionally baseline-subtracted, standardized per batch
            let mut advantages = rewards.clone();
            if config.baseline_subtract {
                for (adv, &idx) in advantages.iter_mut().zip(batch) {
                    *adv -= value_value(value_params, &prompts[idx], &[])?;
                }
            }
            standardize(&mut advantages);

            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, params, true);
            let ref_binding = Binding::bind(&mut tape, &reference, false);
            let mut lps = Vec::with_capacity(batch.len());
            let mut old_lps = Vec::with_capacity(batch.len());
            for (k, &idx) in batch.iter().enumerate() {
                lps.push(sequence_logprob(&mut tape, &binding, &prompts[idx], &samples[k])?);
                old_lps.push(sequence_logprob(
                    &mut tape,
                    &ref_binding,
                    &prompts[idx],
                    &samples[k],
                )?);
            }
            let base = ppo_from_logprobs(&mut tape, &lps, &old_lps, &advantages, &config.kl)?;
            let loss = constraint.apply(&mut tape, &binding, config.ewc.lambda, base)?;
            let loss_value = finite_loss(&tape, loss, step)?;
            let grads = tape.backward(loss)?;
            opt.step(params, &grads, &frozen);

            // fit the baseline to the observed rewards
            let batch_prompts: Vec<&Vec<usize>> = batch.iter().map(|&i| &prompts[i]).collect();
            value_step(value_params, &batch_prompts, &rewards, &mut value_opt)?;

            rows.push(MetricsRow {
                phase: label.to_string(),
                step,
                loss: Some(loss_value),
                reward: None,
                margin: None,
                perplexity: None,
            });
        }
    }
    Ok(())
}

/// One squared-error step of the value model toward observed rewards.
fn value_step(
    value_params: &mut ParameterSet<f32>,
    prompts: &[&Vec<usize>],
    targets: &[f64],
    opt: &mut Sgd,
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, value_params, true);
    let mut total: Option<ValueId> = None;
    for (prompt, &target) in prompts.iter().zip(targets) {
        let v = value_forward(&mut tape, &binding, prompt, &[])?;
        let t = tape.constant_scalar(target as f32);
        let d = tape.sub(v, t)?;
        let sq = tape.mul(d, d)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let mean = tape.scalar_mul(total.expect("nonempty batch"), 1.0 / prompts.len() as f32)?;
    let mse = tape.value(mean).item() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite { context: "value regression".into() });
    }
    let grads = tape.backward(mean)?;
    opt.step(value_params, &grads, &HashSet::new());
    Ok(mse)
}

/// Value-model-only warmup: roll out the frozen policy once over the
/// prompts, then fit the value head to the observed rewards with full-batch
/// steps. Returns the squared error measured after each step.
#[allow(clippy::too_many_arguments)]
pub fn cold_start_value_training(
    policy: &ParameterSet<f32>,
    reward_model: &ParameterSet<f32>,
    value_params: &mut ParameterSet<f32>,
    prompts: &[Vec<usize>],
    steps: usize,
    value_lr: f64,
    momentum: f64,
    generation: &GenerationSettings,
    seed: u64,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("cold start needs at least one prompt".into()));
    }
    let mut rewards = Vec::with_capacity(prompts.len());
    for (k, prompt) in prompts.iter().enumerate() {
        let settings = GenerationSettings {
            seed: rng::mix(seed, k as u64),
            ..generation.clone()
        };
        let y = generate(policy, prompt, &settings)?;
        rewards.push(reward_value(reward_model, prompt, &y)?);
    }
    let refs: Vec<&Vec<usize>> = prompts.iter().collect();
    let mut opt = Sgd::new(value_lr, momentum);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        value_step(value_params, &refs, &rewards, &mut opt)?;
        // measure after the update
        let mut mse = 0.0;
        for (prompt, &r) in prompts.iter().zip(&rewards) {
            let v = value_value(value_params, prompt, &[])?;
            mse += (v - r) * (v - r);
        }
        curve.push(mse / prompts.len() as f64);
    }
    Ok(curve)
}

fn validate(
    config: &HbatConfig,
    params: &ParameterSet<f32>,
    reward_model: Option<&ParameterSet<f32>>,
    data: RunData<'_>,
) -> Result<PhaseValidation> {
    let mle = validation_mle(params, data.val_ifa)?;
    let ppl = perplexity(params, data.val_ifa)?;
    let margin = preference_margin(params, data.val_pref)?;
    let reward = match reward_model {
        Some(rm) => {
            let prompts: Vec<Vec<usize>> = data
                .val_pref
                .iter()
                .map(|r| crate::data::encode_prompt(&r.prompt))
                .collect();
            let settings = GenerationSettings {
                seed: rng::mix(config.seed, rng::fnv1a64(b"validation.generate")),
                ..config.generation.clone()
            };
            Some(mean_reward(params, rm, &prompts, &settings)?.0)
        }
        None => None,
    };
    Ok(PhaseValidation { mle_loss: mle, perplexity: ppl, margin, reward })
}

/// Mean per-record MLE loss (forward only).
fn validation_mle(params: &ParameterSet<f32>, records: &[PromptResponseRecord]) -> Result<f64> {
    let mut total = 0.0;
    for rec in records {
        let (x, y) = rec.encode();
        total -= crate::model::sequence_logprob_value(params, &x, &y)?;
    }
    Ok(total / records.len() as f64)
}

/// Fraction of pairs where the reward model ranks the chosen response above
/// the rejected one.
pub fn pairwise_accuracy(
    reward_model: &ParameterSet<f32>,
    pairs: &[PreferenceRecord],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("accuracy over an empty pair set".into()));
    }
    let mut correct = 0usize;
    for rec in pairs {
        let (x, yw, yl) = rec.encode();
        let rw = reward_value(reward_model, &x, &yw)?;
        let rl = reward_value(reward_model, &x, &yl)?;
        if rw > rl {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Reward-model training output.
#[derive(Debug)]
pub struct RmTrainOutput {
    pub params: ParameterSet<f32>,
    pub holdout_accuracy: f64,
    pub rows: Vec<MetricsRow>,
}

/// Train a reward model with the pairwise logistic ranking loss, starting
/// from the given (instruction-tuned) policy backbone.
pub fn train_reward_model(
    init_policy: &ParameterSet<f32>,
    train: &[PreferenceRecord],
    holdout: &[PreferenceRecord],
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
) -> Result<RmTrainOutput> {
    if train.is_empty() {
        return Err(Error::InvalidInput("reward training needs preference pairs".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut params = attach_score_head(init_policy)?;
    let mut opt = Sgd::new(lr, momentum);
    let mut rows = Vec::new();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = epoch_order(train.len(), seed, "rm", epoch);
        for batch in order.chunks(batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, &params, true);
            let mut total: Option<ValueId> = None;
            for &idx in batch {
                let (x, yw, yl) = train[idx].encode();
                let l = ranking_loss(&mut tape, &binding, &x, &yw, &yl)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let mean =
                tape.scalar_mul(total.expect("nonempty batch"), 1.0 / batch.len() as f32)?;
            let loss_value = tape.value(mean).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::PhaseAborted {
                    phase: "rm".into(),
                    step,
                    detail: format!("ranking loss became {loss_value}"),
                    last_checkpoint: None,
                });
            }
            let grads = tape.backward(mean)?;
            opt.step(&mut params, &grads, &HashSet::new());
            rows.push(MetricsRow {
                phase: "rm".into(),
                step,
                loss: Some(loss_value),
                reward: None,
                margin: None,
                perplexity: None,
            });
        }
    }
    let holdout_accuracy = if holdout.is_empty() {
        f64::NAN
    } else {
        pairwise_accuracy(&params, holdout)?
    };
    Ok(RmTrainOutput { params, holdout_accuracy, rows })
}
