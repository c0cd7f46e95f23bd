//! Parameter-change tracking and importance weights.
//!
//! After each training phase the per-unit change statistic
//! `C_i = (1/|θ_i|) Σ_j (θ_ij^before − θ_ij^after)²` is recorded and summed
//! into an accumulated total per alignment side. Importance weights are a
//! softmax over the accumulated changes scaled to sum to `F_max`. The
//! original per-neuron Fisher diagonal is also provided for comparison runs,
//! along with the top-fraction freeze mask used by the freezing baseline.

mod ledger_io;

use crate::error::{Error, Result};
use crate::model::{Binding, ParameterSet};
use crate::tensor::{Scalar, Tape, TensorData, ValueId};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Which alignment objective a phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Ifa,
    Hpa,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Ifa => Side::Hpa,
            Side::Hpa => Side::Ifa,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Side::Ifa => "ifa",
            Side::Hpa => "hpa",
        }
    }
}

/// Identifies the phase a snapshot was taken after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotLabel {
    pub side: Side,
    /// 1-based subset index within the side.
    pub subset: usize,
    /// 0-based position in the overall phase sequence; the initial snapshot
    /// uses 0 and phases count from 1.
    pub phase_index: usize,
}

impl SnapshotLabel {
    pub fn initial() -> Self {
        // the pre-training state, before any phase
        Self { side: Side::Ifa, subset: 0, phase_index: 0 }
    }
}

/// Immutable copy of every parameter unit at a point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<S> {
    pub label: SnapshotLabel,
    units: IndexMap<String, TensorData<S>>,
}

impl<S: Scalar> Snapshot<S> {
    pub fn capture(params: &ParameterSet<S>, label: SnapshotLabel) -> Self {
        Self { label, units: params.units().clone() }
    }

    pub fn units(&self) -> &IndexMap<String, TensorData<S>> {
        &self.units
    }

    pub fn unit(&self, name: &str) -> Option<&TensorData<S>> {
        self.units.get(name)
    }
}

/// Per-unit mean squared parameter change between two snapshots.
pub fn unit_change<S: Scalar>(
    before: &Snapshot<S>,
    after: &Snapshot<S>,
) -> Result<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    for (name, b) in &before.units {
        let a = after.units.get(name).ok_or_else(|| Error::MissingUnit {
            unit: name.clone(),
            context: "unit_change (after snapshot)",
        })?;
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "unit-change",
                detail: format!("unit `{name}`: {:?} vs {:?}", b.shape(), a.shape()),
            });
        }
        let mut acc = 0.0f64;
        for (x, y) in b.data().iter().zip(a.data()) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        out.insert(name.clone(), acc / b.numel() as f64);
    }
    for name in after.units.keys() {
        if !before.units.contains_key(name) {
            return Err(Error::MissingUnit {
                unit: name.clone(),
                context: "unit_change (before snapshot)",
            });
        }
    }
    Ok(out)
}

/// Importance weights: `F_i = F_max · e^{c_i} / Σ e^{c_j}` over units,
/// computed with max subtraction. The weights sum to `F_max`.
pub fn compute_f(changes: &IndexMap<String, f64>, f_max: f64) -> Result<IndexMap<String, f64>> {
    if changes.is_empty() {
        return Err(Error::InvalidInput("importance over an empty unit map".into()));
    }
    if !(f_max > 0.0) {
        return Err(Error::InvalidInput("F_max must be positive".into()));
    }
    let max = changes.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = Vec::with_capacity(changes.len());
    let mut z = 0.0;
    for &c in changes.values() {
        let e = (c - max).exp();
        exps.push(e);
        z += e;
    }
    Ok(changes
        .keys()
        .zip(exps)
        .map(|(name, e)| (name.clone(), f_max * e / z))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SideLedger {
    /// One C map per completed round, in order.
    rounds: Vec<IndexMap<String, f64>>,
    /// Running sums over rounds.
    ac: IndexMap<String, f64>,
    /// Importance weights from the latest `compute_f` call on this side.
    f: Option<IndexMap<String, f64>>,
}

/// Change history, accumulated totals, and current importance weights for
/// both alignment sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceLedger {
    unit_names: Vec<String>,
    f_max: f64,
    ifa: SideLedger,
    hpa: SideLedger,
}

impl ImportanceLedger {
    pub fn new(unit_names: Vec<String>, f_max: f64) -> Result<Self> {
        if unit_names.is_empty() {
            return Err(Error::InvalidInput("ledger needs at least one unit".into()));
        }
        if !(f_max > 0.0) {
            return Err(Error::InvalidInput("F_max must be positive".into()));
        }
        Ok(Self {
            unit_names,
            f_max,
            ifa: SideLedger::default(),
            hpa: SideLedger::default(),
        })
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn unit_names(&self) -> &[String] {
        &self.unit_names
    }

    fn side(&self, side: Side) -> &SideLedger {
        match side {
            Side::Ifa => &self.ifa,
            Side::Hpa => &self.hpa,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut SideLedger {
        match side {
            Side::Ifa => &mut self.ifa,
            Side::Hpa => &mut self.hpa,
        }
    }

    /// Record one round's C map and fold it into the accumulated total.
    /// Returns the updated AC map.
    pub fn accumulate(
        &mut self,
        side: Side,
        c_map: IndexMap<String, f64>,
    ) -> Result<&IndexMap<String, f64>> {
        for name in &self.unit_names {
            if !c_map.contains_key(name) {
                return Err(Error::MissingUnit {
                    unit: name.clone(),
                    context: "ledger accumulate",
                });
            }
        }
        if c_map.len() != self.unit_names.len() {
            let extra = c_map
                .keys()
                .find(|k| !self.unit_names.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::MissingUnit { unit: extra, context: "ledger unit list" });
        }
        let names = self.unit_names.clone();
        let ledger = self.side_mut(side);
        for name in &names {
            let c = c_map[name];
            *ledger.ac.entry(name.clone()).or_insert(0.0) += c;
        }
        ledger.rounds.push(c_map);
        Ok(&ledger.ac)
    }

    pub fn rounds(&self, side: Side) -> &[IndexMap<String, f64>] {
        &self.side(side).rounds
    }

    pub fn ac(&self, side: Side) -> &IndexMap<String, f64> {
        &self.side(side).ac
    }

    /// Recompute AC from the stored per-round history (replay oracle).
    pub fn replay_ac(&self, side: Side) -> IndexMap<String, f64> {
        let mut out: IndexMap<String, f64> =
            self.unit_names.iter().map(|n| (n.clone(), 0.0)).collect();
        for round in &self.side(side).rounds {
            for (name, c) in round {
                *out.get_mut(name).expect("validated at accumulate") += c;
            }
        }
        out
    }

    /// Importance weights for a side from its accumulated changes; stored as
    /// the side's current F map.
    pub fn compute_f(&mut self, side: Side) -> Result<IndexMap<String, f64>> {
        let f_max = self.f_max;
        let ledger = self.side_mut(side);
        if ledger.rounds.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no completed {} rounds to weight",
                side.tag()
            )));
        }
        let f = compute_f(&ledger.ac, f_max)?;
        ledger.f = Some(f.clone());
        Ok(f)
    }

    pub fn current_f(&self, side: Side) -> Option<&IndexMap<String, f64>> {
        self.side(side).f.as_ref()
    }
}

/// Per-neuron Fisher diagonal estimated from squared first-order gradients of
/// a log-probability function, averaged over a dataset:
/// `F = (1/|D|) Σ (∂ log p(y|x) / ∂θ)²`.
///
/// `logprob` receives a fresh tape, the bound unit ids, and the sample index,
/// and must return the scalar log-probability of that sample.
pub fn fisher_diagonal<S, F>(
    units: &IndexMap<String, TensorData<S>>,
    n_samples: usize,
    mut logprob: F,
) -> Result<IndexMap<String, TensorData<f64>>>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &IndexMap<String, ValueId>, usize) -> Result<ValueId>,
{
    if n_samples == 0 {
        return Err(Error::InvalidInput("fisher estimate over an empty dataset".into()));
    }
    let mut acc: IndexMap<String, TensorData<f64>> = units
        .iter()
        .map(|(k, v)| (k.clone(), TensorData::zeros(v.shape().to_vec())))
        .collect();
    for sample in 0..n_samples {
        let mut tape = Tape::new();
        let mut ids = IndexMap::new();
        for (name, tensor) in units {
            ids.insert(name.clone(), tape.named_leaf(name, tensor.clone()));
        }
        let lp = logprob(&mut tape, &ids, sample)?;
        let grads = tape.backward(lp)?;
        for (name, g) in grads {
            let slot = acc.get_mut(&name).expect("grad keys match units");
            for (a, v) in slot.data_mut().iter_mut().zip(g.data()) {
                let gv = v.as_f64();
                *a += gv * gv;
            }
        }
    }
    let inv = 1.0 / n_samples as f64;
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    Ok(acc)
}

/// Fisher diagonal of a language model over `(prompt, response)` token pairs.
pub fn fisher_diagonal_lm<S: Scalar>(
    params: &ParameterSet<S>,
    dataset: &[(Vec<usize>, Vec<usize>)],
) -> Result<IndexMap<String, TensorData<f64>>> {
    let config = params.config().clone();
    fisher_diagonal(params.units(), dataset.len(), |tape, ids, sample| {
        let binding = Binding::from_ids(config.clone(), ids.clone());
        let (x, y) = &dataset[sample];
        crate::model::sequence_logprob(tape, &binding, x, y)
    })
}

/// Unit names holding the top `ceil(fraction · n)` importance weights.
/// Ties break toward earlier unit names; the selection only depends on the
/// ordering of `f`, not its scale.
pub fn freeze_mask(f: &IndexMap<String, f64>, fraction: f64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput("freeze fraction must lie in (0, 1)".into()));
    }
    if f.is_empty() {
        return Err(Error::InvalidInput("freeze mask over an empty map".into()));
    }
    let mut entries: Vec<(usize, &String, f64)> = f
        .iter()
        .enumerate()
        .map(|(i, (name, &v))| (i, name, v))
        .collect();
    entries.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(b.1)));
    // guard against fraction*n landing an ulp above an integer
    let k = ((fraction * f.len() as f64) - 1e-9).ceil() as usize;
    let k = k.clamp(1, f.len());
    Ok(entries.into_iter().take(k).map(|(_, name, _)| name.clone()).collect())
}

pub use ledger_io::{load_ledger, save_ledger};
