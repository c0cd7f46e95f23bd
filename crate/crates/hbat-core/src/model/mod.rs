//! Tiny decoder-only causal language model with named parameter units.
//!
//! A parameter unit is one named weight tensor (each matrix and each bias);
//! the importance machinery operates at exactly this granularity. Reward and
//! value models reuse the backbone and add a scalar score head read at the
//! last position of the input.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tape, TensorData, ValueId};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const SCORE_HEAD_WEIGHT: &str = "score_head.w";
pub const SCORE_HEAD_BIAS: &str = "score_head.b";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // ~108k parameters over 37 units; trains in minutes on CPU.
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            width: 64,
            n_layers: 2,
            n_heads: 2,
            context: 128,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }
}

/// One named parameter unit: a weight matrix or bias vector plus its neuron
/// count.
#[derive(Debug, Clone)]
pub struct ParameterUnit<'a, S> {
    pub name: &'a str,
    pub tensor: &'a TensorData<S>,
}

impl<S: Scalar> ParameterUnit<'_, S> {
    /// Number of scalars ("neurons") in the unit.
    pub fn neuron_count(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered collection of named parameter units plus the model config.
/// Iteration order is insertion order and is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    config: ModelConfig,
    units: IndexMap<String, TensorData<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn from_units(config: ModelConfig, units: IndexMap<String, TensorData<S>>) -> Result<Self> {
        config.validate()?;
        if units.is_empty() {
            return Err(Error::InvalidInput("parameter set has no units".into()));
        }
        for (name, t) in &units {
            if !t.all_finite() {
                return Err(Error::NonFinite { context: format!("unit `{name}`") });
            }
        }
        Ok(Self { config, units })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn units(&self) -> &IndexMap<String, TensorData<S>> {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut IndexMap<String, TensorData<S>> {
        &mut self.units
    }

    pub fn unit(&self, name: &str) -> Option<ParameterUnit<'_, S>> {
        self.units
            .get_key_value(name)
            .map(|(k, v)| ParameterUnit { name: k, tensor: v })
    }

    pub fn unit_names(&self) -> Vec<String> {
        self.units.keys().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.units.values().map(|t| t.numel()).sum()
    }

    pub fn has_score_head(&self) -> bool {
        self.units.contains_key(SCORE_HEAD_WEIGHT)
    }

    pub fn map_as_f64(&self) -> ParameterSet<f64> {
        ParameterSet {
            config: self.config.clone(),
            units: self.units.iter().map(|(k, v)| (k.clone(), v.map_as_f64())).collect(),
        }
    }
}

/// Initialize a policy model: fan-in–scaled normal weights, zero biases,
/// unit layer-norm gains. Deterministic in the seed.
pub fn init_policy<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<S>> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let mut units = IndexMap::new();
    let d = config.width;
    let h = config.mlp_hidden;

    let normal = |shape: Vec<usize>, fan_in: usize, r: &mut rand_chacha::ChaCha12Rng| {
        let std = 1.0 / (fan_in as f64).sqrt();
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::from_f64(dist.sample(r))).collect();
        TensorData::new(shape, data).expect("shape matches data")
    };

    units.insert("embed.token".into(), normal(vec![config.vocab_size, d], d, &mut r));
    units.insert("embed.pos".into(), normal(vec![config.context, d], d, &mut r));
    for layer in 0..config.n_layers {
        let p = |tail: &str| format!("block.{layer}.{tail}");
        units.insert(p("ln1.gamma"), TensorData::filled(vec![d], S::one()));
        units.insert(p("ln1.beta"), TensorData::zeros(vec![d]));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            units.insert(p(w), normal(vec![d, d], d, &mut r));
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            units.insert(p(b), TensorData::zeros(vec![d]));
        }
        units.insert(p("ln2.gamma"), TensorData::filled(vec![d], S::one()));
        units.insert(p("ln2.beta"), TensorData::zeros(vec![d]));
        units.insert(p("mlp.w1"), normal(vec![d, h], d, &mut r));
        units.insert(p("mlp.b1"), TensorData::zeros(vec![h]));
        units.insert(p("mlp.w2"), normal(vec![h, d], h, &mut r));
        units.insert(p("mlp.b2"), TensorData::zeros(vec![d]));
    }
    units.insert("final_ln.gamma".into(), TensorData::filled(vec![d], S::one()));
    units.insert("final_ln.beta".into(), TensorData::zeros(vec![d]));
    units.insert("lm_head.w".into(), normal(vec![d, config.vocab_size], d, &mut r));

    ParameterSet::from_units(config.clone(), units)
}

/// Clone a policy's backbone and attach a zero-initialized scalar score head.
/// Used for both reward and value models, which start from the
/// instruction-tuned policy.
pub fn attach_score_head<S: Scalar>(policy: &ParameterSet<S>) -> Result<ParameterSet<S>> {
    let mut units = policy.units.clone();
    units.shift_remove("lm_head.w");
    units.insert(SCORE_HEAD_WEIGHT.into(), TensorData::zeros(vec![policy.config.width, 1]));
    units.insert(SCORE_HEAD_BIAS.into(), TensorData::zeros(vec![1]));
    ParameterSet::from_units(policy.config.clone(), units)
}

/// Parameter units bound onto a tape as leaves, keyed by unit name.
pub struct Binding {
    config: ModelConfig,
    ids: IndexMap<String, ValueId>,
}

impl Binding {
    /// Bind every unit as a leaf. With `trainable` the leaves are named and
    /// receive gradients; otherwise they are constants.
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ParameterSet<S>, trainable: bool) -> Self {
        let mut ids = IndexMap::new();
        for (name, tensor) in &params.units {
            let id = if trainable {
                tape.named_leaf(name, tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            ids.insert(name.clone(), id);
        }
        Self { config: params.config.clone(), ids }
    }

    /// Wrap already-bound leaf ids (used when a caller manages binding).
    pub fn from_ids(config: ModelConfig, ids: IndexMap<String, ValueId>) -> Self {
        Self { config, ids }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn unit_ids(&self) -> &IndexMap<String, ValueId> {
        &self.ids
    }

    fn get(&self, name: &str) -> Result<ValueId> {
        self.ids.get(name).copied().ok_or_else(|| Error::MissingUnit {
            unit: name.to_string(),
            context: "model binding",
        })
    }
}

fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > config.context {
        return Err(Error::InvalidInput(format!(
            "sequence of {} tokens exceeds context {}",
            tokens.len(),
            config.context
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {} out of range for vocab {}",
            bad, config.vocab_size
        )));
    }
    Ok(())
}

/// Hidden states after the final layer norm, `[len, width]`.
fn backbone_hidden<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Binding,
    tokens: &[usize],
) -> Result<ValueId> {
    validate_tokens(&b.config, tokens)?;
    let t = tokens.len();
    let cfg = &b.config;
    let dh = cfg.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let tok = tape.embed_gather(b.get("embed.token")?, tokens)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.embed_gather(b.get("embed.pos")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    // additive causal mask: large negative finite values underflow to exact
    // zero probability after the max-subtracted softmax
    let neg = S::from_f64(-1e9);
    let mut mask_data = vec![S::zero(); t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask_data[i * t + j] = neg;
        }
    }
    let mask = tape.constant(TensorData::new(vec![t, t], mask_data)?);

    for layer in 0..cfg.n_layers {
        let p = |tail: &str| format!("block.{layer}.{tail}");

        let ln1 = tape.layer_norm(x, b.get(&p("ln1.gamma"))?, b.get(&p("ln1.beta"))?)?;
        let q = tape.matmul(ln1, b.get(&p("attn.wq"))?)?;
        let q = tape.add(q, b.get(&p("attn.bq"))?)?;
        let k = tape.matmul(ln1, b.get(&p("attn.wk"))?)?;
        let k = tape.add(k, b.get(&p("attn.bk"))?)?;
        let v = tape.matmul(ln1, b.get(&p("attn.wv"))?)?;
        let v = tape.add(v, b.get(&p("attn.bv"))?)?;

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let cols: Vec<usize> = (hd * dh..(hd + 1) * dh).collect();
            let qh = tape.index_select(q, 1, &cols)?;
            let kh = tape.index_select(k, 1, &cols)?;
            let vh = tape.index_select(v, 1, &cols)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scalar_mul(scores, scale)?;
            let masked = tape.add(scores, mask)?;
            let probs = tape.softmax(masked)?;
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let att = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat(&head_outs, 1)?
        };
        let att = tape.matmul(att, b.get(&p("attn.wo"))?)?;
        let att = tape.add(att, b.get(&p("attn.bo"))?)?;
        x = tape.add(x, att)?;

        let ln2 = tape.layer_norm(x, b.get(&p("ln2.gamma"))?, b.get(&p("ln2.beta"))?)?;
        let m = tape.matmul(ln2, b.get(&p("mlp.w1"))?)?;
        let m = tape.add(m, b.get(&p("mlp.b1"))?)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, b.get(&p("mlp.w2"))?)?;
        let m = tape.add(m, b.get(&p("mlp.b2"))?)?;
        x = tape.add(x, m)?;
    }

    tape.layer_norm(x, b.get("final_ln.gamma")?, b.get("final_ln.beta")?)
}

/// Causal logits for a token sequence, `[len, vocab]`. Position `t` depends
/// only on tokens at positions `<= t`.
pub fn lm_forward<S: Scalar>(tape: &mut Tape<S>, b: &Binding, tokens: &[usize]) -> Result<ValueId> {
    let hidden = backbone_hidden(tape, b, tokens)?;
    tape.matmul(hidden, b.get("lm_head.w")?)
}

/// Sum of response-token log-probabilities `log p(y|x)`, a non-positive
/// scalar on the tape.
pub fn sequence_logprob<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Binding,
    prompt: &[usize],
    response: &[usize],
) -> Result<ValueId> {
    if response.is_empty() {
        return Err(Error::InvalidInput("empty response".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(response);
    let logits = lm_forward(tape, b, &seq)?;
    let logprobs = tape.log_softmax(logits)?;
    // logits at position n-1+j predict response token j
    let rows: Vec<usize> = (prompt.len() - 1..seq.len() - 1).collect();
    let predicted = tape.index_select(logprobs, 0, &rows)?;
    let picked = tape.pick_per_row(predicted, response)?;
    tape.sum_all(picked)
}

/// Forward-only convenience: `log p(y|x)` as a plain number.
pub fn sequence_logprob_value<S: Scalar>(
    params: &ParameterSet<S>,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, params, false);
    let id = sequence_logprob(&mut tape, &b, prompt, response)?;
    Ok(tape.value(id).item().as_f64())
}

/// Scalar score (reward or value): backbone hidden state at the last input
/// position through a linear head.
fn score_forward<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Binding,
    prompt: &[usize],
    response: &[usize],
) -> Result<ValueId> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(response);
    let hidden = backbone_hidden(tape, b, &seq)?;
    let last = tape.index_select(hidden, 0, &[seq.len() - 1])?;
    let s = tape.matmul(last, b.get(SCORE_HEAD_WEIGHT)?)?;
    let s = tape.add(s, b.get(SCORE_HEAD_BIAS)?)?;
    tape.reshape(s, vec![])
}

/// Reward of a complete response; the head is read at the final response
/// token. Rejects an empty response.
pub fn reward_forward<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Binding,
    prompt: &[usize],
    response: &[usize],
) -> Result<ValueId> {
    if response.is_empty() {
        return Err(Error::InvalidInput("reward of empty response".into()));
    }
    score_forward(tape, b, prompt, response)
}

/// Baseline value at any prefix: `partial_response` may be empty, in which
/// case the head is read at the last prompt token.
pub fn value_forward<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Binding,
    prompt: &[usize],
    partial_response: &[usize],
) -> Result<ValueId> {
    score_forward(tape, b, prompt, partial_response)
}

/// Forward-only reward as a plain number.
pub fn reward_value<S: Scalar>(
    params: &ParameterSet<S>,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, params, false);
    let id = reward_forward(&mut tape, &b, prompt, response)?;
    Ok(tape.value(id).item().as_f64())
}

/// Forward-only value as a plain number.
pub fn value_value<S: Scalar>(
    params: &ParameterSet<S>,
    prompt: &[usize],
    partial_response: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, params, false);
    let id = value_forward(&mut tape, &b, prompt, partial_response)?;
    Ok(tape.value(id).item().as_f64())
}

/// Nucleus sampling controls.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationSettings {
    /// Logit temperature; values below 1e-6 decode greedily.
    pub temperature: f64,
    /// Nucleus probability threshold in (0, 1].
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Token that ends generation (kept as the last emitted token).
    pub stop_token: Option<usize>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.75,
            top_p: 0.95,
            max_new_tokens: 16,
            seed: 0,
            stop_token: Some(crate::data::EOS),
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidInput("top-p must lie in (0, 1]".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidInput("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Smallest descending-probability prefix whose mass reaches `top_p`,
/// renormalized. Ties in probability break toward the lower token id.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &tok in &order {
        kept.push((tok, probs[tok]));
        mass += probs[tok];
        if mass >= top_p {
            break;
        }
    }
    for item in &mut kept {
        item.1 /= mass;
    }
    kept
}

fn sample_from(kept: &[(usize, f64)], r: &mut rand_chacha::ChaCha12Rng) -> usize {
    let u: f64 = r.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for &(tok, p) in kept {
        cum += p;
        if u < cum {
            return tok;
        }
    }
    kept.last().expect("nucleus never empty").0
}

/// Sample up to `max_new_tokens` continuation tokens. Deterministic given
/// the settings seed; every emitted token lies inside the nucleus implied by
/// `(temperature, top_p)`.
pub fn generate<S: Scalar>(
    params: &ParameterSet<S>,
    prompt: &[usize],
    settings: &GenerationSettings,
) -> Result<Vec<usize>> {
    settings.validate()?;
    validate_tokens(params.config(), prompt)?;
    let mut r = rng::seeded(settings.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();

    for _ in 0..settings.max_new_tokens {
        if seq.len() >= params.config().context {
            break;
        }
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, params, false);
        let logits = lm_forward(&mut tape, &b, &seq)?;
        let t = seq.len();
        let vocab = params.config().vocab_size;
        let last: Vec<f64> = tape.value(logits).data()[(t - 1) * vocab..t * vocab]
            .iter()
            .map(|v| v.as_f64())
            .collect();

        let tok = if settings.temperature < 1e-6 {
            // greedy limit; ties to the lowest id
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = last.iter().map(|v| v / settings.temperature).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let kept = nucleus_filter(&probs, settings.top_p);
            sample_from(&kept, &mut r)
        };

        seq.push(tok);
        out.push(tok);
        if settings.stop_token == Some(tok) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
