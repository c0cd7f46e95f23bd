//! Evaluation: reward scoring, perplexity, pairwise win rates, and the
//! metrics files a run emits.

use crate::data::{PreferenceRecord, PromptResponseRecord};
use crate::error::{Error, Result};
use crate::model::{generate, reward_value, GenerationSettings, ParameterSet};
use crate::rng;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Verdict of one pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Tie,
}

/// One judged item; exactly one verdict per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseJudgment {
    pub id: String,
    pub verdict: Verdict,
}

/// Aggregate pairwise scores: `S_A = Count(A) / (T − Count(Tie))` and the
/// complementary `S_B`. Defined only when at least one judgment is not a tie;
/// the two scores always sum to exactly 1.
pub fn win_rate(judgments: &[PairwiseJudgment]) -> Result<(f64, f64)> {
    let mut a = 0usize;
    let mut b = 0usize;
    let mut ties = 0usize;
    for j in judgments {
        match j.verdict {
            Verdict::A => a += 1,
            Verdict::B => b += 1,
            Verdict::Tie => ties += 1,
        }
    }
    let decisive = judgments.len() - ties;
    if decisive == 0 {
        return Err(Error::InvalidInput(
            "win rate undefined: every judgment is a tie".into(),
        ));
    }
    let mut score_a = a as f64 / decisive as f64;
    let mut score_b = b as f64 / decisive as f64;
    // when rounding leaves the pair an ulp away from 1, recompute the larger
    // score as the complement of the smaller; this keeps the exact-sum
    // contract and stays symmetric under swapping every verdict
    if score_a + score_b != 1.0 {
        if score_a < score_b {
            score_b = 1.0 - score_a;
        } else {
            score_a = 1.0 - score_b;
        }
    }
    Ok((score_a, score_b))
}

/// Line-delimited judgment file with fields `id` and
/// `verdict ∈ {"A","B","Tie"}`.
pub fn load_judgments(path: &Path) -> Result<Vec<PairwiseJudgment>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let j: PairwiseJudgment = serde_json::from_str(line).map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        out.push(j);
    }
    Ok(out)
}

/// Exact-match judge for the synthetic tasks: the response matching the gold
/// wins; matching both or neither is a tie.
pub fn judge_exact_match(gold: &str, response_a: &str, response_b: &str) -> Verdict {
    match (response_a == gold, response_b == gold) {
        (true, false) => Verdict::A,
        (false, true) => Verdict::B,
        _ => Verdict::Tie,
    }
}

/// Mean reward of seeded generations over a prompt set, plus the per-prompt
/// scores. Each prompt's sampling seed is derived from the settings seed and
/// the prompt tokens, so the mean is invariant to prompt order.
pub fn mean_reward<S: Scalar>(
    policy: &ParameterSet<S>,
    reward_model: &ParameterSet<S>,
    prompts: &[Vec<usize>],
    settings: &GenerationSettings,
) -> Result<(f64, Vec<f64>)> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("mean reward over an empty prompt set".into()));
    }
    let mut scores = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let token_bytes: Vec<u8> = prompt.iter().flat_map(|t| t.to_le_bytes()).collect();
        let per_prompt = GenerationSettings {
            seed: rng::mix(settings.seed, rng::fnv1a64(&token_bytes)),
            ..settings.clone()
        };
        let response = generate(policy, prompt, &per_prompt)?;
        scores.push(reward_value(reward_model, prompt, &response)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

/// `exp(total response NLL / total response tokens)` over a record set.
/// Invariant to record order and always at least 1.
pub fn perplexity<S: Scalar>(
    params: &ParameterSet<S>,
    records: &[PromptResponseRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("perplexity over an empty record set".into()));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for rec in records {
        let (x, y) = rec.encode();
        total_nll -= crate::model::sequence_logprob_value(params, &x, &y)?;
        total_tokens += y.len();
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Mean policy preference margin `log p(y_w|x) − log p(y_l|x)` over
/// preference records.
pub fn preference_margin<S: Scalar>(
    params: &ParameterSet<S>,
    records: &[PreferenceRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("margin over an empty record set".into()));
    }
    let mut total = 0.0f64;
    for rec in records {
        let (x, yw, yl) = rec.encode();
        let lw = crate::model::sequence_logprob_value(params, &x, &yw)?;
        let ll = crate::model::sequence_logprob_value(params, &x, &yl)?;
        total += lw - ll;
    }
    Ok(total / records.len() as f64)
}

/// One metrics row; absent fields stay empty in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub step: usize,
    pub loss: Option<f64>,
    pub reward: Option<f64>,
    pub margin: Option<f64>,
    pub perplexity: Option<f64>,
}

/// Column means over the rows that carry each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub rows: usize,
    pub mean_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub mean_margin: Option<f64>,
    pub mean_perplexity: Option<f64>,
}

fn column_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn summarize(rows: &[MetricsRow]) -> MetricsSummary {
    MetricsSummary {
        rows: rows.len(),
        mean_loss: column_mean(rows.iter().map(|r| r.loss)),
        mean_reward: column_mean(rows.iter().map(|r| r.reward)),
        mean_margin: column_mean(rows.iter().map(|r| r.margin)),
        mean_perplexity: column_mean(rows.iter().map(|r| r.perplexity)),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `metrics.csv` (stable column order) and `summary.json` under `dir`.
/// Emitting identical rows produces byte-identical files.
pub fn emit_metrics(rows: &[MetricsRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("phase,step,loss,reward,margin,perplexity\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.phase,
            r.step,
            fmt_opt(r.loss),
            fmt_opt(r.reward),
            fmt_opt(r.margin),
            fmt_opt(r.perplexity),
        ));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    let summary = summarize(rows);
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_score_head, init_policy, ModelConfig};
    use crate::rng;
    use rand::Rng;

    fn judgments(a: usize, b: usize, ties: usize) -> Vec<PairwiseJudgment> {
        let mut out = Vec::new();
        for (count, verdict) in [(a, Verdict::A), (b, Verdict::B), (ties, Verdict::Tie)] {
            for i in 0..count {
                out.push(PairwiseJudgment { id: format!("{verdict:?}{i}"), verdict });
            }
        }
        out
    }

    #[test]
    fn win_rate_hand_example() {
        // T = 10, Count(A) = 6, ties = 2 -> 6/8 and 2/8
        let (a, b) = win_rate(&judgments(6, 2, 2)).unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(b, 0.25);
    }

    #[test]
    fn win_rate_edges_and_symmetry() {
        let (a, b) = win_rate(&judgments(5, 0, 0)).unwrap();
        assert_eq!((a, b), (1.0, 0.0));

        assert!(win_rate(&judgments(0, 0, 4)).is_err());

        let js = judgments(3, 7, 2);
        let swapped: Vec<PairwiseJudgment> = js
            .iter()
            .map(|j| PairwiseJudgment {
                id: j.id.clone(),
                verdict: match j.verdict {
                    Verdict::A => Verdict::B,
                    Verdict::B => Verdict::A,
                    Verdict::Tie => Verdict::Tie,
                },
            })
            .collect();
        let (a1, b1) = win_rate(&js).unwrap();
        let (a2, b2) = win_rate(&swapped).unwrap();
        assert_eq!((a1, b1), (b2, a2));
    }

    #[test]
    fn win_rate_sums_to_exactly_one() {
        let mut r = rng::stream(3, "winrate");
        for _ in 0..1000 {
            let a = r.gen_range(0..20);
            let b = r.gen_range(0..20);
            let t = r.gen_range(0..20);
            if a + b == 0 {
                continue;
            }
            let (sa, sb) = win_rate(&judgments(a, b, t)).unwrap();
            assert_eq!(sa + sb, 1.0);
        }
    }

    #[test]
    fn exact_match_judge() {
        assert_eq!(judge_exact_match("abc", "abc", "abd"), Verdict::A);
        assert_eq!(judge_exact_match("abc", "abd", "abc"), Verdict::B);
        assert_eq!(judge_exact_match("abc", "abc", "abc"), Verdict::Tie);
        assert_eq!(judge_exact_match("abc", "x", "y"), Verdict::Tie);
    }

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            width: 8,
            n_layers: 1,
            n_heads: 2,
            context: 16,
            mlp_hidden: 16,
        }
    }

    #[test]
    fn mean_reward_zero_head_and_permutation_invariance() {
        let policy = init_policy::<f32>(&tiny_config(11), 4).unwrap();
        let rm = attach_score_head(&policy).unwrap();
        let settings = GenerationSettings {
            max_new_tokens: 4,
            seed: 5,
            stop_token: None,
            ..Default::default()
        };
        let prompts = vec![vec![1, 2], vec![3], vec![4, 5, 6]];
        let (mean, per) = mean_reward(&policy, &rm, &prompts, &settings).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(per, vec![0.0; 3]);

        // non-zero head: permuting prompts leaves the mean unchanged
        let mut rm2 = rm.clone();
        for v in rm2
            .units_mut()
            .get_mut(crate::model::SCORE_HEAD_WEIGHT)
            .unwrap()
            .data_mut()
        {
            *v = 0.3;
        }
        let (m1, _) = mean_reward(&policy, &rm2, &prompts, &settings).unwrap();
        let shuffled = vec![prompts[2].clone(), prompts[0].clone(), prompts[1].clone()];
        let (m2, _) = mean_reward(&policy, &rm2, &shuffled, &settings).unwrap();
        assert!((m1 - m2).abs() < 1e-12);

        let singleton = vec![prompts[1].clone()];
        let (ms, per_s) = mean_reward(&policy, &rm2, &singleton, &settings).unwrap();
        assert_eq!(ms, per_s[0]);
    }

    #[test]
    fn perplexity_uniform_model_is_vocab_size() {
        // the byte-level vocab stays at 259 but the distribution is uniform
        let mut params = init_policy::<f64>(&ModelConfig { context: 32, ..Default::default() }, 6)
            .unwrap();
        for v in params.units_mut().get_mut("lm_head.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let records = vec![PromptResponseRecord { prompt: "ab".into(), response: "cd".into() }];
        let ppl = perplexity(&params, &records).unwrap();
        assert!((ppl - 259.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_matches_naive_token_loop_and_order_invariance() {
        let params = init_policy::<f64>(&ModelConfig { context: 32, ..Default::default() }, 7)
            .unwrap();
        let records = vec![
            PromptResponseRecord { prompt: "ab".into(), response: "ba".into() },
            PromptResponseRecord { prompt: "c".into(), response: "cc".into() },
            PromptResponseRecord { prompt: "def".into(), response: "f".into() },
        ];
        let ppl = perplexity(&params, &records).unwrap();
        assert!(ppl >= 1.0);

        // naive recomputation: per-token cross-entropies averaged directly
        let mut nll = 0.0;
        let mut count = 0usize;
        for rec in &records {
            let (x, y) = rec.encode();
            for t in 0..y.len() {
                let mut prompt = x.clone();
                prompt.extend_from_slice(&y[..t]);
                let lp = crate::model::sequence_logprob_value(&params, &prompt, &[y[t]]).unwrap();
                nll -= lp;
                count += 1;
            }
        }
        let naive = (nll / count as f64).exp();
        assert!((ppl - naive).abs() < 1e-9);

        let reversed: Vec<_> = records.iter().rev().cloned().collect();
        let ppl_rev = perplexity(&params, &reversed).unwrap();
        assert!((ppl - ppl_rev).abs() < 1e-12);
    }

    #[test]
    fn emit_metrics_files_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            MetricsRow {
                phase: "ifa1".into(),
                step: 1,
                loss: Some(2.5),
                reward: None,
                margin: None,
                perplexity: None,
            },
            MetricsRow {
                phase: "ifa1".into(),
                step: 2,
                loss: Some(1.5),
                reward: Some(0.25),
                margin: Some(0.1),
                perplexity: Some(12.0),
            },
        ];
        emit_metrics(&rows, dir.path()).unwrap();
        let csv1 = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let sum1 = std::fs::read(dir.path().join("summary.json")).unwrap();
        emit_metrics(&rows, dir.path()).unwrap();
        assert_eq!(csv1, std::fs::read(dir.path().join("metrics.csv")).unwrap());
        assert_eq!(sum1, std::fs::read(dir.path().join("summary.json")).unwrap());

        let text = String::from_utf8(csv1).unwrap();
        assert!(text.starts_with("phase,step,loss,reward,margin,perplexity\n"));
        assert!(text.contains("ifa1,2,1.5,0.25,0.1,12\n"));

        let summary = summarize(&rows);
        assert_eq!(summary.mean_loss, Some(2.0)); // (2.5 + 1.5) / 2
        assert_eq!(summary.mean_reward, Some(0.25));

        // empty run: header-only CSV
        let dir2 = tempfile::tempdir().unwrap();
        emit_metrics(&[], dir2.path()).unwrap();
        let text = std::fs::read_to_string(dir2.path().join("metrics.csv")).unwrap();
        assert_eq!(text, "phase,step,loss,reward,margin,perplexity\n");
    }

    #[test]
    fn judgment_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judgments.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"1","verdict":"A"}"#, "\n",
                r#"{"id":"2","verdict":"Tie"}"#, "\n",
                r#"{"id":"3","verdict":"B"}"#, "\n",
            ),
        )
        .unwrap();
        let js = load_judgments(&path).unwrap();
        assert_eq!(js.len(), 3);
        assert_eq!(js[1].verdict, Verdict::Tie);
        let (a, b) = win_rate(&js).unwrap();
        assert_eq!((a, b), (0.5, 0.5));
    }
}
