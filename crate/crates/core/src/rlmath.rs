//! GRPO loss arithmetic: group-normalized advantages, the clipped token-level
//! surrogate, a clipped K3 KL penalty, zero-variance filtering and the
//! positive-advantage best-of-N mask. Pure functions only.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to a non-zero group std before dividing.
pub const STD_FLOOR: f64 = 1e-8;
pub const K3_CLIP: (f64, f64) = (0.0, 10.0);

/// One sampled response with per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub reward: f64,
    pub logp_policy: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    /// Tokens that count toward the loss. Empty means every token counts.
    #[serde(default)]
    pub mask: Vec<bool>,
}

impl Response {
    fn len(&self) -> usize {
        self.logp_policy.len()
    }

    fn active(&self, t: usize) -> bool {
        self.mask.is_empty() || self.mask[t]
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.logp_old.len() != n || self.logp_ref.len() != n {
            return Err(Error::Batch(format!(
                "log-prob arrays disagree: policy {n}, old {}, ref {}",
                self.logp_old.len(),
                self.logp_ref.len()
            )));
        }
        if !self.mask.is_empty() && self.mask.len() != n {
            return Err(Error::Batch(format!("mask has {} entries for {n} tokens", self.mask.len())));
        }
        let all = self.logp_policy.iter().chain(&self.logp_old).chain(&self.logp_ref);
        if all.clone().any(|v| !v.is_finite()) || !self.reward.is_finite() {
            return Err(Error::Batch("non-finite reward or log-prob".into()));
        }
        Ok(())
    }
}

/// All responses to one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub prompt_id: String,
    pub responses: Vec<Response>,
}

impl SampleGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.responses.len() < 2 {
            return Err(Error::Batch(format!(
                "group `{}` has {} responses, need at least 2",
                self.prompt_id,
                self.responses.len()
            )));
        }
        self.responses.iter().try_for_each(Response::validate)
    }

    /// Random group for property checks. Rewards are drawn from `{0, 0.5, 1}`
    /// so equal-reward groups occur.
    pub fn random<R: Rng + ?Sized>(id: usize, g: usize, max_len: usize, rng: &mut R) -> Self {
        let responses = (0..g)
            .map(|_| {
                let n = rng.gen_range(1..=max_len);
                let mut lp = || (0..n).map(|_| rng.gen_range(-4.0..-0.05)).collect::<Vec<f64>>();
                let (logp_policy, logp_old, logp_ref) = (lp(), lp(), lp());
                Response {
                    reward: f64::from(rng.gen_range(0..3u8)) * 0.5,
                    logp_policy,
                    logp_old,
                    logp_ref,
                    mask: (0..n).map(|_| rng.gen_bool(0.9)).collect(),
                }
            })
            .collect();
        Self { prompt_id: format!("p{id}"), responses }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Flat mean over every counted token in the batch.
    #[default]
    Token,
    /// Mean over responses of each response's own token mean.
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoHyper {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_clip: (f64, f64),
    /// Sampling temperature of the rollouts; recorded, not used.
    pub temperature: f64,
    /// Weight of the best-of-N NLL term on positive-advantage responses.
    pub bon_weight: f64,
    pub reduction: Reduction,
}

impl Default for GrpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.01,
            kl_clip: K3_CLIP,
            temperature: 1.0,
            bon_weight: 0.0,
            reduction: Reduction::Token,
        }
    }
}

impl GrpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::config("kl_beta", "must be >= 0"));
        }
        if !(self.kl_clip.0 <= self.kl_clip.1) {
            return Err(Error::config("kl_clip", "lower bound exceeds upper bound"));
        }
        if !(self.bon_weight >= 0.0) {
            return Err(Error::config("bon_weight", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// Set when every reward in the group is identical.
    pub degenerate: bool,
}

/// `(r − mean) / std` with the population std. Identical rewards give all
/// zeros and the degenerate flag.
pub fn group_advantages(rewards: &[f64]) -> Advantages {
    let g = rewards.len();
    if g == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return Advantages { values: vec![0.0; g], degenerate: true };
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt().max(STD_FLOOR);
    Advantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    }
}

/// `r − ln r − 1` with `r = π_ref / π_policy`, clipped into `[lo, hi]`.
pub fn k3_token(logp_policy: f64, logp_ref: f64, clip: (f64, f64)) -> f64 {
    let log_r = logp_ref - logp_policy;
    (log_r.exp() - log_r - 1.0).clamp(clip.0, clip.1)
}

pub fn k3_kl(logp_policy: &[f64], logp_ref: &[f64], clip: (f64, f64)) -> Vec<f64> {
    logp_policy
        .iter()
        .zip(logp_ref)
        .map(|(&p, &r)| k3_token(p, r, clip))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GrpoDiagnostics {
    pub mean_ratio: f64,
    /// Fraction of tokens with `|ρ − 1| > ε`.
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub surrogate: f64,
    pub bon_term: f64,
    pub n_tokens: usize,
}

/// Running sums under one reduction. Token mode keeps one flat pool; sequence
/// mode averages inside each response first.
struct Pool {
    reduction: Reduction,
    sum: f64,
    count: usize,
    seq_sum: f64,
    seq_count: usize,
}

impl Pool {
    fn new(reduction: Reduction) -> Self {
        Self { reduction, sum: 0.0, count: 0, seq_sum: 0.0, seq_count: 0 }
    }

    fn add_sequence(&mut self, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        self.sum += values.iter().sum::<f64>();
        self.count += values.len();
        self.seq_sum += values.iter().sum::<f64>() / values.len() as f64;
        self.seq_count += 1;
    }

    fn mean(&self) -> f64 {
        let (s, n) = match self.reduction {
            Reduction::Token => (self.sum, self.count),
            Reduction::SequenceMean => (self.seq_sum, self.seq_count),
        };
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// `−mean(min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)) + β·mean(k3) + w_bon·NLL(winners)`.
///
/// Means follow `hyper.reduction`; the default is a flat mean over all counted
/// tokens of all responses. The KL penalty is an added mean, not folded into
/// the clipped term.
pub fn grpo_token_loss(groups: &[SampleGroup], hyper: &GrpoHyper) -> Result<(f64, GrpoDiagnostics)> {
    hyper.validate()?;
    let eps = hyper.clip_eps;
    let mut surrogate = Pool::new(hyper.reduction);
    let mut kl = Pool::new(hyper.reduction);
    let mut ratio = Pool::new(Reduction::Token);
    let mut clipped = Pool::new(Reduction::Token);
    let mut bon = Pool::new(hyper.reduction);
    for group in groups {
        group.validate()?;
        let adv = group_advantages(&group.rewards());
        let mask = bon_mask(&adv.values);
        for ((resp, &a), &winner) in group.responses.iter().zip(&adv.values).zip(&mask) {
            let active: Vec<usize> = (0..resp.len()).filter(|&t| resp.active(t)).collect();
            let rho: Vec<f64> = active
                .iter()
                .map(|&t| (resp.logp_policy[t] - resp.logp_old[t]).exp())
                .collect();
            let surr: Vec<f64> = rho
                .iter()
                .map(|&r| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
                .collect();
            let k3: Vec<f64> = active
                .iter()
                .map(|&t| k3_token(resp.logp_policy[t], resp.logp_ref[t], hyper.kl_clip))
                .collect();
            surrogate.add_sequence(&surr);
            kl.add_sequence(&k3);
            ratio.add_sequence(&rho);
            let outside: Vec<f64> = rho.iter().map(|r| f64::from(u8::from((r - 1.0).abs() > eps))).collect();
            clipped.add_sequence(&outside);
            if winner {
                let nll: Vec<f64> = active.iter().map(|&t| -resp.logp_policy[t]).collect();
                bon.add_sequence(&nll);
            }
        }
    }
    let diag = GrpoDiagnostics {
        mean_ratio: ratio.mean(),
        clip_fraction: clipped.mean(),
        mean_kl: kl.mean(),
        surrogate: surrogate.mean(),
        bon_term: bon.mean(),
        n_tokens: ratio.count,
    };
    let loss = -diag.surrogate + hyper.kl_beta * diag.mean_kl + hyper.bon_weight * diag.bon_term;
    Ok((loss, diag))
}

/// Drops groups whose rewards are all equal; survivors keep their order.
pub fn dynamic_filter(groups: &[SampleGroup]) -> Vec<SampleGroup> {
    groups
        .iter()
        .filter(|g| !group_advantages(&g.rewards()).degenerate)
        .cloned()
        .collect()
}

/// `Â_i > 0`.
pub fn bon_mask(advantages: &[f64]) -> Vec<bool> {
    advantages.iter().map(|&a| a > 0.0).collect()
}

/// Reads one group per non-empty line.
pub fn read_groups_jsonl<R: BufRead>(reader: R) -> Result<Vec<SampleGroup>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Batch(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: SampleGroup =
            serde_json::from_str(&line).map_err(|e| Error::Batch(format!("line {}: {e}", i + 1)))?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_groups_jsonl<W: Write>(mut writer: W, groups: &[SampleGroup]) -> Result<()> {
    for g in groups {
        let line = serde_json::to_string(g).map_err(|e| Error::Batch(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::Batch(e.to_string()))?;
    }
    Ok(())
}
