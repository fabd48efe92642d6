//! Policy-optimization kernels: group advantages, importance ratios,
//! length shaping, the truncated inference/training correction, the k3 KL
//! estimator, and the two per-agent clipped objectives.
//!
//! Both objectives share one skeleton. For every agent buffer `B_j` the
//! per-token terms of its records are summed and divided by the total
//! token count of that buffer; the buffer totals are then summed over
//! agents. The token-level objective clips the per-token ratio
//! `exp(logp_new - logp_old)`. The sequence-level objective clips the
//! geometric-mean ratio of the whole output instead and scales every
//! token term by the truncated inference/training probability ratio.

use serde::{Deserialize, Serialize};

use crate::agents::BeliefPolicy;
use crate::error::{Error, Result};
use crate::types::{LogProbTrace, NodeRecord};

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

/// How the inference/training mismatch enters the sequence objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TisMode {
    /// `min(exp(Σ logp_infer - logp_old), tis_clip)`.
    TruncatedRatio,
    /// The raw log ratio `Σ (logp_infer - logp_old)`.
    LogRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL coefficient β.
    pub beta_kl: f64,
    pub l_max: f64,
    pub l_cache: f64,
    pub tis_clip: f64,
    pub tis_mode: TisMode,
    pub std_floor: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            eps_low: 0.2,
            eps_high: 0.28,
            beta_kl: 1e-3,
            l_max: 4096.0,
            l_cache: 1024.0,
            tis_clip: 2.0,
            tis_mode: TisMode::TruncatedRatio,
            std_floor: DEFAULT_STD_FLOOR,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0) {
            return Err(Error::config("train.eps_low", "must be positive"));
        }
        if !(self.eps_high > 0.0) {
            return Err(Error::config("train.eps_high", "must be positive"));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(Error::config("train.kl_coef", "must be non-negative"));
        }
        if !(self.l_cache > 0.0 && self.l_cache < self.l_max) {
            return Err(Error::config("train.l_cache", "must lie in (0, l_max)"));
        }
        if !(self.tis_clip > 0.0) {
            return Err(Error::config("train.tis_clip", "must be positive"));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::config("train.std_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Z-score against the whole group with population std. A group whose std
/// falls below `std_floor` gets all-zero advantages.
pub fn tree_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < std_floor {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Flat-group z-score.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    tree_advantages(rewards, DEFAULT_STD_FLOOR)
}

pub fn token_ratio(trace: &LogProbTrace, t: usize) -> Result<f64> {
    let len = trace.token_count();
    if t >= len {
        return Err(Error::IndexOutOfRange { index: t, len });
    }
    Ok((trace.logp_new[t] - trace.logp_old[t]).exp())
}

fn masked_tokens(trace: &LogProbTrace) -> impl Iterator<Item = usize> + '_ {
    (0..trace.token_count()).filter(|&t| trace.action_mask[t])
}

fn masked_len(trace: &LogProbTrace) -> usize {
    trace.action_mask.iter().filter(|m| **m).count()
}

/// Geometric mean of the per-token ratios over the unmasked tokens.
pub fn gspo_ratio(trace: &LogProbTrace) -> f64 {
    let n = masked_len(trace);
    if n == 0 {
        return 1.0;
    }
    let s: f64 = masked_tokens(trace)
        .map(|t| trace.logp_new[t] - trace.logp_old[t])
        .sum();
    (s / n as f64).exp()
}

/// Piecewise length penalty in `[-1, 0]`.
pub fn overlong_penalty(len: usize, params: &LossParams) -> f64 {
    let y = len as f64;
    let soft = params.l_max - params.l_cache;
    if y <= soft {
        0.0
    } else if y <= params.l_max {
        (soft - y) / params.l_cache
    } else {
        -1.0
    }
}

/// Sequence log ratio between the inference engine and the training engine.
pub fn vllm_kl(trace: &LogProbTrace) -> f64 {
    masked_tokens(trace)
        .map(|t| trace.logp_infer[t] - trace.logp_old[t])
        .sum()
}

/// Prefactor applied to each sequence term of the sequence objective.
pub fn tis_factor(trace: &LogProbTrace, params: &LossParams) -> f64 {
    let log_ratio = vllm_kl(trace);
    match params.tis_mode {
        TisMode::TruncatedRatio => log_ratio.exp().min(params.tis_clip),
        TisMode::LogRatio => log_ratio,
    }
}

fn k3(logp_new: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_new;
    x.exp() - x - 1.0
}

/// `d k3 / d logp_new`.
fn dk3(logp_new: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_new).exp()
}

/// Mean k3 estimate of KL(new ‖ ref) over the unmasked tokens.
pub fn kl_k3(trace: &LogProbTrace) -> f64 {
    let n = masked_len(trace);
    if n == 0 {
        return 0.0;
    }
    masked_tokens(trace)
        .map(|t| k3(trace.logp_new[t], trace.logp_ref[t]))
        .sum::<f64>()
        / n as f64
}

/// `min(r·A, clip(r, 1-ε_low, 1+ε_high)·A)` and its derivative in `r`.
fn clipped_surrogate(ratio: f64, adv: f64, params: &LossParams) -> (f64, f64) {
    let lo = 1.0 - params.eps_low;
    let hi = 1.0 + params.eps_high;
    let clipped = ratio.clamp(lo, hi);
    let raw = ratio * adv;
    let cl = clipped * adv;
    if raw <= cl {
        (raw, adv)
    } else {
        (cl, if ratio < lo || ratio > hi { 0.0 } else { adv })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Per-token ratio, no length shaping, no inference correction.
    Token,
    /// Sequence ratio, length shaping, truncated inference correction.
    Sequence,
}

/// Per-record contribution before the per-agent token normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordTerm {
    pub node_id: usize,
    pub tokens: usize,
    /// Σ_t of the clipped surrogate.
    pub surrogate: f64,
    /// Σ_t of the per-token k3 values.
    pub kl: f64,
    /// Prefactor applied to the record's terms (1 for the token objective).
    pub prefactor: f64,
    /// `prefactor · (surrogate - β·kl)`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// One entry per record, grouped in input order.
    pub terms: Vec<RecordTerm>,
}

fn record_term(rec: &NodeRecord, kind: ObjectiveKind, params: &LossParams) -> Result<RecordTerm> {
    let adv = rec
        .advantage()
        .ok_or(Error::MissingAdvantage(rec.node_id))?;
    let tr = &rec.trace;
    let tokens = masked_len(tr);
    let (surrogate, prefactor) = match kind {
        ObjectiveKind::Token => {
            let s = masked_tokens(tr)
                .map(|t| clipped_surrogate((tr.logp_new[t] - tr.logp_old[t]).exp(), adv, params).0)
                .sum::<f64>();
            (s, 1.0)
        }
        ObjectiveKind::Sequence => {
            let s = gspo_ratio(tr);
            let per_token = clipped_surrogate(s, adv, params).0;
            (per_token * tokens as f64, tis_factor(tr, params))
        }
    };
    let kl: f64 = masked_tokens(tr)
        .map(|t| k3(tr.logp_new[t], tr.logp_ref[t]))
        .sum();
    Ok(RecordTerm {
        node_id: rec.node_id,
        tokens,
        surrogate,
        kl,
        prefactor,
        total: prefactor * (surrogate - params.beta_kl * kl),
    })
}

fn objective<G: AsRef<[NodeRecord]>>(
    groups: &[G],
    kind: ObjectiveKind,
    params: &LossParams,
) -> Result<ObjectiveValue> {
    let mut value = 0.0;
    let mut terms = Vec::new();
    for g in groups {
        let records = g.as_ref();
        let group_terms = records
            .iter()
            .map(|r| record_term(r, kind, params))
            .collect::<Result<Vec<_>>>()?;
        let tokens: usize = group_terms.iter().map(|t| t.tokens).sum();
        if tokens > 0 {
            value += group_terms.iter().map(|t| t.total).sum::<f64>() / tokens as f64;
        }
        terms.extend(group_terms);
    }
    Ok(ObjectiveValue { value, terms })
}

/// Token-level clipped objective, one group per agent buffer.
pub fn mars2_objective<G: AsRef<[NodeRecord]>>(
    groups: &[G],
    params: &LossParams,
) -> Result<ObjectiveValue> {
    objective(groups, ObjectiveKind::Token, params)
}

/// Sequence-level clipped objective with the inference/training prefactor.
/// Length shaping happens when advantages are assigned, see
/// [`assign_advantages`].
pub fn mars2plus_objective<G: AsRef<[NodeRecord]>>(
    groups: &[G],
    params: &LossParams,
) -> Result<ObjectiveValue> {
    objective(groups, ObjectiveKind::Sequence, params)
}

pub fn evaluate_objective<G: AsRef<[NodeRecord]>>(
    kind: ObjectiveKind,
    groups: &[G],
    params: &LossParams,
) -> Result<ObjectiveValue> {
    objective(groups, kind, params)
}

/// Rewards after length shaping: `r + overlong_penalty(|o|)`.
pub fn shaped_rewards(records: &[NodeRecord], params: &LossParams) -> Vec<f64> {
    records
        .iter()
        .map(|r| r.reward + overlong_penalty(r.token_count(), params))
        .collect()
}

/// Assign z-scored advantages over the whole group (one search tree or one
/// flat sample group). The sequence objective shapes rewards first.
pub fn assign_advantages(
    records: &mut [NodeRecord],
    kind: ObjectiveKind,
    params: &LossParams,
) -> Result<()> {
    let rewards = match kind {
        ObjectiveKind::Token => records.iter().map(|r| r.reward).collect(),
        ObjectiveKind::Sequence => shaped_rewards(records, params),
    };
    let adv = tree_advantages(&rewards, params.std_floor);
    for (r, a) in records.iter_mut().zip(adv) {
        r.set_advantage(a)?;
    }
    Ok(())
}

/// A differentiable policy that can rescore stored outputs.
pub trait TokenPolicy {
    fn num_params(&self) -> usize;

    fn token_logprobs(&self, record: &NodeRecord) -> Vec<f64>;

    /// Per token, the `(parameter, derivative)` pairs of its log-probability.
    fn token_logprob_grads(&self, record: &NodeRecord) -> Vec<Vec<(usize, f64)>>;
}

impl TokenPolicy for BeliefPolicy {
    fn num_params(&self) -> usize {
        self.len()
    }

    fn token_logprobs(&self, record: &NodeRecord) -> Vec<f64> {
        BeliefPolicy::token_logprobs(
            self,
            record.context.prompt(),
            &record.output,
            record.token_count(),
        )
    }

    fn token_logprob_grads(&self, record: &NodeRecord) -> Vec<Vec<(usize, f64)>> {
        BeliefPolicy::token_logprob_grads(
            self,
            record.context.prompt(),
            &record.output,
            record.token_count(),
        )
    }
}

/// Copy of `records` with `logp_new` recomputed under `policy`.
pub fn rescore<P: TokenPolicy>(records: &[NodeRecord], policy: &P) -> Vec<NodeRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.trace.logp_new = policy.token_logprobs(&r);
            r
        })
        .collect()
}

/// Objective value of one agent's batch under `policy` and its analytic
/// gradient with respect to the policy parameters.
pub fn objective_gradient<P: TokenPolicy>(
    kind: ObjectiveKind,
    records: &[NodeRecord],
    params: &LossParams,
    policy: &P,
) -> Result<(f64, Vec<f64>)> {
    let rescored = rescore(records, policy);
    let value = objective(&[&rescored[..]], kind, params)?.value;
    let mut grad = vec![0.0; policy.num_params()];
    let total_tokens: usize = rescored.iter().map(|r| masked_len(&r.trace)).sum();
    if total_tokens == 0 {
        return Ok((value, grad));
    }
    let norm = 1.0 / total_tokens as f64;

    for rec in &rescored {
        let adv = rec
            .advantage()
            .ok_or(Error::MissingAdvantage(rec.node_id))?;
        let tr = &rec.trace;
        let dlogp = policy.token_logprob_grads(rec);
        let beta = params.beta_kl;
        match kind {
            ObjectiveKind::Token => {
                for t in masked_tokens(tr) {
                    let w = (tr.logp_new[t] - tr.logp_old[t]).exp();
                    let (_, dg) = clipped_surrogate(w, adv, params);
                    // d/dlogp_new of [g(w) - β k3]
                    let coef = dg * w - beta * dk3(tr.logp_new[t], tr.logp_ref[t]);
                    for &(i, d) in &dlogp[t] {
                        grad[i] += norm * coef * d;
                    }
                }
            }
            ObjectiveKind::Sequence => {
                let len = masked_len(tr);
                if len == 0 {
                    continue;
                }
                let s = gspo_ratio(tr);
                let (_, dg) = clipped_surrogate(s, adv, params);
                let pre = tis_factor(tr, params);
                // L·g(s): ds/dlogp_new_t = s / L, so the L cancels.
                let seq_coef = dg * s;
                for t in masked_tokens(tr) {
                    let coef = pre * (seq_coef - beta * dk3(tr.logp_new[t], tr.logp_ref[t]));
                    for &(i, d) in &dlogp[t] {
                        grad[i] += norm * coef * d;
                    }
                }
            }
        }
    }
    Ok((value, grad))
}
