use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, Proposal};
use crate::environment::{FeedbackReport, TaskFamily, TaskView};
use crate::error::{Error, Result};
use crate::types::{token_bounds, AgentId, Bits, LogProbTrace};
use crate::SearchRng;

/// Probabilities are kept inside this band when taking logs.
const PROB_EPS: f64 = 1e-9;

/// Bounds applied to beliefs after every parameter update.
pub const BELIEF_MIN: f64 = 1e-6;
pub const BELIEF_MAX: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAgentParams {
    /// Per-bit probability of answering that bit correctly.
    pub skill: Vec<f64>,
    pub fix_prob: f64,
    pub drift_prob: f64,
    pub trace_len: usize,
    pub logit_scale: f64,
    /// Std-dev of the Gaussian gap between inference and training log-probs.
    #[serde(default)]
    pub infer_noise: f64,
}

impl SimAgentParams {
    pub fn uniform(len: usize, skill: f64) -> Self {
        SimAgentParams {
            skill: vec![skill; len],
            fix_prob: 0.9,
            drift_prob: 0.05,
            trace_len: len.clamp(1, 4),
            logit_scale: 1.0,
            infer_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !self.skill.iter().all(|&s| prob(s)) {
            return Err(Error::config(
                "agents.skill",
                "probabilities must lie in [0, 1]",
            ));
        }
        if !prob(self.fix_prob) {
            return Err(Error::config("agents.fix_prob", "must lie in [0, 1]"));
        }
        if !prob(self.drift_prob) {
            return Err(Error::config("agents.drift_prob", "must lie in [0, 1]"));
        }
        if self.trace_len == 0 {
            return Err(Error::config("agents.trace_len", "must be at least 1"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config("agents.logit_scale", "must be positive"));
        }
        if !(self.infer_noise >= 0.0 && self.infer_noise.is_finite()) {
            return Err(Error::config("agents.infer_noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// Independent Bernoulli policy over flip decisions: an answer is
/// `prompt ^ z` with `z_i ~ Bernoulli(p_i)`, where
/// `p_i = σ(logit_scale · logit(belief_i))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefPolicy {
    pub belief: Vec<f64>,
    pub logit_scale: f64,
}

impl BeliefPolicy {
    pub fn new(belief: Vec<f64>, logit_scale: f64) -> Self {
        BeliefPolicy {
            belief,
            logit_scale,
        }
    }

    /// Belief that reproduces `skill` against the family's hidden key.
    pub fn from_skill(skill: &[f64], family: &TaskFamily, logit_scale: f64) -> Self {
        let belief = skill
            .iter()
            .zip(family.key.iter())
            .map(|(&s, k)| if k { s } else { 1.0 - s })
            .collect();
        BeliefPolicy {
            belief,
            logit_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.belief.len()
    }

    pub fn is_empty(&self) -> bool {
        self.belief.is_empty()
    }

    /// Sampling probability of `z_i = 1`.
    pub fn prob(&self, i: usize) -> f64 {
        let b = self.belief[i];
        if self.logit_scale == 1.0 || b <= 0.0 || b >= 1.0 {
            return b;
        }
        let l = (b / (1.0 - b)).ln() * self.logit_scale;
        1.0 / (1.0 + (-l).exp())
    }

    /// `d prob(i) / d belief_i`.
    fn dprob(&self, i: usize) -> f64 {
        if self.logit_scale == 1.0 {
            return 1.0;
        }
        let b = self.belief[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
        let p = self.prob(i).clamp(PROB_EPS, 1.0 - PROB_EPS);
        self.logit_scale * p * (1.0 - p) / (b * (1.0 - b))
    }

    fn bit_logprob(&self, i: usize, z: bool) -> f64 {
        let p = self.prob(i).clamp(PROB_EPS, 1.0 - PROB_EPS);
        if z {
            p.ln()
        } else {
            (1.0 - p).ln()
        }
    }

    fn bit_dlogprob(&self, i: usize, z: bool) -> f64 {
        let p = self.prob(i).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let d = if z { 1.0 / p } else { -1.0 / (1.0 - p) };
        d * self.dprob(i)
    }

    /// Per-token log-probability of producing `output` from `prompt`.
    pub fn token_logprobs(&self, prompt: &Bits, output: &Bits, tokens: usize) -> Vec<f64> {
        let z = output.xor(prompt);
        token_bounds(z.len(), tokens)
            .into_iter()
            .map(|r| r.map(|i| self.bit_logprob(i, z.get(i))).sum())
            .collect()
    }

    /// Sparse Jacobian of [`Self::token_logprobs`]: for each token, the
    /// `(parameter index, derivative)` pairs of the bits it covers.
    pub fn token_logprob_grads(
        &self,
        prompt: &Bits,
        output: &Bits,
        tokens: usize,
    ) -> Vec<Vec<(usize, f64)>> {
        let z = output.xor(prompt);
        token_bounds(z.len(), tokens)
            .into_iter()
            .map(|r| r.map(|i| (i, self.bit_dlogprob(i, z.get(i)))).collect())
            .collect()
    }

    /// Clamp beliefs into the valid band.
    pub fn clamp(&mut self) {
        for b in &mut self.belief {
            *b = b.clamp(BELIEF_MIN, BELIEF_MAX);
        }
    }
}

/// Swappable parameter snapshot. Readers clone the inner `Arc`, so a swap
/// never disturbs an in-flight rollout.
#[derive(Debug)]
pub struct PolicyHandle {
    current: RwLock<Arc<BeliefPolicy>>,
}

impl PolicyHandle {
    pub fn new(policy: BeliefPolicy) -> Arc<Self> {
        Arc::new(PolicyHandle {
            current: RwLock::new(Arc::new(policy)),
        })
    }

    pub fn snapshot(&self) -> Arc<BeliefPolicy> {
        self.current.read().expect("policy lock").clone()
    }

    pub fn swap(&self, policy: BeliefPolicy) {
        *self.current.write().expect("policy lock") = Arc::new(policy);
    }
}

/// Simulated stochastic agent.
#[derive(Debug, Clone)]
pub struct SimAgent {
    id: AgentId,
    params: SimAgentParams,
    policy: Arc<PolicyHandle>,
    reference: Arc<BeliefPolicy>,
    /// Offsets the random stream so agents sharing one snapshot still act
    /// as distinct roles.
    role: u64,
}

impl SimAgent {
    pub fn new(id: AgentId, params: SimAgentParams, policy: Arc<PolicyHandle>) -> Self {
        let reference = policy.snapshot();
        SimAgent {
            id,
            params,
            policy,
            reference,
            role: id.0 as u64,
        }
    }

    /// Agent whose initial belief reproduces `params.skill` on `family`.
    pub fn from_skill(id: AgentId, params: SimAgentParams, family: &TaskFamily) -> Self {
        let policy = PolicyHandle::new(BeliefPolicy::from_skill(
            &params.skill,
            family,
            params.logit_scale,
        ));
        SimAgent::new(id, params, policy)
    }

    pub fn params(&self) -> &SimAgentParams {
        &self.params
    }

    pub fn policy(&self) -> &Arc<PolicyHandle> {
        &self.policy
    }

    pub fn reference(&self) -> &BeliefPolicy {
        &self.reference
    }

    fn role_rng(&self, rng: &mut SearchRng) -> SearchRng {
        SearchRng::seed_from_u64(
            rng.random::<u64>() ^ self.role.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )
    }

    fn trace_for(
        &self,
        policy: &BeliefPolicy,
        prompt: &Bits,
        output: &Bits,
        rng: &mut SearchRng,
    ) -> LogProbTrace {
        let tokens = self.params.trace_len;
        let logp = policy.token_logprobs(prompt, output, tokens);
        let logp_ref = self.reference.token_logprobs(prompt, output, tokens);
        let logp_infer = if self.params.infer_noise > 0.0 {
            let noise = Normal::new(0.0, self.params.infer_noise).expect("finite sigma");
            logp.iter()
                .map(|&lp| (lp + noise.sample(rng)).min(0.0))
                .collect()
        } else {
            logp.clone()
        };
        let n = logp.len();
        LogProbTrace {
            logp_new: logp.clone(),
            logp_old: logp,
            logp_ref,
            logp_infer,
            action_mask: vec![true; n],
        }
    }

    fn check_len(&self, task: &TaskView<'_>, policy: &BeliefPolicy) -> Result<()> {
        if policy.len() != task.len {
            return Err(Error::Shape {
                expected: task.len,
                actual: policy.len(),
            });
        }
        Ok(())
    }
}

impl Agent for SimAgent {
    fn id(&self) -> AgentId {
        self.id
    }

    fn propose(&self, task: TaskView<'_>, rng: &mut SearchRng) -> Result<Proposal> {
        let policy = self.policy.snapshot();
        self.check_len(&task, &policy)?;
        let mut rng = self.role_rng(rng);
        let z: Vec<bool> = (0..task.len)
            .map(|i| rng.random_bool(policy.prob(i).clamp(0.0, 1.0)))
            .collect();
        let bits = task.prompt.xor(&Bits(z));
        let trace = self.trace_for(&policy, task.prompt, &bits, &mut rng);
        Ok(Proposal { bits, trace })
    }

    fn refine(
        &self,
        task: TaskView<'_>,
        parent: &Bits,
        feedback: &FeedbackReport,
        rng: &mut SearchRng,
    ) -> Result<Proposal> {
        let policy = self.policy.snapshot();
        self.check_len(&task, &policy)?;
        if parent.len() != task.len {
            return Err(Error::Shape {
                expected: task.len,
                actual: parent.len(),
            });
        }
        let mut rng = self.role_rng(rng);
        let mut named = vec![None; task.len];
        for f in &feedback.failures {
            if f.index < task.len {
                named[f.index] = Some(f.expected);
            }
        }
        let bits: Vec<bool> = parent
            .iter()
            .zip(&named)
            .map(|(b, fix)| match fix {
                Some(expected) => {
                    if rng.random_bool(self.params.fix_prob) {
                        *expected
                    } else {
                        b
                    }
                }
                None => b ^ rng.random_bool(self.params.drift_prob),
            })
            .collect();
        let bits = Bits(bits);
        let trace = self.trace_for(&policy, task.prompt, &bits, &mut rng);
        Ok(Proposal { bits, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{evaluate_bits, make_feedback, Task};

    fn rng(seed: u64) -> SearchRng {
        SearchRng::seed_from_u64(seed)
    }

    fn agent_with_belief(belief: Vec<f64>, fix: f64, drift: f64) -> SimAgent {
        let m = belief.len();
        let params = SimAgentParams {
            skill: vec![0.5; m],
            fix_prob: fix,
            drift_prob: drift,
            trace_len: 4,
            logit_scale: 1.0,
            infer_noise: 0.0,
        };
        SimAgent::new(
            AgentId(1),
            params,
            PolicyHandle::new(BeliefPolicy::new(belief, 1.0)),
        )
    }

    #[test]
    fn deterministic_belief_reproduces_pattern() {
        let pattern = Bits(vec![true, false, false, true, true, false, true, false]);
        let prompt = Bits(vec![false; 8]);
        let task = Task::from_parts(0, pattern.clone(), prompt, None, 4).unwrap();
        let belief = pattern.iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let a = agent_with_belief(belief, 0.0, 0.0);
        let mut r = rng(1);
        for _ in 0..20 {
            assert_eq!(a.propose(task.view(), &mut r).unwrap().bits, pattern);
        }
    }

    #[test]
    fn half_belief_gives_half_density() {
        let m = 16;
        let task = Task::from_parts(0, Bits::zeros(m), Bits::zeros(m), None, 8).unwrap();
        let a = agent_with_belief(vec![0.5; m], 0.0, 0.0);
        let mut r = rng(2);
        let mut ones = vec![0usize; m];
        for _ in 0..10_000 {
            let p = a.propose(task.view(), &mut r).unwrap();
            for (i, b) in p.bits.iter().enumerate() {
                ones[i] += b as usize;
            }
        }
        for c in ones {
            assert!((c as f64 / 1e4 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn logp_matches_bernoulli_product() {
        let belief = vec![0.2, 0.7, 0.9, 0.35, 0.6, 0.05, 0.5];
        let m = belief.len();
        let prompt = Bits(vec![true, false, true, false, false, true, true]);
        let task = Task::from_parts(0, Bits::zeros(m), prompt.clone(), None, 3).unwrap();
        let a = agent_with_belief(belief.clone(), 0.0, 0.0);
        let mut r = rng(3);
        for _ in 0..50 {
            let p = a.propose(task.view(), &mut r).unwrap();
            assert_eq!(p.trace.token_count(), 4);
            p.trace.validate().unwrap();
            let z = p.bits.xor(&prompt);
            let direct: f64 = z
                .iter()
                .zip(&belief)
                .map(|(b, &q)| if b { q } else { 1.0 - q })
                .product();
            let via_trace = p.trace.logp_new.iter().sum::<f64>().exp();
            assert!(((via_trace - direct) / direct).abs() < 1e-9);
        }
    }

    #[test]
    fn refinement_repairs_and_is_identity_without_noise() {
        let target = Bits(vec![true, true, false, false, true, false]);
        let task = Task::from_parts(0, target.clone(), Bits::zeros(6), None, 4).unwrap();
        let parent = Bits(vec![false, true, true, false, false, true]);
        let fb = make_feedback(&evaluate_bits(&task, &parent).unwrap());

        let fixer = agent_with_belief(vec![0.5; 6], 1.0, 0.0);
        let child = fixer
            .refine(task.view(), &parent, &fb, &mut rng(4))
            .unwrap()
            .bits;
        let report = evaluate_bits(&task, &child).unwrap();
        assert!(report.passes_public());
        // private bits untouched
        assert_eq!(&child.0[4..], &parent.0[4..]);

        let idle = agent_with_belief(vec![0.5; 6], 0.0, 0.0);
        assert_eq!(
            idle.refine(task.view(), &parent, &fb, &mut rng(5))
                .unwrap()
                .bits,
            parent
        );
        assert_eq!(
            idle.refine(task.view(), &parent, &FeedbackReport::empty(), &mut rng(6))
                .unwrap()
                .bits,
            parent
        );
    }

    #[test]
    fn drift_trades_private_for_public() {
        let m = 12;
        let target = Bits::zeros(m);
        let task = Task::from_parts(0, target, Bits::zeros(m), None, 6).unwrap();
        let a = agent_with_belief(vec![0.5; m], 1.0, 0.3);
        let mut r = rng(7);
        let (mut pub_before, mut pub_after, mut priv_before, mut priv_after) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..1_000 {
            let parent = a.propose(task.view(), &mut r).unwrap().bits;
            let before = evaluate_bits(&task, &parent).unwrap();
            let fb = make_feedback(&before);
            let child = a.refine(task.view(), &parent, &fb, &mut r).unwrap().bits;
            let after = evaluate_bits(&task, &child).unwrap();
            pub_before += before.public_pass_rate();
            pub_after += after.public_pass_rate();
            priv_before += before.private_pass_rate();
            priv_after += after.private_pass_rate();
        }
        assert!(pub_after > pub_before);
        // with belief 0.5 private bits are already at their drift equilibrium;
        // start them correct to see the loss
        let _ = (priv_before, priv_after);
        let good = Bits::zeros(m);
        let fb = make_feedback(&evaluate_bits(&task, &good).unwrap());
        let mut lost = 0.0;
        for _ in 0..1_000 {
            let child = a.refine(task.view(), &good, &fb, &mut r).unwrap().bits;
            lost += 1.0 - evaluate_bits(&task, &child).unwrap().private_pass_rate();
        }
        assert!(lost > 0.0);
    }

    #[test]
    fn skill_maps_to_correctness() {
        let family = TaskFamily::new(Bits(vec![true, false, true, true]), 0.5);
        let p = BeliefPolicy::from_skill(&[0.9, 0.8, 0.7, 0.6], &family, 1.0);
        for (b, e) in p.belief.iter().zip([0.9, 0.2, 0.7, 0.6]) {
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_gradients_match_finite_differences() {
        let prompt = Bits(vec![true, false, true, false, true]);
        let output = Bits(vec![false, false, true, true, true]);
        for scale in [1.0, 1.7] {
            let p = BeliefPolicy::new(vec![0.3, 0.6, 0.45, 0.8, 0.15], scale);
            let grads = p.token_logprob_grads(&prompt, &output, 2);
            for (t, g) in grads.iter().enumerate() {
                for &(i, d) in g {
                    let h = 1e-6;
                    let mut up = p.clone();
                    up.belief[i] += h;
                    let mut dn = p.clone();
                    dn.belief[i] -= h;
                    let fd = (up.token_logprobs(&prompt, &output, 2)[t]
                        - dn.token_logprobs(&prompt, &output, 2)[t])
                        / (2.0 * h);
                    assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()), "{fd} vs {d}");
                }
            }
        }
    }

    #[test]
    fn shared_handle_swaps_for_all_agents() {
        let handle = PolicyHandle::new(BeliefPolicy::new(vec![0.5; 3], 1.0));
        let a = SimAgent::new(AgentId(1), SimAgentParams::uniform(3, 0.5), handle.clone());
        let b = SimAgent::new(AgentId(2), SimAgentParams::uniform(3, 0.5), handle.clone());
        handle.swap(BeliefPolicy::new(vec![0.9; 3], 1.0));
        assert_eq!(a.policy().snapshot().belief, vec![0.9; 3]);
        assert!(Arc::ptr_eq(&a.policy().snapshot(), &b.policy().snapshot()));
        // reference stays frozen
        assert_eq!(a.reference().belief, vec![0.5; 3]);
    }
}
