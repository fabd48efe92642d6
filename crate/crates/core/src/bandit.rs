//! Beta posteriors and two-level Thompson sampling.
//!
//! Model selection draws once from every agent's aggregate posterior and
//! picks the argmax. Node selection then compares one draw from the chosen
//! agent's GEN posterior at the current node against one draw from each
//! child's CON posterior. With a [`DepthSchedule`], the GEN draw is scaled
//! by `γ(d)^{c_d}` to push the search deeper once a level fills up.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{NodeRef, SearchTree};
use crate::types::{AgentId, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        BetaPosterior::new(1.0, 1.0)
    }
}

impl BetaPosterior {
    pub fn new(prior_alpha: f64, prior_beta: f64) -> Self {
        assert!(
            prior_alpha > 0.0
                && prior_beta > 0.0
                && prior_alpha.is_finite()
                && prior_beta.is_finite(),
            "Beta priors must be positive and finite"
        );
        BetaPosterior {
            alpha: prior_alpha,
            beta: prior_beta,
            prior_alpha,
            prior_beta,
        }
    }

    /// `alpha += score`, `beta += 1 - score`.
    pub fn update(&self, score: f64) -> Result<BetaPosterior> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(BetaPosterior {
            alpha: self.alpha + score,
            beta: self.beta + (1.0 - score),
            ..*self
        })
    }

    /// Number of scores absorbed since the prior.
    pub fn observations(&self) -> f64 {
        (self.alpha + self.beta) - (self.prior_alpha + self.prior_beta)
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Beta::new(self.alpha, self.beta)
            .expect("valid Beta parameters")
            .sample(rng)
    }
}

pub fn update_posterior(post: &BetaPosterior, score: f64) -> Result<BetaPosterior> {
    post.update(score)
}

/// Thompson model selection: one draw per agent, argmax, ties to the
/// lowest agent index.
pub fn select_agent<R: Rng + ?Sized>(
    stats: &BTreeMap<AgentId, BetaPosterior>,
    rng: &mut R,
) -> Result<AgentId> {
    if stats.is_empty() {
        return Err(Error::NoAgents);
    }
    if stats.len() == 1 {
        return Ok(*stats.keys().next().unwrap());
    }
    let mut best: Option<(AgentId, f64)> = None;
    for (&id, post) in stats {
        let x = post.sample(rng);
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((id, x));
        }
    }
    Ok(best.unwrap().0)
}

/// Depth-dependent decay `γ(d) = max(γ_min, γ₁·δ^{d-1})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSchedule {
    pub gamma1: f64,
    pub decay: f64,
    pub gamma_min: f64,
}

impl Default for DepthSchedule {
    fn default() -> Self {
        DepthSchedule {
            gamma1: 0.98,
            decay: 0.9,
            gamma_min: 0.5,
        }
    }
}

impl DepthSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > 0.0 && self.gamma1 < 1.0) {
            return Err(Error::config("bandit.gamma1", "must lie in (0, 1)"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("bandit.decay", "must lie in (0, 1]"));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma1) {
            return Err(Error::config("bandit.gamma_min", "must lie in (0, gamma1]"));
        }
        Ok(())
    }

    pub fn gamma(&self, depth: usize) -> f64 {
        let d = depth.max(1) as i32;
        (self.gamma1 * self.decay.powi(d - 1)).max(self.gamma_min)
    }
}

/// `γ(d)^{c_d}`.
pub fn depth_weight(depth: usize, count_at_depth: usize, sched: &DepthSchedule) -> f64 {
    sched
        .gamma(depth)
        .powi(count_at_depth.min(i32::MAX as usize) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Gen,
    Con(NodeId),
}

/// Core of node selection. Draws GEN first, then each child in the given
/// order; strict `>` keeps ties on GEN and then on the earliest child.
pub fn choose_action<R: Rng + ?Sized>(
    gen: &BetaPosterior,
    gen_weight: f64,
    children: &[(NodeId, BetaPosterior)],
    rng: &mut R,
) -> Action {
    if children.is_empty() {
        return Action::Gen;
    }
    let mut best = Action::Gen;
    let mut best_score = gen_weight * gen.sample(rng);
    for &(id, post) in children {
        let x = post.sample(rng);
        if x > best_score {
            best = Action::Con(id);
            best_score = x;
        }
    }
    best
}

/// GEN-vs-CON choice at `at` for `agent`. `depth_counts[d]` is the number
/// of nodes already present at depth `d`.
pub fn select_action<R: Rng + ?Sized>(
    tree: &SearchTree,
    at: NodeRef,
    agent: AgentId,
    depth_counts: &BTreeMap<usize, usize>,
    sched: Option<&DepthSchedule>,
    rng: &mut R,
) -> Action {
    let stats = tree.stats(at);
    let gen = tree.gen_posterior(at, agent);
    let weight = match sched {
        Some(s) => {
            let child_depth = tree.depth_of(at) + 1;
            depth_weight(
                child_depth,
                depth_counts.get(&child_depth).copied().unwrap_or(0),
                s,
            )
        }
        None => 1.0,
    };
    let children: Vec<(NodeId, BetaPosterior)> = stats
        .children
        .iter()
        .map(|&c| (c, tree.node(c).stats.con_posterior))
        .collect();
    choose_action(&gen, weight, &children, rng)
}
