//! Budgeted multi-agent adaptive branching search.
//!
//! Each expansion draws one agent by Thompson sampling over the agents'
//! aggregate posteriors, then descends from the root: at every node the
//! agent's GEN draw (optionally depth-weighted) competes with one CON draw
//! per child. GEN at the root produces a fresh proposal; GEN below the root
//! refines that node's answer using its feedback. The new node is
//! evaluated and its score is backed up along the selection path.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::bandit::{select_action, select_agent, Action, BetaPosterior, DepthSchedule};
use crate::environment::{public_reward, Evaluator, FeedbackReport, Task};
use crate::error::{Error, Result};
use crate::tree::{passing_nodes, NodeRef, SearchTree};
use crate::types::{
    AgentId, FreshContext, NodeId, NodeRecord, PromptContext, RefinementContext, Solution,
};
use crate::{derive_seed, SearchRng};
use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Pass/fail counts only.
    Binary,
    /// Counts plus the failing public cases with expected outputs.
    Structured,
}

/// Value backed up into the posteriors after an expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupScore {
    /// The binary reward.
    Reward,
    /// Fraction of public tests passed.
    PublicPassRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: usize,
    pub depth_guidance: bool,
    pub schedule: DepthSchedule,
    pub feedback_mode: FeedbackMode,
    pub training_mode: bool,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub backup: BackupScore,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: 60,
            depth_guidance: false,
            schedule: DepthSchedule::default(),
            feedback_mode: FeedbackMode::Structured,
            training_mode: false,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            backup: BackupScore::Reward,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("search.budget", "must be at least 1"));
        }
        if !(self.prior_alpha > 0.0 && self.prior_alpha.is_finite()) {
            return Err(Error::config("bandit.prior_alpha", "must be positive"));
        }
        if !(self.prior_beta > 0.0 && self.prior_beta.is_finite()) {
            return Err(Error::config("bandit.prior_beta", "must be positive"));
        }
        self.schedule.validate()
    }

    fn prior(&self) -> BetaPosterior {
        BetaPosterior::new(self.prior_alpha, self.prior_beta)
    }
}

/// An expansion whose agent call failed; the tree was left unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFailure {
    pub expansion: usize,
    pub agent: AgentId,
    pub parent: Option<NodeId>,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SearchTrace {
    pub task_id: u64,
    pub tree: SearchTree,
    pub records: Vec<NodeRecord>,
    pub depth_histogram: BTreeMap<usize, usize>,
    pub chosen_final: Option<NodeId>,
    pub failures: Vec<ExpansionFailure>,
}

impl SearchTrace {
    /// Expansions that produced a node.
    pub fn expansions(&self) -> usize {
        self.tree.len()
    }
}

fn agent_table(agents: &[Arc<dyn Agent>]) -> Result<BTreeMap<AgentId, Arc<dyn Agent>>> {
    if agents.is_empty() {
        return Err(Error::NoAgents);
    }
    let mut table = BTreeMap::new();
    for a in agents {
        if table.insert(a.id(), a.clone()).is_some() {
            return Err(Error::config(
                "agents",
                format!("duplicate agent id {}", a.id()),
            ));
        }
    }
    Ok(table)
}

/// Run one search over `task`.
pub fn run_search(
    task: &Task,
    agents: &[Arc<dyn Agent>],
    evaluator: &dyn Evaluator,
    config: &SearchConfig,
    rng: &mut SearchRng,
) -> Result<SearchTrace> {
    config.validate()?;
    let table = agent_table(agents)?;
    let ids: Vec<AgentId> = table.keys().copied().collect();
    let mut tree = SearchTree::new(&ids, config.prior());
    let sched = config.depth_guidance.then_some(&config.schedule);
    let mut failures = Vec::new();

    for expansion in 0..config.budget {
        let agent_id = select_agent(tree.agent_stats(), rng)?;
        let agent = &table[&agent_id];
        let depth_counts = tree.depth_counts();

        let mut at = NodeRef::Root;
        loop {
            match select_action(&tree, at, agent_id, &depth_counts, sched, rng) {
                Action::Gen => break,
                Action::Con(child) => at = NodeRef::Node(child),
            }
        }

        let (proposal, context) = match at {
            NodeRef::Root => {
                let ctx = PromptContext::Fresh(FreshContext {
                    task_id: task.id(),
                    prompt: task.prompt().clone(),
                });
                (agent.propose(task.view(), rng), ctx)
            }
            NodeRef::Node(pid) => {
                let parent = tree.node(pid);
                let full = evaluator.make_feedback(&parent.eval_report);
                let feedback: FeedbackReport = match config.feedback_mode {
                    FeedbackMode::Structured => full,
                    FeedbackMode::Binary => full.summary_only(),
                };
                let ctx = PromptContext::Refine(RefinementContext {
                    task_id: task.id(),
                    prompt: task.prompt().clone(),
                    parent_bits: parent.solution.bits.clone(),
                    parent_id: pid,
                    feedback: feedback.clone(),
                });
                (
                    agent.refine(task.view(), &parent.solution.bits, &feedback, rng),
                    ctx,
                )
            }
        };

        let proposal = match proposal {
            Ok(p) => p,
            Err(e) => {
                log::warn!(
                    "task {} expansion {expansion}: agent {agent_id} failed: {e}",
                    task.id()
                );
                failures.push(ExpansionFailure {
                    expansion,
                    agent: agent_id,
                    parent: match at {
                        NodeRef::Root => None,
                        NodeRef::Node(p) => Some(p),
                    },
                    error: e.to_string(),
                });
                continue;
            }
        };

        let solution = Solution {
            bits: proposal.bits.clone(),
            source_agent: agent_id,
            born_at: expansion,
        };
        let report = evaluator.evaluate(task, &solution)?;
        let reward = public_reward(&report, config.training_mode);
        let score = match config.backup {
            BackupScore::Reward => reward,
            BackupScore::PublicPassRate => report.public_pass_rate(),
        };
        let record = NodeRecord::new(0, agent_id, context, proposal.bits, proposal.trace, reward);
        let id = tree.add_node(at, solution, reward, report, record);
        tree.backup(id, agent_id, score)?;
    }

    let records = tree.nodes().iter().map(|n| n.record.clone()).collect();
    let depth_histogram = tree.depth_counts();
    let chosen_final = passing_nodes(&tree).last().copied();
    Ok(SearchTrace {
        task_id: task.id(),
        tree,
        records,
        depth_histogram,
        chosen_final,
        failures,
    })
}

/// `n` independent fresh proposals from one agent, all children of the
/// root. This is the flat sampling group used by the single-agent baseline.
pub fn run_flat_sampling(
    task: &Task,
    agent: &Arc<dyn Agent>,
    evaluator: &dyn Evaluator,
    n: usize,
    training_mode: bool,
    rng: &mut SearchRng,
) -> Result<SearchTrace> {
    let mut tree = SearchTree::new(&[agent.id()], BetaPosterior::default());
    let mut failures = Vec::new();
    for expansion in 0..n {
        let proposal = match agent.propose(task.view(), rng) {
            Ok(p) => p,
            Err(e) => {
                failures.push(ExpansionFailure {
                    expansion,
                    agent: agent.id(),
                    parent: None,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let solution = Solution {
            bits: proposal.bits.clone(),
            source_agent: agent.id(),
            born_at: expansion,
        };
        let report = evaluator.evaluate(task, &solution)?;
        let reward = public_reward(&report, training_mode);
        let ctx = PromptContext::Fresh(FreshContext {
            task_id: task.id(),
            prompt: task.prompt().clone(),
        });
        let record = NodeRecord::new(0, agent.id(), ctx, proposal.bits, proposal.trace, reward);
        let id = tree.add_node(NodeRef::Root, solution, reward, report, record);
        tree.backup(id, agent.id(), reward)?;
    }
    let records = tree.nodes().iter().map(|n| n.record.clone()).collect();
    let depth_histogram = tree.depth_counts();
    let chosen_final = passing_nodes(&tree).last().copied();
    Ok(SearchTrace {
        task_id: task.id(),
        tree,
        records,
        depth_histogram,
        chosen_final,
        failures,
    })
}

/// Search every task in parallel. Each run gets its own random stream
/// derived from `(master_seed, task id)`; output order follows `tasks`.
pub fn run_many(
    tasks: &[Task],
    agents: &[Arc<dyn Agent>],
    evaluator: &dyn Evaluator,
    config: &SearchConfig,
    master_seed: u64,
) -> Result<Vec<SearchTrace>> {
    tasks
        .par_iter()
        .map(|task| {
            let mut rng = SearchRng::seed_from_u64(derive_seed(master_seed, task.id()));
            run_search(task, agents, evaluator, config, &mut rng)
        })
        .collect()
}

/// Last node (highest id) that passes the public tests.
pub fn final_vanilla(trace: &SearchTrace) -> Option<&Solution> {
    passing_nodes(&trace.tree)
        .last()
        .map(|&id| &trace.tree.node(id).solution)
}

/// Fraction of nodes at each depth.
pub fn depth_stats(trace: &SearchTrace) -> Result<BTreeMap<usize, f64>> {
    let total: usize = trace.depth_histogram.values().sum();
    if total == 0 {
        return Err(Error::EmptyTrace);
    }
    Ok(trace
        .depth_histogram
        .iter()
        .map(|(&d, &c)| (d, c as f64 / total as f64))
        .collect())
}

/// Fraction of nodes at depth `>= min_depth`, pooled over traces.
pub fn deep_fraction(traces: &[SearchTrace], min_depth: usize) -> f64 {
    let (deep, total) = traces.iter().fold((0usize, 0usize), |(d, t), tr| {
        let deep: usize = tr.depth_histogram.range(min_depth..).map(|(_, c)| c).sum();
        (d + deep, t + tr.expansions())
    });
    if total == 0 {
        0.0
    } else {
        deep as f64 / total as f64
    }
}
