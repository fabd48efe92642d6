//! The adaptive branching search tree.
//!
//! The root is a virtual depth-0 container without a solution. Expanded
//! nodes get ids `1, 2, ...` in expansion order and live at depth ≥ 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bandit::BetaPosterior;
use crate::environment::EvalReport;
use crate::error::{Error, Result};
use crate::types::{AgentId, NodeId, NodeRecord, Solution};

/// Bandit statistics attached to the root and to every node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    /// GEN posterior per agent at this node.
    pub gen_posteriors: BTreeMap<AgentId, BetaPosterior>,
    /// Scores observed anywhere in this node's subtree, itself included.
    pub con_posterior: BetaPosterior,
    pub children: Vec<NodeId>,
}

impl NodeStats {
    fn new(prior: BetaPosterior) -> Self {
        NodeStats {
            gen_posteriors: BTreeMap::new(),
            con_posterior: prior,
            children: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode {
    pub id: NodeId,
    /// `None` when the parent is the virtual root.
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub solution: Solution,
    pub reward: f64,
    pub eval_report: EvalReport,
    pub stats: NodeStats,
    pub record: NodeRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Root,
    Node(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTree {
    prior: BetaPosterior,
    root: NodeStats,
    nodes: Vec<SearchNode>,
    agent_stats: BTreeMap<AgentId, BetaPosterior>,
}

impl SearchTree {
    pub fn new(agents: &[AgentId], prior: BetaPosterior) -> Self {
        SearchTree {
            prior,
            root: NodeStats::new(prior),
            nodes: Vec::new(),
            agent_stats: agents.iter().map(|&a| (a, prior)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id - 1]
    }

    pub fn agent_stats(&self) -> &BTreeMap<AgentId, BetaPosterior> {
        &self.agent_stats
    }

    pub fn stats(&self, at: NodeRef) -> &NodeStats {
        match at {
            NodeRef::Root => &self.root,
            NodeRef::Node(id) => &self.node(id).stats,
        }
    }

    fn stats_mut(&mut self, at: NodeRef) -> &mut NodeStats {
        match at {
            NodeRef::Root => &mut self.root,
            NodeRef::Node(id) => &mut self.nodes[id - 1].stats,
        }
    }

    pub fn gen_posterior(&self, at: NodeRef, agent: AgentId) -> BetaPosterior {
        self.stats(at)
            .gen_posteriors
            .get(&agent)
            .copied()
            .unwrap_or(self.prior)
    }

    pub fn depth_of(&self, at: NodeRef) -> usize {
        match at {
            NodeRef::Root => 0,
            NodeRef::Node(id) => self.node(id).depth,
        }
    }

    /// Number of nodes at each depth.
    pub fn depth_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.depth).or_insert(0) += 1;
        }
        counts
    }

    /// Append a child of `parent`; the record's node id is overwritten with
    /// the assigned id.
    pub fn add_node(
        &mut self,
        parent: NodeRef,
        solution: Solution,
        reward: f64,
        eval_report: EvalReport,
        mut record: NodeRecord,
    ) -> NodeId {
        let id = self.nodes.len() + 1;
        let depth = self.depth_of(parent) + 1;
        record.node_id = id;
        self.nodes.push(SearchNode {
            id,
            parent: match parent {
                NodeRef::Root => None,
                NodeRef::Node(p) => Some(p),
            },
            depth,
            solution,
            reward,
            eval_report,
            stats: NodeStats::new(self.prior),
            record,
        });
        self.stats_mut(parent).children.push(id);
        id
    }

    /// Propagate `score` for node `new_id`, created by `agent` under
    /// `parent`: the parent's GEN posterior for `agent`, the CON posterior of
    /// every node from the root's child down to `new_id`, and the agent's
    /// aggregate posterior.
    pub fn backup(&mut self, new_id: NodeId, agent: AgentId, score: f64) -> Result<()> {
        let parent = match self.node(new_id).parent {
            Some(p) => NodeRef::Node(p),
            None => NodeRef::Root,
        };
        let prior = self.prior;
        let gen = self
            .stats_mut(parent)
            .gen_posteriors
            .entry(agent)
            .or_insert(prior);
        *gen = gen.update(score)?;

        let mut cur = Some(new_id);
        while let Some(id) = cur {
            let node = &mut self.nodes[id - 1];
            node.stats.con_posterior = node.stats.con_posterior.update(score)?;
            cur = node.parent;
        }

        let agg = self.agent_stats.entry(agent).or_insert(prior);
        *agg = agg.update(score)?;
        Ok(())
    }

    /// Number of parent links from `id` up to the virtual root.
    pub fn walk_depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = Some(id);
        while let Some(c) = cur {
            d += 1;
            cur = self.node(c).parent;
        }
        d
    }
}

/// One record per expanded node, in id order.
pub fn collect_records(tree: &SearchTree) -> Result<Vec<NodeRecord>> {
    if tree.is_empty() {
        return Err(Error::EmptyTree);
    }
    Ok(tree.nodes.iter().map(|n| n.record.clone()).collect())
}

/// Ids of nodes with reward 1, in id order.
pub fn passing_nodes(tree: &SearchTree) -> Vec<NodeId> {
    tree.nodes
        .iter()
        .filter(|n| n.reward == 1.0)
        .map(|n| n.id)
        .collect()
}

/// One line of a tree trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLine {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub agent: AgentId,
    pub reward: f64,
    pub bits: String,
    pub eval: EvalSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub passed_public: usize,
    pub total_public: usize,
    pub passed_private: usize,
    pub total_private: usize,
}

impl SearchTree {
    pub fn node_lines(&self) -> Vec<NodeLine> {
        self.nodes
            .iter()
            .map(|n| NodeLine {
                id: n.id,
                parent: n.parent,
                depth: n.depth,
                agent: n.solution.source_agent,
                reward: n.reward,
                bits: n.solution.bits.to_hex(),
                eval: EvalSummary {
                    passed_public: n.eval_report.passed_public,
                    total_public: n.eval_report.total_public,
                    passed_private: n.eval_report.passed_private,
                    total_private: n.eval_report.total_private,
                },
            })
            .collect()
    }

    /// Write the tree as JSON lines, one node per line, in id order.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for line in self.node_lines() {
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable"))
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<NodeLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
