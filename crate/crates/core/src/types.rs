//! Domain types shared across the engine.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::environment::FeedbackReport;
use crate::error::{Error, Result};

/// Fixed-length bit vector. Bit `i` is the answer to test case `i`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Bits(pub Vec<bool>);

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Bits(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn xor(&self, other: &Bits) -> Bits {
        assert_eq!(self.len(), other.len(), "xor of unequal lengths");
        Bits(self.iter().zip(other.iter()).map(|(a, b)| a ^ b).collect())
    }

    pub fn complement(&self) -> Bits {
        Bits(self.iter().map(|b| !b).collect())
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// Hex encoding, most significant bit first within each nibble. The
    /// final nibble is zero-padded on the right.
    pub fn to_hex(&self) -> String {
        self.0
            .chunks(4)
            .map(|chunk| {
                let v = chunk
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (i, b)| acc | ((*b as u32) << (3 - i)));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Bits> {
        let hex = hex.trim();
        if hex.len() != len.div_ceil(4) {
            return Err(Error::InvalidData(format!(
                "hex string of {} digits cannot hold exactly {len} bits",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(len);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::InvalidData(format!("invalid hex digit `{c}`")))?;
            for i in 0..4 {
                if bits.len() < len {
                    bits.push(v & (1 << (3 - i)) != 0);
                } else if v & (1 << (3 - i)) != 0 {
                    return Err(Error::InvalidData("nonzero padding bits".into()));
                }
            }
        }
        Ok(Bits(bits))
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.iter().map(|b| if b { '1' } else { '0' }).collect();
        write!(f, "Bits({s})")
    }
}

impl From<Vec<bool>> for Bits {
    fn from(v: Vec<bool>) -> Self {
        Bits(v)
    }
}

/// One-based agent index `j ∈ {1..m}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub usize);

impl AgentId {
    /// Zero-based position, for indexing agent tables.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn from_index(i: usize) -> Self {
        AgentId(i + 1)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub bits: Bits,
    pub source_agent: AgentId,
    /// Expansion counter at creation time.
    pub born_at: usize,
}

/// Per-token log-probabilities of one sampled output under the four
/// policies involved in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProbTrace {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub logp_infer: Vec<f64>,
    pub action_mask: Vec<bool>,
}

impl LogProbTrace {
    /// Trace where all four policies agree.
    pub fn uniform(logps: Vec<f64>) -> Self {
        let n = logps.len();
        LogProbTrace {
            logp_new: logps.clone(),
            logp_old: logps.clone(),
            logp_ref: logps.clone(),
            logp_infer: logps,
            action_mask: vec![true; n],
        }
    }

    pub fn token_count(&self) -> usize {
        self.logp_old.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.logp_old.len();
        if n == 0 {
            return Err(Error::InvalidData("trace has no tokens".into()));
        }
        let lens = [
            self.logp_new.len(),
            self.logp_ref.len(),
            self.logp_infer.len(),
            self.action_mask.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidData("trace lists differ in length".into()));
        }
        let all = self
            .logp_new
            .iter()
            .chain(&self.logp_old)
            .chain(&self.logp_ref)
            .chain(&self.logp_infer);
        for &lp in all {
            if !lp.is_finite() || lp > 0.0 {
                return Err(Error::InvalidData(format!("invalid log-probability {lp}")));
            }
        }
        Ok(())
    }
}

/// Contiguous bit ranges grouped into `tokens` pseudo-tokens. `tokens` is
/// clamped to `[1, len]` so every token covers at least one bit.
pub fn token_bounds(len: usize, tokens: usize) -> Vec<Range<usize>> {
    let tokens = tokens.clamp(1, len.max(1));
    (0..tokens)
        .map(|t| (t * len / tokens)..((t + 1) * len / tokens))
        .collect()
}

/// Context for a fresh proposal: the task's public prompt only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreshContext {
    pub task_id: u64,
    pub prompt: Bits,
}

/// Context for a refinement: the fresh context plus the parent answer and
/// whatever feedback the search mode exposes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementContext {
    pub task_id: u64,
    pub prompt: Bits,
    pub parent_bits: Bits,
    pub parent_id: NodeId,
    pub feedback: FeedbackReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PromptContext {
    Fresh(FreshContext),
    Refine(RefinementContext),
}

impl PromptContext {
    pub fn prompt(&self) -> &Bits {
        match self {
            PromptContext::Fresh(c) => &c.prompt,
            PromptContext::Refine(c) => &c.prompt,
        }
    }

    pub fn task_id(&self) -> u64 {
        match self {
            PromptContext::Fresh(c) => c.task_id,
            PromptContext::Refine(c) => c.task_id,
        }
    }
}

/// Per-expansion training tuple: context, output, agent, reward, advantage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub agent_id: AgentId,
    pub context: PromptContext,
    pub output: Bits,
    pub trace: LogProbTrace,
    pub reward: f64,
    advantage: Option<f64>,
}

impl NodeRecord {
    pub fn new(
        node_id: NodeId,
        agent_id: AgentId,
        context: PromptContext,
        output: Bits,
        trace: LogProbTrace,
        reward: f64,
    ) -> Self {
        NodeRecord {
            node_id,
            agent_id,
            context,
            output,
            trace,
            reward,
            advantage: None,
        }
    }

    pub fn advantage(&self) -> Option<f64> {
        self.advantage
    }

    /// Advantages are write-once.
    pub fn set_advantage(&mut self, a: f64) -> Result<()> {
        if self.advantage.is_some() {
            return Err(Error::AdvantageReassigned(self.node_id));
        }
        self.advantage = Some(a);
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.trace.token_count()
    }
}
