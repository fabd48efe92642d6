//! Agents that propose and refine candidate solutions.

mod remote;
mod sim;

pub use remote::{
    RemoteAgent, RemoteConfig, RemoteFeedback, RemoteMode, RemoteRequest, RemoteResponse,
};
pub use sim::{BeliefPolicy, PolicyHandle, SimAgent, SimAgentParams, BELIEF_MAX, BELIEF_MIN};

use crate::environment::{FeedbackReport, TaskView};
use crate::error::Result;
use crate::types::{AgentId, Bits, LogProbTrace};
use crate::SearchRng;

/// Sampled candidate plus its per-token log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bits: Bits,
    pub trace: LogProbTrace,
}

/// An agent sees the task's public view and, when refining, the parent
/// answer with feedback derived from public tests only.
pub trait Agent: Send + Sync {
    fn id(&self) -> AgentId;

    fn propose(&self, task: TaskView<'_>, rng: &mut SearchRng) -> Result<Proposal>;

    fn refine(
        &self,
        task: TaskView<'_>,
        parent: &Bits,
        feedback: &FeedbackReport,
        rng: &mut SearchRng,
    ) -> Result<Proposal>;
}
