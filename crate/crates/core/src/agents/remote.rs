//! HTTP adapter that lets an external service play an agent.
//!
//! Request: `POST <endpoint>` with a JSON [`RemoteRequest`]. Response: a
//! JSON [`RemoteResponse`] carrying the answer bits as hex and one
//! log-probability per emitted token.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Agent, Proposal};
use crate::environment::{FailedCase, FeedbackReport, FeedbackSummary, TaskView};
use crate::error::{Error, Result};
use crate::types::{AgentId, Bits, LogProbTrace};
use crate::SearchRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemoteMode {
    Fresh,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteFeedback {
    pub summary: FeedbackSummary,
    pub failures: Vec<FailedCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub task_id: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub prompt_hex: String,
    pub mode: RemoteMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent_bits_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feedback: Option<RemoteFeedback>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub bits_hex: String,
    pub token_logprobs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// `agents.remote.timeout_ms`
    pub timeout_ms: u64,
    /// `agents.remote.retries`
    pub retries: u32,
}

pub struct RemoteAgent {
    id: AgentId,
    config: RemoteConfig,
    http: ureq::Agent,
}

impl std::fmt::Debug for RemoteAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteAgent")
            .field("id", &self.id)
            .field("config", &self.config)
            .finish()
    }
}

impl RemoteAgent {
    pub fn new(id: AgentId, config: RemoteConfig) -> Self {
        let http: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteAgent { id, config, http }
    }

    fn call(&self, req: &RemoteRequest) -> Result<RemoteResponse> {
        let mut attempt = 0;
        loop {
            match self.call_once(req) {
                Err(e @ (Error::Timeout(_) | Error::Remote { .. }))
                    if attempt < self.config.retries =>
                {
                    log::warn!("agent {} attempt {} failed: {e}", self.id, attempt + 1);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn call_once(&self, req: &RemoteRequest) -> Result<RemoteResponse> {
        let mut resp = match self.http.post(&self.config.endpoint).send_json(req) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout(self.config.timeout_ms)),
            Err(e) => {
                return Err(Error::Remote {
                    status: 0,
                    body: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Remote { status, body });
        }
        match resp.body_mut().read_json::<RemoteResponse>() {
            Ok(r) => Ok(r),
            Err(ureq::Error::Timeout(_)) => Err(Error::Timeout(self.config.timeout_ms)),
            Err(e) => Err(Error::Protocol(format!("malformed response: {e}"))),
        }
    }

    fn to_proposal(&self, len: usize, resp: RemoteResponse) -> Result<Proposal> {
        let bits = Bits::from_hex(&resp.bits_hex, len)
            .map_err(|e| Error::Protocol(format!("bad bits_hex: {e}")))?;
        let trace = LogProbTrace::uniform(resp.token_logprobs);
        trace
            .validate()
            .map_err(|e| Error::Protocol(format!("bad token_logprobs: {e}")))?;
        Ok(Proposal { bits, trace })
    }

    pub fn remote_propose(&self, task: TaskView<'_>) -> Result<Proposal> {
        let req = RemoteRequest {
            task_id: task.id,
            m: task.len,
            prompt_hex: task.prompt.to_hex(),
            mode: RemoteMode::Fresh,
            parent_bits_hex: None,
            feedback: None,
        };
        let resp = self.call(&req)?;
        self.to_proposal(task.len, resp)
    }

    pub fn remote_refine(
        &self,
        task: TaskView<'_>,
        parent: &Bits,
        feedback: &FeedbackReport,
    ) -> Result<Proposal> {
        let req = RemoteRequest {
            task_id: task.id,
            m: task.len,
            prompt_hex: task.prompt.to_hex(),
            mode: RemoteMode::Refine,
            parent_bits_hex: Some(parent.to_hex()),
            feedback: Some(RemoteFeedback {
                summary: feedback.summary,
                failures: feedback.failures.clone(),
            }),
        };
        let resp = self.call(&req)?;
        self.to_proposal(task.len, resp)
    }
}

impl Agent for RemoteAgent {
    fn id(&self) -> AgentId {
        self.id
    }

    fn propose(&self, task: TaskView<'_>, _rng: &mut SearchRng) -> Result<Proposal> {
        self.remote_propose(task)
    }

    fn refine(
        &self,
        task: TaskView<'_>,
        parent: &Bits,
        feedback: &FeedbackReport,
        _rng: &mut SearchRng,
    ) -> Result<Proposal> {
        self.remote_refine(task, parent, feedback)
    }
}
