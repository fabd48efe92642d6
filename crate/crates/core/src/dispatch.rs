//! Per-agent experience buffers and threshold-triggered updates.
//!
//! Records produced by a search tree are routed to the buffer of the agent
//! that generated them. When a buffer holds `threshold` records, exactly
//! that many are drained (oldest first) into a training batch for its
//! agent. [`Dispatcher`] does this from many threads at once and runs
//! each agent's updates on its own worker, so a slow update for one agent
//! never holds up another.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::agents::{BeliefPolicy, PolicyHandle};
use crate::error::{Error, Result};
use crate::rl::{evaluate_objective, objective_gradient, rescore, LossParams, ObjectiveKind};
use crate::types::{AgentId, NodeId, NodeRecord};

pub const DEFAULT_THRESHOLD: usize = 256;

/// Identity of a record across trees: `(task id, node id)`.
pub type RecordKey = (u64, NodeId);

pub fn record_key(r: &NodeRecord) -> RecordKey {
    (r.context.task_id(), r.node_id)
}

#[derive(Clone, Debug)]
pub struct AgentBuffer {
    agent_id: AgentId,
    records: VecDeque<NodeRecord>,
    threshold: usize,
    updates_applied: usize,
}

impl AgentBuffer {
    pub fn new(agent_id: AgentId, threshold: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::config("dispatch.threshold", "must be at least 1"));
        }
        Ok(AgentBuffer {
            agent_id,
            records: VecDeque::new(),
            threshold,
            updates_applied: 0,
        })
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Batches drained so far.
    pub fn updates_applied(&self) -> usize {
        self.updates_applied
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.records.iter()
    }

    fn push(&mut self, r: NodeRecord) {
        debug_assert_eq!(r.agent_id, self.agent_id);
        self.records.push_back(r);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub agent: AgentId,
    /// 0-based index of this batch among the agent's batches.
    pub seq: usize,
    pub records: Vec<NodeRecord>,
}

impl TrainBatch {
    pub fn keys(&self) -> Vec<RecordKey> {
        self.records.iter().map(record_key).collect()
    }
}

/// What one call to [`dispatch`] did with a tree's records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchOutcome {
    pub appended: BTreeMap<AgentId, usize>,
    pub filtered: usize,
}

/// True when every reward is 0 or every reward is 1: such a group carries
/// no learning signal.
pub fn is_saturated(records: &[NodeRecord]) -> bool {
    !records.is_empty()
        && (records.iter().all(|r| r.reward == 0.0) || records.iter().all(|r| r.reward == 1.0))
}

fn check_routable(records: &[NodeRecord], known: impl Fn(AgentId) -> bool) -> Result<()> {
    for r in records {
        if r.advantage().is_none() {
            return Err(Error::MissingAdvantage(r.node_id));
        }
        if !known(r.agent_id) {
            return Err(Error::Routing(r.agent_id));
        }
    }
    Ok(())
}

/// Route one tree's records to their agents' buffers. Nothing is appended
/// if any record fails routing.
pub fn dispatch(
    records: Vec<NodeRecord>,
    buffers: &mut BTreeMap<AgentId, AgentBuffer>,
    filter: bool,
) -> Result<DispatchOutcome> {
    check_routable(&records, |a| buffers.contains_key(&a))?;
    let mut out = DispatchOutcome::default();
    if filter && is_saturated(&records) {
        out.filtered = records.len();
        return Ok(out);
    }
    for r in records {
        *out.appended.entry(r.agent_id).or_default() += 1;
        buffers.get_mut(&r.agent_id).expect("checked").push(r);
    }
    Ok(out)
}

/// Drain exactly `threshold` records, oldest first, once enough are queued.
pub fn maybe_trigger(buffer: &mut AgentBuffer) -> Option<TrainBatch> {
    if buffer.records.len() < buffer.threshold {
        return None;
    }
    let records: Vec<NodeRecord> = buffer.records.drain(..buffer.threshold).collect();
    let seq = buffer.updates_applied;
    buffer.updates_applied += 1;
    Some(TrainBatch {
        agent: buffer.agent_id,
        seq,
        records,
    })
}

/// Step size and objective used by [`apply_update`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: ObjectiveKind,
    pub loss: LossParams,
    pub step_size: f64,
    /// Scale each coordinate of the gradient by `b(1-b)`, the inverse
    /// Fisher information of a Bernoulli belief.
    pub natural: bool,
    /// Largest change of any single belief in one step.
    pub max_delta: f64,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule {
            kind: ObjectiveKind::Sequence,
            loss: LossParams::default(),
            step_size: 0.05,
            natural: true,
            max_delta: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateResult {
    pub policy: BeliefPolicy,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// One gradient-ascent step on the batch objective, beliefs clamped into
/// the valid band afterwards. With `rule.natural` the step is
/// preconditioned per coordinate, and each coordinate moves by at most
/// `rule.max_delta`; both keep it an ascent direction.
pub fn apply_update(
    policy: &BeliefPolicy,
    batch: &[NodeRecord],
    rule: &UpdateRule,
) -> Result<UpdateResult> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (before, grad) = objective_gradient(rule.kind, batch, &rule.loss, policy)?;
    let mut next = policy.clone();
    if rule.step_size != 0.0 {
        for (b, g) in next.belief.iter_mut().zip(&grad) {
            let scale = if rule.natural { *b * (1.0 - *b) } else { 1.0 };
            *b += (rule.step_size * scale * g).clamp(-rule.max_delta, rule.max_delta);
        }
        next.clamp();
    }
    let after = evaluate_objective(rule.kind, &[rescore(batch, &next)], &rule.loss)?.value;
    Ok(UpdateResult {
        policy: next,
        objective_before: before,
        objective_after: after,
    })
}

/// One row of the update log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateLogRow {
    /// Number of submissions the dispatcher had accepted when the batch
    /// was drained.
    pub wall_step: usize,
    pub agent: AgentId,
    pub batch_seq: usize,
    pub batch_size: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

pub fn write_update_log(path: &Path, rows: &[UpdateLogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out =
        String::from("wall_step,agent,batch_seq,batch_size,objective_before,objective_after\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{:.9}\n",
            r.wall_step, r.agent, r.batch_seq, r.batch_size, r.objective_before, r.objective_after
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Objective values reported by an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Runs one agent's update on a drained batch.
pub trait Updater: Send + Sync {
    fn update(&self, batch: &TrainBatch) -> Result<UpdateStats>;
}

impl<F> Updater for F
where
    F: Fn(&TrainBatch) -> Result<UpdateStats> + Send + Sync,
{
    fn update(&self, batch: &TrainBatch) -> Result<UpdateStats> {
        self(batch)
    }
}

/// Updates each agent's policy handle with [`apply_update`]. Agents may
/// share a handle.
pub struct PolicyUpdater {
    pub handles: BTreeMap<AgentId, Arc<PolicyHandle>>,
    pub rule: UpdateRule,
}

impl Updater for PolicyUpdater {
    fn update(&self, batch: &TrainBatch) -> Result<UpdateStats> {
        let handle = self
            .handles
            .get(&batch.agent)
            .ok_or(Error::Routing(batch.agent))?;
        let current = handle.snapshot();
        let res = apply_update(&current, &batch.records, &self.rule)?;
        handle.swap(res.policy);
        Ok(UpdateStats {
            objective_before: res.objective_before,
            objective_after: res.objective_after,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Updates run on the submitting thread before `submit` returns.
    Inline,
    /// Each agent has a worker thread that runs its updates in order.
    Async,
}

/// Drained batch as recorded by the dispatcher.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub agent: AgentId,
    pub seq: usize,
    pub wall_step: usize,
    pub keys: Vec<RecordKey>,
}

#[derive(Clone, Debug, Default)]
pub struct DispatchReport {
    pub produced: usize,
    pub filtered: usize,
    pub dispatched: BTreeMap<AgentId, usize>,
    /// Records still queued when the dispatcher finished.
    pub leftover: BTreeMap<AgentId, usize>,
    pub batches: Vec<BatchEntry>,
    pub log: Vec<UpdateLogRow>,
    pub errors: Vec<String>,
}

impl DispatchReport {
    /// Every produced record was either filtered or dispatched.
    pub fn conserved(&self) -> bool {
        self.filtered + self.dispatched.values().sum::<usize>() == self.produced
    }

    /// No record appears in two batches.
    pub fn batches_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.batches
            .iter()
            .flat_map(|b| &b.keys)
            .all(|k| seen.insert(*k))
    }
}

struct Shared {
    buffers: BTreeMap<AgentId, Mutex<AgentBuffer>>,
    produced: AtomicUsize,
    filtered: AtomicUsize,
    submissions: AtomicUsize,
    dispatched: BTreeMap<AgentId, AtomicUsize>,
    batches: Mutex<Vec<BatchEntry>>,
    log: Mutex<Vec<UpdateLogRow>>,
    errors: Mutex<Vec<String>>,
}

impl Shared {
    fn run_update(&self, updater: &dyn Updater, batch: &TrainBatch, wall_step: usize) {
        match updater.update(batch) {
            Ok(stats) => self.log.lock().expect("log lock").push(UpdateLogRow {
                wall_step,
                agent: batch.agent,
                batch_seq: batch.seq,
                batch_size: batch.records.len(),
                objective_before: stats.objective_before,
                objective_after: stats.objective_after,
            }),
            Err(e) => {
                log::error!(
                    "update for agent {} batch {} failed: {e}",
                    batch.agent,
                    batch.seq
                );
                self.errors
                    .lock()
                    .expect("error lock")
                    .push(format!("agent {} batch {}: {e}", batch.agent, batch.seq));
            }
        }
    }
}

/// Thread-safe buffers plus per-agent update workers.
pub struct Dispatcher {
    shared: Arc<Shared>,
    filter: bool,
    mode: UpdateMode,
    updater: Arc<dyn Updater>,
    senders: BTreeMap<AgentId, Sender<(TrainBatch, usize)>>,
    workers: Vec<JoinHandle<()>>,
}

impl Dispatcher {
    pub fn new(
        agents: &[AgentId],
        threshold: usize,
        filter: bool,
        mode: UpdateMode,
        updater: Arc<dyn Updater>,
    ) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::NoAgents);
        }
        let mut buffers = BTreeMap::new();
        let mut dispatched = BTreeMap::new();
        for &a in agents {
            buffers.insert(a, Mutex::new(AgentBuffer::new(a, threshold)?));
            dispatched.insert(a, AtomicUsize::new(0));
        }
        let shared = Arc::new(Shared {
            buffers,
            produced: AtomicUsize::new(0),
            filtered: AtomicUsize::new(0),
            submissions: AtomicUsize::new(0),
            dispatched,
            batches: Mutex::new(Vec::new()),
            log: Mutex::new(Vec::new()),
            errors: Mutex::new(Vec::new()),
        });
        let mut senders = BTreeMap::new();
        let mut workers = Vec::new();
        if mode == UpdateMode::Async {
            for &a in agents {
                let (tx, rx) = mpsc::channel::<(TrainBatch, usize)>();
                let shared = shared.clone();
                let updater = updater.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("update-{a}"))
                    .spawn(move || {
                        for (batch, step) in rx {
                            shared.run_update(updater.as_ref(), &batch, step);
                        }
                    })
                    .map_err(|e| Error::InvalidData(format!("cannot spawn worker: {e}")))?;
                senders.insert(a, tx);
                workers.push(handle);
            }
        }
        Ok(Dispatcher {
            shared,
            filter,
            mode,
            updater,
            senders,
            workers,
        })
    }

    /// Route one tree's records and trigger any buffer that filled up.
    /// Returns the batches drained by this call.
    pub fn submit(&self, records: Vec<NodeRecord>) -> Result<Vec<(AgentId, usize)>> {
        let sh = &self.shared;
        check_routable(&records, |a| sh.buffers.contains_key(&a))?;
        let step = sh.submissions.fetch_add(1, Ordering::SeqCst) + 1;
        sh.produced.fetch_add(records.len(), Ordering::SeqCst);
        if self.filter && is_saturated(&records) {
            sh.filtered.fetch_add(records.len(), Ordering::SeqCst);
            return Ok(Vec::new());
        }
        let mut per_agent: BTreeMap<AgentId, Vec<NodeRecord>> = BTreeMap::new();
        for r in records {
            per_agent.entry(r.agent_id).or_default().push(r);
        }
        let mut drained = Vec::new();
        for (agent, recs) in per_agent {
            let n = recs.len();
            let batches = {
                let mut buf = sh.buffers[&agent].lock().expect("buffer lock");
                for r in recs {
                    buf.push(r);
                }
                sh.dispatched[&agent].fetch_add(n, Ordering::SeqCst);
                let mut out = Vec::new();
                while let Some(b) = maybe_trigger(&mut buf) {
                    out.push(b);
                }
                out
            };
            for batch in batches {
                sh.batches.lock().expect("batch lock").push(BatchEntry {
                    agent,
                    seq: batch.seq,
                    wall_step: step,
                    keys: batch.keys(),
                });
                drained.push((agent, batch.seq));
                match self.mode {
                    UpdateMode::Inline => sh.run_update(self.updater.as_ref(), &batch, step),
                    UpdateMode::Async => {
                        self.senders[&agent].send((batch, step)).map_err(|_| {
                            Error::InvalidData(format!("worker for agent {agent} exited"))
                        })?;
                    }
                }
            }
        }
        Ok(drained)
    }

    /// Current queue length per agent.
    pub fn queued(&self) -> BTreeMap<AgentId, usize> {
        self.shared
            .buffers
            .iter()
            .map(|(a, b)| (*a, b.lock().expect("buffer lock").len()))
            .collect()
    }

    /// Update log rows completed so far.
    pub fn completed_updates(&self) -> Vec<UpdateLogRow> {
        self.shared.log.lock().expect("log lock").clone()
    }

    /// Wait for queued updates, stop the workers and summarize the run.
    /// Log rows are ordered by `(wall_step, agent, batch_seq)`.
    pub fn finish(mut self) -> DispatchReport {
        self.senders.clear();
        for w in self.workers.drain(..) {
            if w.join().is_err() {
                self.shared
                    .errors
                    .lock()
                    .expect("error lock")
                    .push("update worker panicked".into());
            }
        }
        let sh = &self.shared;
        let mut log = sh.log.lock().expect("log lock").clone();
        log.sort_by_key(|r| (r.wall_step, r.agent, r.batch_seq));
        let mut batches = sh.batches.lock().expect("batch lock").clone();
        batches.sort_by_key(|b| (b.wall_step, b.agent, b.seq));
        DispatchReport {
            produced: sh.produced.load(Ordering::SeqCst),
            filtered: sh.filtered.load(Ordering::SeqCst),
            dispatched: sh
                .dispatched
                .iter()
                .map(|(a, c)| (*a, c.load(Ordering::SeqCst)))
                .collect(),
            leftover: self.queued(),
            batches,
            log,
            errors: sh.errors.lock().expect("error lock").clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Bits, FreshContext, LogProbTrace, PromptContext};

    fn rec(task: u64, id: usize, agent: usize, reward: f64, adv: f64) -> NodeRecord {
        let mut r = NodeRecord::new(
            id,
            AgentId(agent),
            PromptContext::Fresh(FreshContext {
                task_id: task,
                prompt: Bits::zeros(2),
            }),
            Bits::zeros(2),
            LogProbTrace::uniform(vec![-0.5, -0.5]),
            reward,
        );
        r.set_advantage(adv).unwrap();
        r
    }

    fn buffers(n: usize, threshold: usize) -> BTreeMap<AgentId, AgentBuffer> {
        (1..=n)
            .map(|a| (AgentId(a), AgentBuffer::new(AgentId(a), threshold).unwrap()))
            .collect()
    }

    #[test]
    fn routes_by_agent() {
        let mut b = buffers(2, 10);
        let out = dispatch(
            vec![
                rec(0, 1, 1, 1.0, 1.0),
                rec(0, 2, 2, 0.0, -1.0),
                rec(0, 3, 1, 1.0, 1.0),
            ],
            &mut b,
            true,
        )
        .unwrap();
        assert_eq!(out.appended[&AgentId(1)], 2);
        assert_eq!(out.appended[&AgentId(2)], 1);
        assert_eq!(b[&AgentId(1)].len(), 2);
    }

    #[test]
    fn saturated_trees_are_filtered() {
        let mut b = buffers(1, 10);
        let out = dispatch(
            vec![rec(0, 1, 1, 1.0, 0.0), rec(0, 2, 1, 1.0, 0.0)],
            &mut b,
            true,
        )
        .unwrap();
        assert_eq!(out.filtered, 2);
        assert!(b[&AgentId(1)].is_empty());
        let out = dispatch(vec![rec(0, 1, 1, 0.0, 0.0)], &mut b, false).unwrap();
        assert_eq!(out.appended[&AgentId(1)], 1);
    }

    #[test]
    fn unknown_agent_is_a_routing_error() {
        let mut b = buffers(1, 10);
        let err = dispatch(
            vec![rec(0, 1, 1, 1.0, 0.5), rec(0, 2, 3, 0.0, -0.5)],
            &mut b,
            true,
        );
        assert!(matches!(err, Err(Error::Routing(AgentId(3)))));
        assert!(b[&AgentId(1)].is_empty());
    }

    #[test]
    fn trigger_drains_exactly_threshold() {
        let mut b = AgentBuffer::new(AgentId(1), 3).unwrap();
        for i in 0..2 {
            b.push(rec(0, i + 1, 1, 0.0, 0.0));
        }
        assert!(maybe_trigger(&mut b).is_none());
        b.push(rec(0, 3, 1, 0.0, 0.0));
        let batch = maybe_trigger(&mut b).unwrap();
        assert_eq!(batch.records.len(), 3);
        assert!(b.is_empty());
        assert_eq!(batch.keys(), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn zero_step_and_zero_advantage_leave_policy_alone() {
        let policy = BeliefPolicy::new(vec![0.3, 0.6], 1.0);
        let batch = vec![rec(0, 1, 1, 1.0, 1.0)];
        let rule = UpdateRule {
            step_size: 0.0,
            ..Default::default()
        };
        assert_eq!(apply_update(&policy, &batch, &rule).unwrap().policy, policy);

        let zero = vec![rec(0, 1, 1, 1.0, 0.0)];
        let rule = UpdateRule {
            loss: LossParams {
                beta_kl: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(apply_update(&policy, &zero, &rule).unwrap().policy, policy);
        assert!(matches!(
            apply_update(&policy, &[], &rule),
            Err(Error::EmptyBatch)
        ));
    }
}
