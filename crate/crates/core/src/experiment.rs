//! End-to-end runs: rollouts, dispatch, per-agent updates and checkpointed
//! evaluation on held-out tasks.
//!
//! Three training modes are supported. `single` trains one agent on flat
//! sample groups. `homo` runs tree search with several roles that share a
//! single parameter snapshot. `heter` runs tree search with agents that
//! own independent parameters. Every reported pass metric is measured on
//! the full hidden test suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, BeliefPolicy, PolicyHandle, SimAgent, SimAgentParams};
use crate::dispatch::{
    apply_update, dispatch, maybe_trigger, AgentBuffer, DispatchReport, Dispatcher, PolicyUpdater,
    TrainBatch, UpdateLogRow, UpdateMode, UpdateRule,
};
use crate::diversity::{cluster_by_equivalence, ea};
use crate::environment::{Evaluator, SyntheticEvaluator, Task, TaskFamily};
use crate::error::{Error, Result};
use crate::rl::{assign_advantages, LossParams, ObjectiveKind};
use crate::search::{final_vanilla, run_flat_sampling, run_search, SearchConfig, SearchTrace};
use crate::types::{AgentId, NodeRecord};
use crate::{derive_seed, SearchRng};

const FAMILY_STREAM: u64 = 0xFA11;
const TRAIN_STREAM: u64 = 0x7A1;
const EVAL_STREAM: u64 = 0xE7A1;
const EVAL_TASK_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Homo,
    Heter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Homo => "homo",
            Mode::Heter => "heter",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "homo" => Ok(Mode::Homo),
            "heter" => Ok(Mode::Heter),
            _ => Err(Error::config(
                "mode",
                format!("expected single|homo|heter, got `{s}`"),
            )),
        }
    }
}

/// Which bits an agent is strong on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillPattern {
    Uniform,
    Even,
    Odd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub pattern: SkillPattern,
    /// Per-bit accuracy on the agent's strong bits.
    pub strong: f64,
    /// Per-bit accuracy elsewhere.
    pub weak: f64,
    pub fix_prob: f64,
    pub drift_prob: f64,
    pub trace_len: usize,
    pub logit_scale: f64,
    pub infer_noise: f64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec {
            pattern: SkillPattern::Uniform,
            strong: 0.8,
            weak: 0.8,
            fix_prob: 0.9,
            drift_prob: 0.05,
            trace_len: 4,
            logit_scale: 1.0,
            infer_noise: 0.0,
        }
    }
}

impl AgentSpec {
    pub fn params(&self, len: usize) -> SimAgentParams {
        let skill = (0..len)
            .map(|i| {
                let strong = match self.pattern {
                    SkillPattern::Uniform => true,
                    SkillPattern::Even => i % 2 == 0,
                    SkillPattern::Odd => i % 2 == 1,
                };
                if strong {
                    self.strong
                } else {
                    self.weak
                }
            })
            .collect();
        SimAgentParams {
            skill,
            fix_prob: self.fix_prob,
            drift_prob: self.drift_prob,
            trace_len: self.trace_len,
            logit_scale: self.logit_scale,
            infer_noise: self.infer_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Bits per task (`M`).
    pub len: usize,
    pub public_min: usize,
    pub public_max: usize,
    pub hint_noise: f64,
    pub family_seed: u64,
    pub backend: String,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            len: 16,
            public_min: 8,
            public_max: 12,
            hint_noise: 0.1,
            family_seed: 7,
            backend: "synthetic".into(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::config("environment.len", "must be at least 1"));
        }
        if self.public_min == 0 || self.public_min > self.public_max || self.public_max > self.len {
            return Err(Error::config(
                "environment.public_min",
                "need 1 <= public_min <= public_max <= len",
            ));
        }
        if !(0.0..=1.0).contains(&self.hint_noise) {
            return Err(Error::config(
                "environment.hint_noise",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn family(&self) -> TaskFamily {
        let mut rng = SearchRng::seed_from_u64(derive_seed(self.family_seed, FAMILY_STREAM));
        TaskFamily::random(self.len, self.hint_noise, &mut rng)
    }

    /// Task `id` drawn from the stream `stream` of this environment.
    pub fn task(&self, family: &TaskFamily, stream: u64, id: u64) -> Result<Task> {
        let seed = derive_seed(derive_seed(self.family_seed, stream), id);
        let public = self.public_min
            + (SearchRng::seed_from_u64(seed).random::<u64>()
                % (self.public_max - self.public_min + 1) as u64) as usize;
        family.generate_seeded(id, public, derive_seed(seed, 1))
    }

    /// Held-out evaluation tasks; identical for every run sharing this
    /// environment.
    pub fn eval_tasks(&self, family: &TaskFamily, count: usize) -> Result<Vec<Task>> {
        (0..count as u64)
            .map(|i| self.task(family, EVAL_STREAM, EVAL_TASK_BASE + i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub loss: LossParams,
    pub step_size: f64,
    /// Fisher-preconditioned steps, see [`UpdateRule::natural`].
    pub natural: bool,
    /// Per-belief step cap, see [`UpdateRule::max_delta`].
    pub max_delta: f64,
    /// Rollout rounds; each round rolls out `tasks_per_round` tasks against
    /// the same parameter snapshot.
    pub rounds: usize,
    pub tasks_per_round: usize,
    /// Expansions per training rollout.
    pub rollout_budget: usize,
    /// Evaluate every this many updates.
    pub checkpoint_every: usize,
    pub threshold: usize,
    pub filter: bool,
    /// Train on partially filled buffers once rollouts end.
    pub flush_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Sequence,
            loss: LossParams::default(),
            step_size: 1.0,
            natural: true,
            max_delta: 0.05,
            rounds: 16,
            tasks_per_round: 8,
            rollout_budget: 16,
            checkpoint_every: 4,
            threshold: 64,
            filter: false,
            flush_final: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("train.step_size", "must be non-negative"));
        }
        if !(self.max_delta > 0.0) {
            return Err(Error::config("train.max_delta", "must be positive"));
        }
        if self.tasks_per_round == 0 {
            return Err(Error::config("train.tasks_per_round", "must be at least 1"));
        }
        if self.rollout_budget == 0 {
            return Err(Error::config("train.rollout_budget", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config(
                "train.checkpoint_every",
                "must be at least 1",
            ));
        }
        if self.threshold == 0 {
            return Err(Error::config("dispatch.threshold", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tasks: usize,
    /// Run the budgeted search at every checkpoint; when off only the
    /// first and last checkpoints are searched.
    pub search_every_checkpoint: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: 100,
            search_every_checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub balance: bool,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            epochs: 500,
            lr: 1.0,
            balance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub env: EnvConfig,
    pub agents: Vec<AgentSpec>,
    /// Search used at evaluation; its budget is `N`.
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub rm: RmConfig,
    pub workers: Option<usize>,
    /// Overrides the table label when non-empty.
    #[serde(default)]
    pub name: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Heter,
            seed: 0,
            env: EnvConfig::default(),
            agents: vec![
                AgentSpec {
                    pattern: SkillPattern::Even,
                    strong: 0.9,
                    weak: 0.6,
                    ..AgentSpec::default()
                },
                AgentSpec {
                    pattern: SkillPattern::Odd,
                    strong: 0.9,
                    weak: 0.6,
                    ..AgentSpec::default()
                },
            ],
            search: SearchConfig {
                budget: 32,
                ..SearchConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            rm: RmConfig::default(),
            workers: None,
            name: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        if self.agents.is_empty() {
            return Err(Error::config(
                "agents.sim",
                "at least one agent is required",
            ));
        }
        if self.mode == Mode::Single && self.agents.len() != 1 {
            return Err(Error::config(
                "agents.sim",
                format!(
                    "mode single takes exactly one agent, got {}",
                    self.agents.len()
                ),
            ));
        }
        for a in &self.agents {
            a.params(self.env.len).validate()?;
        }
        if self.eval.tasks == 0 {
            return Err(Error::config("eval.tasks", "must be at least 1"));
        }
        if self.env.backend != "synthetic" {
            return Err(Error::config(
                "environment.backend",
                "experiments run on the synthetic backend",
            ));
        }
        Ok(())
    }

    /// Label used in result tables, e.g. `heter-2`.
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            format!("{}-{}", self.mode.as_str(), self.agents.len())
        } else {
            self.name.clone()
        }
    }
}

/// Agents of a run with their parameter handles. In homo mode every agent
/// holds the same handle.
pub struct AgentSet {
    pub agents: Vec<Arc<dyn Agent>>,
    pub sims: Vec<SimAgent>,
    pub handles: BTreeMap<AgentId, Arc<PolicyHandle>>,
}

impl AgentSet {
    pub fn build(cfg: &ExperimentConfig, family: &TaskFamily) -> Self {
        let m = cfg.env.len;
        let shared = (cfg.mode == Mode::Homo).then(|| {
            let p = cfg.agents[0].params(m);
            PolicyHandle::new(BeliefPolicy::from_skill(&p.skill, family, p.logit_scale))
        });
        let mut sims = Vec::new();
        let mut handles = BTreeMap::new();
        for (i, spec) in cfg.agents.iter().enumerate() {
            let id = AgentId::from_index(i);
            let params = spec.params(m);
            let agent = match &shared {
                Some(h) => SimAgent::new(id, params, h.clone()),
                None => SimAgent::from_skill(id, params, family),
            };
            handles.insert(id, agent.policy().clone());
            sims.push(agent);
        }
        let agents = sims
            .iter()
            .map(|a| Arc::new(a.clone()) as Arc<dyn Agent>)
            .collect();
        AgentSet {
            agents,
            sims,
            handles,
        }
    }

    /// Distinct parameter snapshots currently in use.
    pub fn distinct_snapshots(&self) -> usize {
        let mut ptrs: Vec<*const PolicyHandle> = self.handles.values().map(Arc::as_ptr).collect();
        ptrs.sort();
        ptrs.dedup();
        ptrs.len()
    }
}

/// Evaluation of the current parameters on the held-out tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: String,
    pub agents: usize,
    pub checkpoint: usize,
    pub updates: usize,
    pub records_trained: usize,
    /// First node of each evaluation tree solves the task.
    pub pass1: f64,
    /// Expected single-sample solve rate, averaged over agents.
    pub pass1_exact: f64,
    pub pass1_mcts: f64,
    pub pass_n: f64,
    pub depth_hist: String,
    pub deep_fraction: f64,
    /// Effective number of producing agents among solving nodes.
    pub ea_agents: f64,
}

pub const CSV_HEADER: &str = "mode,agents,checkpoint,updates,records_trained,pass1,pass1_exact,pass1_mcts,pass_n,depth_hist,deep_fraction,ea_agents";

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.agents,
            self.checkpoint,
            self.updates,
            self.records_trained,
            fmt_metric(self.pass1),
            fmt_metric(self.pass1_exact),
            fmt_metric(self.pass1_mcts),
            fmt_metric(self.pass_n),
            self.depth_hist,
            fmt_metric(self.deep_fraction),
            fmt_metric(self.ea_agents),
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    std::fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Long-format plot data: one `(series, x, y)` line per point, `x` being
/// the update count.
pub fn plot_data(rows: &[ResultRow]) -> String {
    let mut out = String::from("series,x,y\n");
    for r in rows {
        let label = format!("{}-{}", r.mode, r.agents);
        for (name, y) in [
            ("pass1", r.pass1),
            ("pass1_exact", r.pass1_exact),
            ("pass1_mcts", r.pass1_mcts),
            ("pass_n", r.pass_n),
        ] {
            if !y.is_nan() {
                let _ = writeln!(out, "{label}/{name},{},{}", r.updates, fmt_metric(y));
            }
        }
    }
    out
}

/// Totals used for equal-compute checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub expansions: usize,
    pub records_produced: usize,
    pub records_filtered: usize,
    pub records_trained: usize,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub update_log: Vec<UpdateLogRow>,
    pub accounting: Accounting,
    /// Final parameters per agent.
    pub policies: BTreeMap<AgentId, BeliefPolicy>,
}

fn depth_hist_string(hist: &BTreeMap<usize, usize>) -> String {
    hist.iter()
        .map(|(d, c)| format!("{d}:{c}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Search every evaluation task with the current parameters.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    set: &AgentSet,
    tasks: &[Task],
    evaluator: &dyn Evaluator,
    with_search: bool,
) -> Result<ResultRow> {
    let pass1_exact = {
        let per_agent: Vec<f64> = set
            .sims
            .iter()
            .map(|a| {
                let p = a.policy().snapshot();
                tasks
                    .iter()
                    .map(|t| t.solve_probability(|i| p.prob(i)))
                    .sum::<f64>()
                    / tasks.len() as f64
            })
            .collect();
        per_agent.iter().sum::<f64>() / per_agent.len() as f64
    };
    let mut row = ResultRow {
        mode: cfg.mode.as_str().into(),
        agents: cfg.agents.len(),
        checkpoint: 0,
        updates: 0,
        records_trained: 0,
        pass1: f64::NAN,
        pass1_exact,
        pass1_mcts: f64::NAN,
        pass_n: f64::NAN,
        depth_hist: String::new(),
        deep_fraction: f64::NAN,
        ea_agents: f64::NAN,
    };
    if !with_search {
        return Ok(row);
    }
    let search = SearchConfig {
        training_mode: false,
        ..cfg.search.clone()
    };
    let eval_seed = derive_seed(cfg.seed, EVAL_STREAM);
    let traces: Vec<SearchTrace> = tasks
        .par_iter()
        .map(|task| {
            let mut rng = SearchRng::seed_from_u64(derive_seed(eval_seed, task.id()));
            run_search(task, &set.agents, evaluator, &search, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = tasks.len() as f64;
    let mut first = 0usize;
    let mut mcts = 0usize;
    let mut any = 0usize;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ea_sum = 0.0;
    let mut ea_count = 0usize;
    for trace in &traces {
        let nodes = trace.tree.nodes();
        if nodes.first().is_some_and(|n| n.eval_report.solved()) {
            first += 1;
        }
        if let Some(id) = trace.chosen_final {
            if trace.tree.node(id).eval_report.solved() {
                mcts += 1;
            }
        }
        let solving: Vec<AgentId> = nodes
            .iter()
            .filter(|n| n.eval_report.solved())
            .map(|n| n.solution.source_agent)
            .collect();
        if !solving.is_empty() {
            any += 1;
            ea_sum += ea(&cluster_by_equivalence(&solving, |a, b| a == b)?);
            ea_count += 1;
        }
        for (d, c) in &trace.depth_histogram {
            *hist.entry(*d).or_default() += c;
        }
    }
    debug_assert!(traces
        .iter()
        .all(|t| final_vanilla(t).map(|s| s.source_agent)
            == t.chosen_final
                .map(|id| t.tree.node(id).solution.source_agent)));
    row.pass1 = first as f64 / n;
    row.pass1_mcts = mcts as f64 / n;
    row.pass_n = any as f64 / n;
    row.depth_hist = depth_hist_string(&hist);
    row.deep_fraction = crate::search::deep_fraction(&traces, 4);
    row.ea_agents = if ea_count == 0 {
        f64::NAN
    } else {
        ea_sum / ea_count as f64
    };
    Ok(row)
}

fn rollout(
    cfg: &ExperimentConfig,
    set: &AgentSet,
    task: &Task,
    evaluator: &dyn Evaluator,
    rng: &mut SearchRng,
) -> Result<Vec<NodeRecord>> {
    let train_task = task.all_public();
    let trace = match cfg.mode {
        Mode::Single => run_flat_sampling(
            &train_task,
            &set.agents[0],
            evaluator,
            cfg.train.rollout_budget,
            true,
            rng,
        )?,
        Mode::Homo | Mode::Heter => {
            let search = SearchConfig {
                budget: cfg.train.rollout_budget,
                training_mode: true,
                ..cfg.search.clone()
            };
            run_search(&train_task, &set.agents, evaluator, &search, rng)?
        }
    };
    let mut records = trace.records;
    assign_advantages(&mut records, cfg.train.objective, &cfg.train.loss)?;
    Ok(records)
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    set: &'a AgentSet,
    rule: UpdateRule,
    tasks: &'a [Task],
    evaluator: &'a dyn Evaluator,
    acct: Accounting,
    log: Vec<UpdateLogRow>,
    rows: Vec<ResultRow>,
}

impl Trainer<'_> {
    fn checkpoint(&mut self, with_search: bool) -> Result<()> {
        let mut row =
            evaluate_checkpoint(self.cfg, self.set, self.tasks, self.evaluator, with_search)?;
        row.checkpoint = self.rows.len();
        row.updates = self.acct.updates;
        row.records_trained = self.acct.records_trained;
        self.rows.push(row);
        Ok(())
    }

    fn train_batch(&mut self, batch: TrainBatch, wall_step: usize) -> Result<()> {
        let handle = &self.set.handles[&batch.agent];
        let res = apply_update(&handle.snapshot(), &batch.records, &self.rule)?;
        handle.swap(res.policy);
        self.acct.updates += 1;
        self.acct.records_trained += batch.records.len();
        self.log.push(UpdateLogRow {
            wall_step,
            agent: batch.agent,
            batch_seq: batch.seq,
            batch_size: batch.records.len(),
            objective_before: res.objective_before,
            objective_after: res.objective_after,
        });
        if self
            .acct
            .updates
            .is_multiple_of(self.cfg.train.checkpoint_every)
        {
            self.checkpoint(self.cfg.eval.search_every_checkpoint)?;
        }
        Ok(())
    }
}

/// Run one configuration end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    crate::with_workers(cfg.workers, || run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let family = cfg.env.family();
    let eval_tasks = cfg.env.eval_tasks(&family, cfg.eval.tasks)?;
    let set = AgentSet::build(cfg, &family);
    let evaluator = SyntheticEvaluator;
    let mut buffers: BTreeMap<AgentId, AgentBuffer> = set
        .handles
        .keys()
        .map(|&a| AgentBuffer::new(a, cfg.train.threshold).map(|b| (a, b)))
        .collect::<Result<_>>()?;
    let mut tr = Trainer {
        cfg,
        set: &set,
        rule: UpdateRule {
            kind: cfg.train.objective,
            loss: cfg.train.loss,
            step_size: cfg.train.step_size,
            natural: cfg.train.natural,
            max_delta: cfg.train.max_delta,
        },
        tasks: &eval_tasks,
        evaluator: &evaluator,
        acct: Accounting::default(),
        log: Vec::new(),
        rows: Vec::new(),
    };
    tr.checkpoint(true)?;

    let train_seed = derive_seed(cfg.seed, TRAIN_STREAM);
    for round in 0..cfg.train.rounds {
        let ids: Vec<u64> = (0..cfg.train.tasks_per_round as u64)
            .map(|i| (round * cfg.train.tasks_per_round) as u64 + i)
            .collect();
        let trees: Vec<Vec<NodeRecord>> = ids
            .par_iter()
            .map(|&id| {
                let task = cfg.env.task(&family, TRAIN_STREAM, id)?;
                let mut rng = SearchRng::seed_from_u64(derive_seed(train_seed, id));
                rollout(cfg, &set, &task, &evaluator, &mut rng)
            })
            .collect::<Result<_>>()?;
        for (records, &id) in trees.into_iter().zip(&ids) {
            let n = records.len();
            tr.acct.expansions += n;
            tr.acct.records_produced += n;
            let out = dispatch(records, &mut buffers, cfg.train.filter)?;
            tr.acct.records_filtered += out.filtered;
            let agents: Vec<AgentId> = buffers.keys().copied().collect();
            for a in agents {
                while let Some(batch) = maybe_trigger(buffers.get_mut(&a).expect("known agent")) {
                    tr.train_batch(batch, id as usize + 1)?;
                }
            }
        }
    }
    if cfg.train.flush_final {
        let step = cfg.train.rounds * cfg.train.tasks_per_round + 1;
        let agents: Vec<AgentId> = buffers.keys().copied().collect();
        for a in agents {
            let buf = buffers.get_mut(&a).expect("known agent");
            if buf.is_empty() {
                continue;
            }
            let seq = buf.updates_applied();
            let records: Vec<NodeRecord> = buf.records().cloned().collect();
            *buf = AgentBuffer::new(a, cfg.train.threshold)?;
            tr.train_batch(
                TrainBatch {
                    agent: a,
                    seq,
                    records,
                },
                step,
            )?;
        }
    }
    let last_updates = tr.rows.last().map(|r| r.updates);
    let last_has_search = tr.rows.last().is_some_and(|r| !r.pass1_mcts.is_nan());
    if last_updates != Some(tr.acct.updates) || !last_has_search {
        tr.checkpoint(true)?;
    }
    let policies = set
        .handles
        .iter()
        .map(|(a, h)| (*a, (*h.snapshot()).clone()))
        .collect();
    Ok(ExperimentResult {
        config: cfg.clone(),
        rows: tr.rows,
        update_log: tr.log,
        accounting: tr.acct,
        policies,
    })
}

#[derive(Clone, Debug)]
pub struct AsyncTrainingResult {
    pub report: DispatchReport,
    pub policies: BTreeMap<AgentId, BeliefPolicy>,
}

/// Training rollouts fed through a [`Dispatcher`]. With
/// [`UpdateMode::Async`] updates run on per-agent workers while later
/// rollouts proceed, so each rollout sees whichever snapshot is current and
/// the outcome depends on thread timing. Partially filled buffers are left
/// queued and reported as leftover.
pub fn run_async_training(cfg: &ExperimentConfig, mode: UpdateMode) -> Result<AsyncTrainingResult> {
    cfg.validate()?;
    let family = cfg.env.family();
    let set = AgentSet::build(cfg, &family);
    let evaluator = SyntheticEvaluator;
    let updater = Arc::new(PolicyUpdater {
        handles: set.handles.clone(),
        rule: UpdateRule {
            kind: cfg.train.objective,
            loss: cfg.train.loss,
            step_size: cfg.train.step_size,
            natural: cfg.train.natural,
            max_delta: cfg.train.max_delta,
        },
    });
    let agents: Vec<AgentId> = set.handles.keys().copied().collect();
    let dispatcher = Dispatcher::new(
        &agents,
        cfg.train.threshold,
        cfg.train.filter,
        mode,
        updater,
    )?;
    let train_seed = derive_seed(cfg.seed, TRAIN_STREAM);
    for round in 0..cfg.train.rounds {
        let ids: Vec<u64> = (0..cfg.train.tasks_per_round as u64)
            .map(|i| (round * cfg.train.tasks_per_round) as u64 + i)
            .collect();
        let trees: Vec<Vec<NodeRecord>> = ids
            .par_iter()
            .map(|&id| {
                let task = cfg.env.task(&family, TRAIN_STREAM, id)?;
                let mut rng = SearchRng::seed_from_u64(derive_seed(train_seed, id));
                rollout(cfg, &set, &task, &evaluator, &mut rng)
            })
            .collect::<Result<_>>()?;
        for records in trees {
            dispatcher.submit(records)?;
        }
    }
    let report = dispatcher.finish();
    let policies = set
        .handles
        .iter()
        .map(|(a, h)| (*a, (*h.snapshot()).clone()))
        .collect();
    Ok(AsyncTrainingResult { report, policies })
}

/// First update count at which `pass1_exact` reaches `target`.
pub fn updates_to_target(rows: &[ResultRow], target: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.pass1_exact >= target)
        .map(|r| r.updates)
}

/// One line of a mode comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub row: ResultRow,
    pub accounting: Accounting,
}

pub const SUMMARY_HEADER: &str = "label,expansions,records_trained,checkpoint,updates,pass1,pass1_exact,pass1_mcts,pass_n,deep_fraction";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.label,
            s.accounting.expansions,
            s.accounting.records_trained,
            s.row.checkpoint,
            s.row.updates,
            fmt_metric(s.row.pass1),
            fmt_metric(s.row.pass1_exact),
            fmt_metric(s.row.pass1_mcts),
            fmt_metric(s.row.pass_n),
            fmt_metric(s.row.deep_fraction),
        );
    }
    out
}

/// Check that runs are comparable: same tasks and seeds, and identical
/// expansion and trained-record totals.
pub fn check_equal_compute(results: &[ExperimentResult]) -> Result<()> {
    let Some(first) = results.first() else {
        return Ok(());
    };
    for r in &results[1..] {
        let (a, b) = (&first.config, &r.config);
        if a.env != b.env || a.eval.tasks != b.eval.tasks || a.seed != b.seed {
            return Err(Error::Mismatch(format!(
                "{} and {} use different task sets or seeds",
                a.label(),
                b.label()
            )));
        }
        if first.accounting.expansions != r.accounting.expansions {
            return Err(Error::Mismatch(format!(
                "expansions differ: {} has {}, {} has {}",
                a.label(),
                first.accounting.expansions,
                b.label(),
                r.accounting.expansions
            )));
        }
        if first.accounting.records_trained != r.accounting.records_trained {
            return Err(Error::Mismatch(format!(
                "trained records differ: {} has {}, {} has {}",
                a.label(),
                first.accounting.records_trained,
                b.label(),
                r.accounting.records_trained
            )));
        }
    }
    Ok(())
}

/// Summary row per result: the final checkpoint, or for homo runs the
/// checkpoint with the best `pass1_mcts`.
pub fn summarize(results: &[ExperimentResult]) -> Result<Vec<SummaryRow>> {
    check_equal_compute(results)?;
    results
        .iter()
        .map(|r| {
            let mut searched = r.rows.iter().filter(|row| !row.pass1_mcts.is_nan());
            let row = if r.config.mode == Mode::Homo {
                searched.fold(None::<&ResultRow>, |best, row| match best {
                    Some(b) if b.pass1_mcts >= row.pass1_mcts => Some(b),
                    _ => Some(row),
                })
            } else {
                searched.next_back()
            }
            .ok_or_else(|| {
                Error::InvalidData(format!("{} has no searched checkpoint", r.config.label()))
            })?;
            Ok(SummaryRow {
                label: r.config.label(),
                row: row.clone(),
                accounting: r.accounting,
            })
        })
        .collect()
}

/// Copies of `base` for each mode. `single` expands to one run per
/// configured agent, labelled `single-a1`, `single-a2`, ...
pub fn mode_variants(base: &ExperimentConfig, modes: &[Mode]) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for &mode in modes {
        if mode == Mode::Single {
            for (i, a) in base.agents.iter().enumerate() {
                out.push(ExperimentConfig {
                    mode,
                    agents: vec![a.clone()],
                    name: format!("single-a{}", i + 1),
                    ..base.clone()
                });
            }
        } else {
            out.push(ExperimentConfig {
                mode,
                name: String::new(),
                ..base.clone()
            });
        }
    }
    out
}

/// Run every configuration and summarize.
pub fn compare_modes(
    configs: &[ExperimentConfig],
) -> Result<(Vec<ExperimentResult>, Vec<SummaryRow>)> {
    if let Some(first) = configs.first() {
        if let Some(c) = configs.iter().find(|c| {
            c.env != first.env || c.eval.tasks != first.eval.tasks || c.seed != first.seed
        }) {
            return Err(Error::Mismatch(format!(
                "{} does not share the task set and seed of {}",
                c.label(),
                first.label()
            )));
        }
    }
    let results = configs
        .iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&results)?;
    Ok((results, summary))
}
