//! Synthetic verifiable tasks with a public/private test split.
//!
//! A task asks for a hidden bit vector (the target). Test case `i` passes
//! iff the candidate's bit `i` matches the target. The first `P` tests are
//! public; the rest are private and never reach an agent.
//!
//! Every task in a [`TaskFamily`] is generated as `target = prompt ^ key`
//! for a uniformly random public prompt and a family-wide hidden key, so
//! what an agent learns on one task transfers to the next.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bits, Solution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Visibility {
    Public,
    Private,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub index: usize,
    pub visibility: Visibility,
    pub expected: bool,
}

/// A verifiable problem. The target and private tests are only readable
/// inside this module.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    id: u64,
    seed: u64,
    target: Bits,
    prompt: Bits,
    hints: Bits,
    tests: Vec<TestCase>,
    public_count: usize,
}

/// What an agent is allowed to see of a task.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    pub id: u64,
    pub len: usize,
    pub public_count: usize,
    pub prompt: &'a Bits,
    pub hints: &'a Bits,
}

impl Task {
    /// Build a task from explicit parts; `hints` defaults to the target.
    pub fn from_parts(
        id: u64,
        target: Bits,
        prompt: Bits,
        hints: Option<Bits>,
        public_count: usize,
    ) -> Result<Task> {
        let m = target.len();
        if public_count == 0 || public_count > m {
            return Err(Error::TaskShape(format!(
                "public count {public_count} must be in 1..={m}"
            )));
        }
        if prompt.len() != m {
            return Err(Error::Shape {
                expected: m,
                actual: prompt.len(),
            });
        }
        let hints = hints.unwrap_or_else(|| target.clone());
        if hints.len() != m {
            return Err(Error::Shape {
                expected: m,
                actual: hints.len(),
            });
        }
        let tests = target
            .iter()
            .enumerate()
            .map(|(index, expected)| TestCase {
                index,
                visibility: if index < public_count {
                    Visibility::Public
                } else {
                    Visibility::Private
                },
                expected,
            })
            .collect();
        Ok(Task {
            id,
            seed: 0,
            target,
            prompt,
            hints,
            tests,
            public_count,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn public_count(&self) -> usize {
        self.public_count
    }

    pub fn private_count(&self) -> usize {
        self.len() - self.public_count
    }

    pub fn prompt(&self) -> &Bits {
        &self.prompt
    }

    /// Noisy per-bit hint channel, readable by reward models.
    pub fn hints(&self) -> &Bits {
        &self.hints
    }

    pub fn public_tests(&self) -> &[TestCase] {
        &self.tests[..self.public_count]
    }

    pub fn view(&self) -> TaskView<'_> {
        TaskView {
            id: self.id,
            len: self.len(),
            public_count: self.public_count,
            prompt: &self.prompt,
            hints: &self.hints,
        }
    }

    /// Probability that independent per-bit flips of the prompt, bit `i`
    /// flipped with probability `flip_prob(i)`, reproduce the full target.
    pub fn solve_probability(&self, flip_prob: impl Fn(usize) -> f64) -> f64 {
        self.prompt
            .xor(&self.target)
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let p = flip_prob(i).clamp(0.0, 1.0);
                if z {
                    p
                } else {
                    1.0 - p
                }
            })
            .product()
    }

    /// Same task with every test public, used for training-time rollouts.
    pub fn all_public(&self) -> Task {
        Task::from_parts(
            self.id,
            self.target.clone(),
            self.prompt.clone(),
            Some(self.hints.clone()),
            self.len(),
        )
        .map(|t| Task {
            seed: self.seed,
            ..t
        })
        .expect("valid task")
    }
}

/// Family of tasks sharing one hidden key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub key: Bits,
    /// Flip probability η of the hint channel.
    pub hint_noise: f64,
}

impl TaskFamily {
    pub fn new(key: Bits, hint_noise: f64) -> Self {
        TaskFamily { key, hint_noise }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, hint_noise: f64, rng: &mut R) -> Self {
        TaskFamily {
            key: Bits((0..len).map(|_| rng.random::<bool>()).collect()),
            hint_noise,
        }
    }

    pub fn len(&self) -> usize {
        self.key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key.is_empty()
    }

    /// Draw a task with a uniformly random target. The first `public_count`
    /// tests are public.
    pub fn generate_task<R: Rng + ?Sized>(
        &self,
        id: u64,
        public_count: usize,
        rng: &mut R,
    ) -> Result<Task> {
        let m = self.len();
        if public_count == 0 || public_count > m {
            return Err(Error::TaskShape(format!(
                "public count {public_count} must be in 1..={m}"
            )));
        }
        let seed: u64 = rng.random();
        self.generate_seeded(id, public_count, seed)
    }

    /// Deterministic generation from a per-task seed.
    pub fn generate_seeded(&self, id: u64, public_count: usize, seed: u64) -> Result<Task> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.len();
        let prompt = Bits((0..m).map(|_| rng.random::<bool>()).collect());
        let target = prompt.xor(&self.key);
        let hints = Bits(
            target
                .iter()
                .map(|b| b ^ rng.random_bool(self.hint_noise))
                .collect(),
        );
        let task = Task::from_parts(id, target, prompt, Some(hints), public_count)?;
        Ok(Task { seed, ..task })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCase {
    pub index: usize,
    pub produced: bool,
    pub expected: bool,
}

/// Outcome of running a candidate against every test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub passed_public: usize,
    pub total_public: usize,
    pub passed_private: usize,
    pub total_private: usize,
    pub failed_public_cases: Vec<FailedCase>,
}

/// The public slice of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicReport {
    pub passed_public: usize,
    pub total_public: usize,
    pub failed_public_cases: Vec<FailedCase>,
}

impl EvalReport {
    pub fn public_view(&self) -> PublicReport {
        PublicReport {
            passed_public: self.passed_public,
            total_public: self.total_public,
            failed_public_cases: self.failed_public_cases.clone(),
        }
    }

    pub fn passes_public(&self) -> bool {
        self.passed_public == self.total_public
    }

    pub fn passes_private(&self) -> bool {
        self.passed_private == self.total_private
    }

    /// Private pass rate; 1.0 when there are no private tests.
    pub fn private_pass_rate(&self) -> f64 {
        if self.total_private == 0 {
            1.0
        } else {
            self.passed_private as f64 / self.total_private as f64
        }
    }

    pub fn public_pass_rate(&self) -> f64 {
        self.passed_public as f64 / self.total_public as f64
    }

    /// Passes the full hidden suite (public and private).
    pub fn solved(&self) -> bool {
        self.passes_public() && self.passes_private()
    }
}

impl PublicReport {
    pub fn public_pass_rate(&self) -> f64 {
        self.passed_public as f64 / self.total_public as f64
    }
}

pub fn evaluate(task: &Task, solution: &Solution) -> Result<EvalReport> {
    evaluate_bits(task, &solution.bits)
}

pub fn evaluate_bits(task: &Task, bits: &Bits) -> Result<EvalReport> {
    if bits.len() != task.len() {
        return Err(Error::Shape {
            expected: task.len(),
            actual: bits.len(),
        });
    }
    let mut report = EvalReport {
        passed_public: 0,
        total_public: task.public_count,
        passed_private: 0,
        total_private: task.private_count(),
        failed_public_cases: Vec::new(),
    };
    for tc in &task.tests {
        let produced = bits.get(tc.index);
        let ok = produced == tc.expected;
        match (tc.visibility, ok) {
            (Visibility::Public, true) => report.passed_public += 1,
            (Visibility::Public, false) => report.failed_public_cases.push(FailedCase {
                index: tc.index,
                produced,
                expected: tc.expected,
            }),
            (Visibility::Private, true) => report.passed_private += 1,
            (Visibility::Private, false) => {}
        }
    }
    Ok(report)
}

/// Binary reward. At inference only public tests count; in training mode
/// every test must pass.
pub fn public_reward(report: &EvalReport, training_mode: bool) -> f64 {
    let ok = if training_mode {
        report.solved()
    } else {
        report.passes_public()
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub passed: usize,
    pub total: usize,
    pub pass_rate: f64,
}

/// Diagnostic feedback handed to a refining agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub summary: FeedbackSummary,
    pub failures: Vec<FailedCase>,
}

impl FeedbackReport {
    /// Pass/fail counts with the failing cases withheld.
    pub fn summary_only(&self) -> FeedbackReport {
        FeedbackReport {
            summary: self.summary,
            failures: Vec::new(),
        }
    }

    pub fn empty() -> FeedbackReport {
        FeedbackReport {
            summary: FeedbackSummary {
                passed: 0,
                total: 0,
                pass_rate: 1.0,
            },
            failures: Vec::new(),
        }
    }
}

/// Feedback from the public slice of a report, failures in test order.
pub fn make_feedback(report: &EvalReport) -> FeedbackReport {
    make_feedback_public(&report.public_view())
}

pub fn make_feedback_public(report: &PublicReport) -> FeedbackReport {
    let mut failures = report.failed_public_cases.clone();
    failures.sort_by_key(|f| f.index);
    FeedbackReport {
        summary: FeedbackSummary {
            passed: report.passed_public,
            total: report.total_public,
            pass_rate: report.public_pass_rate(),
        },
        failures,
    }
}

/// Pluggable validation backend.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, task: &Task, solution: &Solution) -> Result<EvalReport>;

    fn make_feedback(&self, report: &EvalReport) -> FeedbackReport {
        make_feedback(report)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticEvaluator;

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&self, task: &Task, solution: &Solution) -> Result<EvalReport> {
        evaluate(task, solution)
    }
}

/// Named evaluator backends, selected by `environment.backend`.
#[derive(Clone, Default)]
pub struct EvaluatorRegistry {
    external: BTreeMap<String, Arc<dyn Evaluator>>,
}

impl EvaluatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, evaluator: Arc<dyn Evaluator>) {
        self.external.insert(name.into(), evaluator);
    }

    /// Resolve `synthetic` or `external:<name>`.
    pub fn resolve(&self, backend: &str) -> Result<Arc<dyn Evaluator>> {
        if backend == "synthetic" {
            return Ok(Arc::new(SyntheticEvaluator));
        }
        if let Some(name) = backend.strip_prefix("external:") {
            return self.external.get(name).cloned().ok_or_else(|| {
                Error::config(
                    "environment.backend",
                    format!("no evaluator named `{name}`"),
                )
            });
        }
        Err(Error::config(
            "environment.backend",
            format!("expected `synthetic` or `external:<name>`, got `{backend}`"),
        ))
    }
}

/// One line of a task-set file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub target: String,
    pub prompt: String,
    pub hints: String,
    pub seed: u64,
}

impl Task {
    pub fn to_record(&self) -> TaskRecord {
        TaskRecord {
            id: self.id,
            m: self.len(),
            p: self.public_count,
            target: self.target.to_hex(),
            prompt: self.prompt.to_hex(),
            hints: self.hints.to_hex(),
            seed: self.seed,
        }
    }

    pub fn from_record(r: &TaskRecord) -> Result<Task> {
        let target = Bits::from_hex(&r.target, r.m)?;
        let prompt = Bits::from_hex(&r.prompt, r.m)?;
        let hints = Bits::from_hex(&r.hints, r.m)?;
        let task = Task::from_parts(r.id, target, prompt, Some(hints), r.p)?;
        Ok(Task {
            seed: r.seed,
            ..task
        })
    }
}

/// Write tasks as JSON lines.
pub fn write_task_set(path: &Path, tasks: &[Task]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in tasks {
        let line = serde_json::to_string(&t.to_record()).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_task_set(path: &Path) -> Result<Vec<Task>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        tasks.push(Task::from_record(&rec).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AgentId;

    fn sol(bits: Bits) -> Solution {
        Solution {
            bits,
            source_agent: AgentId(1),
            born_at: 0,
        }
    }

    fn family(m: usize, seed: u64) -> TaskFamily {
        TaskFamily::random(m, 0.1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn split_counts() {
        let t = family(8, 1)
            .generate_task(0, 4, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(t.public_tests().len(), 4);
        assert_eq!(t.private_count(), 4);
        assert!(t
            .public_tests()
            .iter()
            .all(|c| c.visibility == Visibility::Public));
    }

    #[test]
    fn no_private_tests_means_full_private_rate() {
        let t = family(1, 1)
            .generate_task(0, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let r = evaluate(&t, &sol(Bits(vec![false]))).unwrap();
        assert_eq!(r.total_private, 0);
        assert_eq!(r.private_pass_rate(), 1.0);
    }

    #[test]
    fn public_count_out_of_range() {
        let f = family(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            f.generate_task(0, 0, &mut rng),
            Err(Error::TaskShape(_))
        ));
        assert!(matches!(
            f.generate_task(0, 5, &mut rng),
            Err(Error::TaskShape(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let f = family(16, 3);
        let a = f
            .generate_task(7, 8, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = f
            .generate_task(7, 8, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_and_complement() {
        let target = Bits(vec![true, false, true, true, false, false]);
        let t = Task::from_parts(0, target.clone(), Bits::zeros(6), None, 3).unwrap();
        let r = evaluate(&t, &sol(target.clone())).unwrap();
        assert_eq!((r.passed_public, r.passed_private), (3, 3));
        assert!(r.failed_public_cases.is_empty());
        let r = evaluate(&t, &sol(target.complement())).unwrap();
        assert_eq!((r.passed_public, r.passed_private), (0, 0));
        assert_eq!(r.failed_public_cases.len(), 3);
    }

    #[test]
    fn shape_error() {
        let t = Task::from_parts(0, Bits::zeros(4), Bits::zeros(4), None, 2).unwrap();
        assert!(matches!(
            evaluate(&t, &sol(Bits::zeros(3))),
            Err(Error::Shape {
                expected: 4,
                actual: 3
            })
        ));
    }

    #[test]
    fn rewards() {
        let t = Task::from_parts(0, Bits::zeros(6), Bits::zeros(6), None, 4).unwrap();
        let r = evaluate(
            &t,
            &sol(Bits(vec![false, false, false, false, true, false])),
        )
        .unwrap();
        assert_eq!(public_reward(&r, false), 1.0);
        assert_eq!(public_reward(&r, true), 0.0);
        let r = evaluate(
            &t,
            &sol(Bits(vec![false, true, false, false, false, false])),
        )
        .unwrap();
        assert_eq!(public_reward(&r, false), 0.0);
    }

    #[test]
    fn feedback_contents() {
        let t = Task::from_parts(0, Bits::zeros(6), Bits::zeros(6), None, 4).unwrap();
        let r = evaluate(&t, &sol(Bits::zeros(6))).unwrap();
        let fb = make_feedback(&r);
        assert!(fb.failures.is_empty());
        assert_eq!(
            (fb.summary.passed, fb.summary.total, fb.summary.pass_rate),
            (4, 4, 1.0)
        );

        let r = evaluate(
            &t,
            &sol(Bits(vec![false, false, true, false, false, false])),
        )
        .unwrap();
        let fb = make_feedback(&r);
        assert_eq!(
            fb.failures,
            vec![FailedCase {
                index: 2,
                produced: true,
                expected: false
            }]
        );

        // private failures only
        let r = evaluate(&t, &sol(Bits(vec![false, false, false, false, true, true]))).unwrap();
        assert!(make_feedback(&r).failures.is_empty());
    }

    #[test]
    fn registry_resolves_backends() {
        let mut reg = EvaluatorRegistry::new();
        assert!(reg.resolve("synthetic").is_ok());
        assert!(reg.resolve("external:judge").is_err());
        reg.register("judge", Arc::new(SyntheticEvaluator));
        assert!(reg.resolve("external:judge").is_ok());
        assert!(reg.resolve("sandbox").is_err());
    }

    #[test]
    fn task_set_file_roundtrip() {
        let f = family(13, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tasks: Vec<Task> = (0..4)
            .map(|i| f.generate_task(i, 5, &mut rng).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_task_set(&path, &tasks).unwrap();
        assert_eq!(read_task_set(&path).unwrap(), tasks);
    }
}
