//! Linear reward model over public features of a candidate.
//!
//! The model scores a solution from what is visible at selection time:
//! public test outcomes, a noisy hint channel published with the task,
//! and simple properties of the answer and of the node that produced it.
//! Labels come from the hidden private tests and are only read when
//! building a training set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environment::{PublicReport, TaskView};
use crate::error::{Error, Result};
use crate::search::SearchTrace;
use crate::tree::{passing_nodes, SearchNode};
use crate::types::{AgentId, Bits, NodeId};

mod synthetic;

pub use synthetic::{separable_examples, shuffle_labels, SyntheticRm};

const BASE_FEATURES: [&str; 5] = [
    "public_pass",
    "hint_agreement",
    "bit_density",
    "log_depth",
    "public_coverage",
];

/// Feature layout: five task/solution features then one indicator per agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub num_agents: usize,
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        BASE_FEATURES.len() + self.num_agents
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        BASE_FEATURES
            .iter()
            .map(|s| s.to_string())
            .chain((1..=self.num_agents).map(|a| format!("agent_{a}")))
            .collect()
    }
}

/// Feature vector of one candidate. Reads only the public view of the task
/// and the public slice of its evaluation.
pub fn featurize(
    task: TaskView<'_>,
    bits: &Bits,
    report: &PublicReport,
    depth: usize,
    agent: AgentId,
    spec: &FeatureSpec,
) -> Vec<f64> {
    let m = task.len.max(1) as f64;
    let agree = bits
        .iter()
        .zip(task.hints.iter())
        .filter(|(a, b)| a == b)
        .count();
    let mut f = vec![
        report.public_pass_rate(),
        agree as f64 / m,
        bits.count_ones() as f64 / m,
        (1.0 + depth as f64).ln(),
        task.public_count as f64 / m,
    ];
    f.extend((1..=spec.num_agents).map(|a| if a == agent.0 { 1.0 } else { 0.0 }));
    f
}

pub fn node_features(task: TaskView<'_>, node: &SearchNode, spec: &FeatureSpec) -> Vec<f64> {
    featurize(
        task,
        &node.solution.bits,
        &node.eval_report.public_view(),
        node.depth,
        node.solution.source_agent,
        spec,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmExample {
    pub task_id: u64,
    pub node_id: NodeId,
    pub features: Vec<f64>,
    /// 1 when the candidate passes the private tests.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmPair {
    pub task_id: u64,
    /// Row of the winning example in the dataset.
    pub win: usize,
    /// Row of the losing example.
    pub lose: usize,
    pub features_w: Vec<f64>,
    pub features_l: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl RmModel {
    pub fn zeros(dim: usize) -> Self {
        RmModel {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Raw (pre-sigmoid) score.
    pub fn score(&self, features: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.weights.len() {
            return Err(Error::Shape {
                expected: self.weights.len(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: RmModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidData("model parameters must be finite".into()));
        }
        Ok(model)
    }
}

/// Mean of `(σ(score) - label)^2`.
pub fn mse_loss(model: &RmModel, examples: &[RmExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples
        .iter()
        .map(|e| {
            let d = sigmoid(model.score(&e.features)) - e.label as f64;
            d * d
        })
        .sum::<f64>()
        / examples.len() as f64
}

/// Gradient of [`mse_loss`] as `(d weights, d bias)`.
pub fn mse_grad(model: &RmModel, examples: &[RmExample]) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; model.weights.len()];
    let mut gb = 0.0;
    if examples.is_empty() {
        return (gw, gb);
    }
    let n = examples.len() as f64;
    for e in examples {
        let p = sigmoid(model.score(&e.features));
        let ds = 2.0 * (p - e.label as f64) * p * (1.0 - p) / n;
        for (g, x) in gw.iter_mut().zip(&e.features) {
            *g += ds * x;
        }
        gb += ds;
    }
    (gw, gb)
}

/// Mean of `-ln σ(R_w - R_l)`.
pub fn bt_loss(model: &RmModel, pairs: &[RmPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| -log_sigmoid(model.score(&p.features_w) - model.score(&p.features_l)))
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn bt_grad(model: &RmModel, pairs: &[RmPair]) -> (Vec<f64>, f64) {
    let mut gw = vec![0.0; model.weights.len()];
    if pairs.is_empty() {
        return (gw, 0.0);
    }
    let n = pairs.len() as f64;
    for p in pairs {
        let margin = model.score(&p.features_w) - model.score(&p.features_l);
        let dm = -sigmoid(-margin) / n;
        for ((g, xw), xl) in gw.iter_mut().zip(&p.features_w).zip(&p.features_l) {
            *g += dm * (xw - xl);
        }
    }
    (gw, 0.0)
}

/// Mean of `R_w - R_l` over pairs.
pub fn mean_margin(model: &RmModel, pairs: &[RmPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| model.score(&p.features_w) - model.score(&p.features_l))
        .sum::<f64>()
        / pairs.len() as f64
}

/// Loss per epoch, index 0 being the loss of the zero model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub model: RmModel,
    pub losses: Vec<f64>,
}

fn descend(model: &mut RmModel, grad: (Vec<f64>, f64), lr: f64) {
    for (w, g) in model.weights.iter_mut().zip(grad.0) {
        *w -= lr * g;
    }
    model.bias -= lr * grad.1;
}

/// Full-batch gradient descent on the pointwise loss from a zero model.
pub fn train_mse_history(examples: &[RmExample], epochs: usize, lr: f64) -> Result<TrainHistory> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidData("no training examples".into()))?;
    let dim = first.features.len();
    if let Some(e) = examples.iter().find(|e| e.features.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: e.features.len(),
        });
    }
    let positives = examples.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == examples.len() {
        log::warn!(
            "reward-model data has a single class ({positives} of {} positive)",
            examples.len()
        );
    }
    let mut model = RmModel::zeros(dim);
    let mut losses = vec![mse_loss(&model, examples)];
    for _ in 0..epochs {
        let g = mse_grad(&model, examples);
        descend(&mut model, g, lr);
        losses.push(mse_loss(&model, examples));
    }
    Ok(TrainHistory { model, losses })
}

pub fn train_mse(examples: &[RmExample], epochs: usize, lr: f64) -> Result<RmModel> {
    train_mse_history(examples, epochs, lr).map(|h| h.model)
}

/// Full-batch gradient descent on the pairwise loss from a zero model.
/// The history holds the mean margin after each epoch.
pub fn train_bt_history(pairs: &[RmPair], epochs: usize, lr: f64) -> Result<TrainHistory> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidData("no preference pairs".into()))?;
    let dim = first.features_w.len();
    if let Some(p) = pairs
        .iter()
        .find(|p| p.features_w.len() != dim || p.features_l.len() != dim)
    {
        return Err(Error::Shape {
            expected: dim,
            actual: p.features_w.len().max(p.features_l.len()),
        });
    }
    let mut model = RmModel::zeros(dim);
    let mut margins = vec![mean_margin(&model, pairs)];
    for _ in 0..epochs {
        let g = bt_grad(&model, pairs);
        descend(&mut model, g, lr);
        margins.push(mean_margin(&model, pairs));
    }
    Ok(TrainHistory {
        model,
        losses: margins,
    })
}

pub fn train_bt(pairs: &[RmPair], epochs: usize, lr: f64) -> Result<RmModel> {
    train_bt_history(pairs, epochs, lr).map(|h| h.model)
}

/// Ranks starting at 1, tied values sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Benchmark metrics of a score vector against binary labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmMetrics {
    pub adaptive_acc: f64,
    /// NaN when the benchmark has a single class.
    pub auc_roc: f64,
    pub auc_defined: bool,
    pub spearman: f64,
    pub n: usize,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn score_metrics(scores: &[f64], labels: &[u8]) -> Result<RmMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidData("empty benchmark".into()));
    }
    let threshold = median(scores);
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > threshold) == (**l == 1))
        .count();
    let adaptive_acc = correct as f64 / scores.len() as f64;

    let ranks = midranks(scores);
    let n1 = labels.iter().filter(|l| **l == 1).count();
    let n0 = labels.len() - n1;
    let (auc_roc, auc_defined) = if n1 == 0 || n0 == 0 {
        log::warn!("benchmark has a single class; AUC undefined");
        (f64::NAN, false)
    } else {
        let pos_rank: f64 = ranks
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == 1)
            .map(|(r, _)| r)
            .sum();
        let u = pos_rank - (n1 * (n1 + 1)) as f64 / 2.0;
        (u / (n1 as f64 * n0 as f64), true)
    };
    let label_ranks = midranks(&labels.iter().map(|&l| l as f64).collect::<Vec<_>>());
    let spearman = pearson(&ranks, &label_ranks);
    Ok(RmMetrics {
        adaptive_acc,
        auc_roc,
        auc_defined,
        spearman,
        n: scores.len(),
    })
}

pub fn eval_rm(model: &RmModel, benchmark: &[RmExample]) -> Result<RmMetrics> {
    let scores = benchmark
        .iter()
        .map(|e| {
            model.check_dim(&e.features)?;
            Ok(model.score(&e.features))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = benchmark.iter().map(|e| e.label).collect();
    score_metrics(&scores, &labels)
}

/// Highest score wins; equal scores go to the lowest id.
pub fn argmax_lowest_id(candidates: &[(NodeId, f64)]) -> Option<NodeId> {
    candidates
        .iter()
        .copied()
        .fold(None, |best: Option<(NodeId, f64)>, (id, s)| match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < id) => Some((bid, bs)),
            _ => Some((id, s)),
        })
        .map(|(id, _)| id)
}

/// Passing node with the highest reward-model score, or `None` when no node
/// passes the public tests.
pub fn select_final(
    trace: &SearchTrace,
    task: TaskView<'_>,
    rm: &RmModel,
    spec: &FeatureSpec,
) -> Option<NodeId> {
    let candidates: Vec<(NodeId, f64)> = passing_nodes(&trace.tree)
        .into_iter()
        .map(|id| {
            (
                id,
                rm.score(&node_features(task, trace.tree.node(id), spec)),
            )
        })
        .collect();
    argmax_lowest_id(&candidates)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmDataset {
    pub feature_names: Vec<String>,
    pub examples: Vec<RmExample>,
    pub pairs: Vec<RmPair>,
}

/// Pointwise examples and preference pairs from searched trees.
///
/// With `balance` on, each task keeps `min(#pass, #fail)` examples of each
/// label, lowest node ids first. Pairs match the i-th passing example of a
/// task with its i-th failing one, so each failing example is used at most
/// once and a task yields `min(#pass, #fail)` pairs.
pub fn build_rm_dataset(
    traces: &[(&SearchTrace, TaskView<'_>)],
    balance: bool,
    spec: &FeatureSpec,
) -> RmDataset {
    let groups = traces.iter().map(|(trace, task)| {
        let examples = trace
            .tree
            .nodes()
            .iter()
            .map(|node| RmExample {
                task_id: trace.task_id,
                node_id: node.id,
                features: node_features(*task, node, spec),
                label: node.eval_report.passes_private() as u8,
            })
            .collect();
        (trace.task_id, examples)
    });
    assemble_dataset(groups, balance, spec.names())
}

/// Apply the balancing and pairing rule of [`build_rm_dataset`] to
/// pre-featurized examples grouped by task.
pub fn assemble_dataset(
    groups: impl IntoIterator<Item = (u64, Vec<RmExample>)>,
    balance: bool,
    feature_names: Vec<String>,
) -> RmDataset {
    let mut examples = Vec::new();
    let mut pairs = Vec::new();
    for (task_id, group) in groups {
        let (mut pos, mut neg): (Vec<_>, Vec<_>) = group.into_iter().partition(|e| e.label == 1);
        if balance {
            let keep = pos.len().min(neg.len());
            pos.truncate(keep);
            neg.truncate(keep);
        }
        let pos_start = examples.len();
        let neg_start = pos_start + pos.len();
        for (i, (w, l)) in pos.iter().zip(&neg).enumerate() {
            pairs.push(RmPair {
                task_id,
                win: pos_start + i,
                lose: neg_start + i,
                features_w: w.features.clone(),
                features_l: l.features.clone(),
            });
        }
        examples.extend(pos);
        examples.extend(neg);
    }
    RmDataset {
        feature_names,
        examples,
        pairs,
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    feature_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    task_id: u64,
    win: usize,
    lose: usize,
}

impl RmDataset {
    /// Examples as JSON lines after a header line; pairs as JSON lines of
    /// row references.
    pub fn write(&self, examples_path: &Path, pairs_path: &Path) -> Result<()> {
        let mut out = serde_json::to_string(&DatasetHeader {
            feature_names: self.feature_names.clone(),
        })
        .expect("serializable");
        out.push('\n');
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        let mut f =
            std::fs::File::create(examples_path).map_err(|e| Error::io(examples_path, e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(examples_path, e))?;

        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(
                &serde_json::to_string(&PairLine {
                    task_id: p.task_id,
                    win: p.win,
                    lose: p.lose,
                })
                .expect("serializable"),
            );
            out.push('\n');
        }
        std::fs::write(pairs_path, out).map_err(|e| Error::io(pairs_path, e))
    }

    pub fn read(examples_path: &Path, pairs_path: Option<&Path>) -> Result<Self> {
        let parse_err = |path: &Path, line: usize, e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        };
        let text =
            std::fs::read_to_string(examples_path).map_err(|e| Error::io(examples_path, e))?;
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| Error::InvalidData(format!("{} is empty", examples_path.display())))?;
        let header: DatasetHeader =
            serde_json::from_str(head).map_err(|e| parse_err(examples_path, 1, e))?;
        let examples = lines
            .map(|(i, l)| {
                serde_json::from_str::<RmExample>(l).map_err(|e| parse_err(examples_path, i + 1, e))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(e) = examples
            .iter()
            .find(|e| e.features.len() != header.feature_names.len())
        {
            return Err(Error::Shape {
                expected: header.feature_names.len(),
                actual: e.features.len(),
            });
        }
        let mut pairs = Vec::new();
        if let Some(pp) = pairs_path {
            let text = std::fs::read_to_string(pp).map_err(|e| Error::io(pp, e))?;
            for (i, l) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let line: PairLine =
                    serde_json::from_str(l).map_err(|e| parse_err(pp, i + 1, e))?;
                let get = |row: usize| {
                    examples.get(row).ok_or(Error::IndexOutOfRange {
                        index: row,
                        len: examples.len(),
                    })
                };
                let (w, lo) = (get(line.win)?, get(line.lose)?);
                pairs.push(RmPair {
                    task_id: line.task_id,
                    win: line.win,
                    lose: line.lose,
                    features_w: w.features.clone(),
                    features_l: lo.features.clone(),
                });
            }
        }
        Ok(RmDataset {
            feature_names: header.feature_names,
            examples,
            pairs,
        })
    }

    /// Number of examples per task.
    pub fn per_task_counts(&self) -> BTreeMap<u64, (usize, usize)> {
        let mut out: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for e in &self.examples {
            let c = out.entry(e.task_id).or_default();
            if e.label == 1 {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        out
    }
}
