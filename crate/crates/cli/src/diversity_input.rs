//! Inputs of the `diversity` command.
//!
//! Three formats are accepted and merged by task id:
//!
//! * search traces (`*.jsonl`, or a directory of them) named `task_<id>.jsonl`;
//!   only solutions passing every test are kept,
//! * cluster files, CSV with header `task_id,solution_id,cluster`,
//! * vector files, CSV with header `task_id,kind,v0,v1,...`.
//!
//! Cluster labels override trace-derived equivalence classes and vectors
//! override trace-derived bit vectors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use arbor_core::diversity::{
    equivalence_labels, exact_bits_oracle, public_pattern_oracle, ClusterProfile,
};
use arbor_core::tree::{read_trace, NodeLine};
use arbor_core::{Bits, Error, Result};

/// How trace solutions are grouped when no cluster file is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Equivalence {
    ExactBits,
    PublicPattern,
}

#[derive(Clone, Debug, Default)]
pub struct TaskInput {
    /// Sampled solutions, known only from traces.
    pub total: Option<usize>,
    /// Correct solutions from traces.
    pub correct: Vec<Bits>,
    /// Public test count of the task, from traces.
    pub public_count: usize,
    /// Cluster label per correct solution, from a cluster file.
    pub labels: Option<Vec<String>>,
    /// Vectors from a vector file.
    pub vectors: Option<Vec<Vec<f64>>>,
}

impl TaskInput {
    /// Correct solutions known for the task.
    pub fn correct_count(&self) -> usize {
        match &self.labels {
            Some(l) => l.len(),
            None => self.correct.len(),
        }
    }

    pub fn profile(&self, eq: Equivalence) -> Result<ClusterProfile> {
        if let Some(labels) = &self.labels {
            return ClusterProfile::from_labels(labels);
        }
        let labels = match eq {
            Equivalence::ExactBits => equivalence_labels(&self.correct, exact_bits_oracle)?,
            Equivalence::PublicPattern => {
                equivalence_labels(&self.correct, public_pattern_oracle(self.public_count))?
            }
        };
        ClusterProfile::from_labels(&labels)
    }

    /// Supplied vectors, or the correct solutions as `lo`/`1` coordinates.
    pub fn vectors_or_bits(&self, lo: f64) -> Vec<Vec<f64>> {
        match &self.vectors {
            Some(v) => v.clone(),
            None => self
                .correct
                .iter()
                .map(|b| b.iter().map(|x| if x { 1.0 } else { lo }).collect())
                .collect(),
        }
    }
}

enum Format {
    Traces(Vec<PathBuf>),
    Clusters,
    Vectors,
}

fn classify(path: &Path) -> Result<Format> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        return Ok(Format::Traces(files));
    }
    if path.extension().is_some_and(|x| x == "csv") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header = text.lines().next().unwrap_or("").trim();
        return if header == "task_id,solution_id,cluster" {
            Ok(Format::Clusters)
        } else if header.starts_with("task_id,kind") {
            Ok(Format::Vectors)
        } else {
            Err(Error::InvalidData(format!(
                "{}: unrecognized CSV header {header:?}",
                path.display()
            )))
        };
    }
    Ok(Format::Traces(vec![path.to_path_buf()]))
}

/// Task id from a `task_<id>.jsonl` file name.
fn trace_task_id(path: &Path) -> Option<u64> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("task_")?
        .parse()
        .ok()
}

fn load_trace(path: &Path, fallback_id: u64, tasks: &mut BTreeMap<u64, TaskInput>) -> Result<()> {
    let lines: Vec<NodeLine> = read_trace(path)?;
    let entry = tasks
        .entry(trace_task_id(path).unwrap_or(fallback_id))
        .or_default();
    entry.total = Some(lines.len());
    for l in &lines {
        let e = &l.eval;
        entry.public_count = e.total_public;
        if e.passed_public == e.total_public && e.passed_private == e.total_private {
            entry
                .correct
                .push(Bits::from_hex(&l.bits, e.total_public + e.total_private)?);
        }
    }
    Ok(())
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(|f| f.trim().to_string()).collect()))
        .collect())
}

fn bad_row(path: &Path, line: usize, what: &str) -> Error {
    Error::InvalidData(format!("{}:{line}: {what}", path.display()))
}

fn load_clusters(path: &Path, tasks: &mut BTreeMap<u64, TaskInput>) -> Result<()> {
    for (line, fields) in csv_rows(path)? {
        let [task, _solution, cluster] = fields.as_slice() else {
            return Err(bad_row(path, line, "expected 3 fields"));
        };
        let task: u64 = task
            .parse()
            .map_err(|_| bad_row(path, line, "bad task_id"))?;
        tasks
            .entry(task)
            .or_default()
            .labels
            .get_or_insert_with(Vec::new)
            .push(cluster.clone());
    }
    Ok(())
}

fn load_vectors(
    path: &Path,
    kind: Option<&str>,
    tasks: &mut BTreeMap<u64, TaskInput>,
) -> Result<()> {
    for (line, fields) in csv_rows(path)? {
        if fields.len() < 3 {
            return Err(bad_row(
                path,
                line,
                "expected task_id, kind and at least one value",
            ));
        }
        if kind.is_some_and(|k| k != fields[1]) {
            continue;
        }
        let task: u64 = fields[0]
            .parse()
            .map_err(|_| bad_row(path, line, "bad task_id"))?;
        let values = fields[2..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad_row(path, line, "bad value"))?;
        tasks
            .entry(task)
            .or_default()
            .vectors
            .get_or_insert_with(Vec::new)
            .push(values);
    }
    Ok(())
}

/// Load and merge every input; `kind` keeps only vector rows of that kind.
pub fn load(inputs: &[PathBuf], kind: Option<&str>) -> Result<BTreeMap<u64, TaskInput>> {
    let mut tasks = BTreeMap::new();
    let mut ordinal = 0u64;
    for path in inputs {
        if !path.exists() {
            return Err(Error::InvalidData(format!(
                "{} does not exist",
                path.display()
            )));
        }
        match classify(path)? {
            Format::Traces(files) => {
                for f in files {
                    load_trace(&f, ordinal, &mut tasks)?;
                    ordinal += 1;
                }
            }
            Format::Clusters => load_clusters(path, &mut tasks)?,
            Format::Vectors => load_vectors(path, kind, &mut tasks)?,
        }
    }
    if tasks.is_empty() {
        return Err(Error::InvalidData("no tasks found in the inputs".into()));
    }
    Ok(tasks)
}
