//! Density-based clustering of embedding vectors.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbscanLabel {
    Cluster(usize),
    Noise,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A point is a core point when at least `min_pts` points, itself
/// included, lie within Euclidean distance `eps`. Clusters are connected
/// components of core points plus the border points they reach; clusters
/// are numbered in order of their first point.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Vec<DbscanLabel>> {
    if let Some(first) = points.first() {
        if let Some(p) = points.iter().find(|p| p.len() != first.len()) {
            return Err(Error::Shape {
                expected: first.len(),
                actual: p.len(),
            });
        }
    }
    if !(eps >= 0.0) {
        return Err(Error::config("eps", "must be non-negative"));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| dist2(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![DbscanLabel::Noise; n];
    let mut assigned = vec![false; n];
    let mut next = 0;
    for start in 0..n {
        if assigned[start] || !core[start] {
            continue;
        }
        let id = next;
        next += 1;
        let mut stack = vec![start];
        assigned[start] = true;
        labels[start] = DbscanLabel::Cluster(id);
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if !assigned[q] {
                    assigned[q] = true;
                    labels[q] = DbscanLabel::Cluster(id);
                    stack.push(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Clusters found by [`dbscan`], each noise point counting as its own.
pub fn cluster_count(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<usize> {
    let labels = dbscan(points, eps, min_pts)?;
    let clusters = labels
        .iter()
        .filter_map(|l| match l {
            DbscanLabel::Cluster(c) => Some(*c + 1),
            DbscanLabel::Noise => None,
        })
        .max()
        .unwrap_or(0);
    let noise = labels.iter().filter(|l| **l == DbscanLabel::Noise).count();
    Ok(clusters + noise)
}

/// Mean cluster count over tasks.
pub fn aec(per_task: &[Vec<Vec<f64>>], eps: f64, min_pts: usize) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::InvalidData("no tasks".into()));
    }
    let mut total = 0usize;
    for (i, set) in per_task.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::InvalidData(format!("task {i} has no vectors")));
        }
        total += cluster_count(set, eps, min_pts)?;
    }
    Ok(total as f64 / per_task.len() as f64)
}
