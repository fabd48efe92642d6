//! Synthetic pointwise benchmarks with known label structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::{assemble_dataset, sigmoid, RmDataset, RmExample};
use crate::SearchRng;

/// Grouped examples whose labels follow a logistic model with one
/// task-level feature (shared by every candidate of a task) and one
/// candidate-level feature, plus pure-noise columns.
///
/// Pairwise training only sees within-task differences, so the task-level
/// column cancels out of every pair; pointwise training can still use it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRm {
    pub tasks: usize,
    pub per_task: usize,
    pub task_effect: f64,
    pub item_effect: f64,
    pub noise_features: usize,
}

impl Default for SyntheticRm {
    fn default() -> Self {
        SyntheticRm {
            tasks: 200,
            per_task: 8,
            task_effect: 2.0,
            item_effect: 2.0,
            noise_features: 2,
        }
    }
}

impl SyntheticRm {
    pub fn feature_names(&self) -> Vec<String> {
        ["task_level", "item_level"]
            .iter()
            .map(|s| s.to_string())
            .chain((1..=self.noise_features).map(|i| format!("noise_{i}")))
            .collect()
    }

    /// Unbalanced examples with within-task pairs.
    pub fn generate(&self, seed: u64) -> RmDataset {
        let mut rng = SearchRng::seed_from_u64(seed);
        let mut groups = Vec::with_capacity(self.tasks);
        for t in 0..self.tasks {
            let u: f64 = StandardNormal.sample(&mut rng);
            let group = (0..self.per_task)
                .map(|node| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let mut features = vec![u, x];
                    features.extend(
                        (0..self.noise_features)
                            .map(|_| -> f64 { StandardNormal.sample(&mut rng) }),
                    );
                    let p = sigmoid(self.task_effect * u + self.item_effect * x);
                    RmExample {
                        task_id: t as u64,
                        node_id: node,
                        features,
                        label: rng.random_bool(p) as u8,
                    }
                })
                .collect();
            groups.push((t as u64, group));
        }
        assemble_dataset(groups, false, self.feature_names())
    }
}

/// `n` single-feature examples split by the sign of the feature with a gap
/// around zero, so a positive weight separates them perfectly.
pub fn separable_examples(n: usize, seed: u64) -> Vec<RmExample> {
    let mut rng = SearchRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let z: f64 = StandardNormal.sample(&mut rng);
            let mag = 0.1 + z.abs();
            RmExample {
                task_id: i as u64,
                node_id: 0,
                features: vec![if label == 1 { mag } else { -mag }],
                label,
            }
        })
        .collect()
}

/// Same examples with the labels permuted uniformly at random.
pub fn shuffle_labels(examples: &[RmExample], seed: u64) -> Vec<RmExample> {
    let mut rng = SearchRng::seed_from_u64(seed);
    let mut labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut rng);
    examples
        .iter()
        .zip(labels)
        .map(|(e, label)| RmExample { label, ..e.clone() })
        .collect()
}
