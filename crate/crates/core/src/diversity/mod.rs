//! Solution-diversity metrics: pass@k, cluster coverage (DA@K and its
//! normalized area), effective cluster count, density-based cluster
//! counts over embeddings, and the Vendi score of gradient features.

mod dbscan;
mod vendi;

pub use dbscan::{aec, cluster_count, dbscan, DbscanLabel};
pub use vendi::{g_vendi, vendi_from_gram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Bits;

/// `ln(C(a, k) / C(n, k))` for `a <= n`, or `None` when `C(a, k) = 0`.
fn ln_choose_ratio(a: usize, n: usize, k: usize) -> Option<f64> {
    if a < k {
        return None;
    }
    // C(a,k)/C(n,k) = Π_{i<k} (a-i)/(n-i)
    Some((0..k).map(|i| ((a - i) as f64 / (n - i) as f64).ln()).sum())
}

/// Probability that at least one of `k` draws without replacement from `n`
/// samples, `c` of them correct, is correct.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if c > n {
        return Err(Error::InvalidData(format!(
            "{c} correct out of {n} samples"
        )));
    }
    Ok(match ln_choose_ratio(n - c, n, k) {
        None => 1.0,
        Some(l) => 1.0 - l.exp(),
    })
}

/// Cluster sizes of a set of solutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterProfile {
    sizes: Vec<usize>,
}

impl ClusterProfile {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidData(
                "profile needs at least one cluster".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidData("cluster sizes must be positive".into()));
        }
        Ok(ClusterProfile { sizes })
    }

    /// Profile from one cluster label per solution.
    pub fn from_labels<L: Ord>(labels: &[L]) -> Result<Self> {
        let mut counts = std::collections::BTreeMap::new();
        for l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        ClusterProfile::new(counts.into_values().collect())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Expected number of distinct clusters among `k` solutions drawn without
/// replacement.
pub fn da_at_k(profile: &ClusterProfile, k: usize) -> Result<f64> {
    let n = profile.total();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    Ok(profile
        .sizes
        .iter()
        .map(|&s| match ln_choose_ratio(n - s, n, k) {
            None => 1.0,
            Some(l) => 1.0 - l.exp(),
        })
        .sum())
}

/// Exponential of the cluster-frequency entropy.
pub fn ea(profile: &ClusterProfile) -> f64 {
    let n = profile.total() as f64;
    let h: f64 = profile
        .sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// `Σ_{k=1}^{K_max} DA@k / (K_max - 1)`.
pub fn naudc(profile: &ClusterProfile, k_max: usize) -> Result<f64> {
    if k_max < 2 {
        return Err(Error::DegenerateDenominator(k_max));
    }
    let n = profile.total();
    if k_max > n {
        return Err(Error::KOutOfRange { k: k_max, n });
    }
    let mut sum = 0.0;
    for k in 1..=k_max {
        sum += da_at_k(profile, k)?;
    }
    Ok(sum / (k_max - 1) as f64)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut x = x;
        while self.parent[x] != r {
            let next = self.parent[x];
            self.parent[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Cluster label per item (the lowest index in its class) under an
/// equivalence oracle, closed transitively.
pub fn equivalence_labels<T>(items: &[T], oracle: impl Fn(&T, &T) -> bool) -> Result<Vec<usize>> {
    let n = items.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if !oracle(&items[i], &items[i]) {
            return Err(Error::InvalidData(format!(
                "oracle is not reflexive on item {i}"
            )));
        }
        for j in i + 1..n {
            let ij = oracle(&items[i], &items[j]);
            if ij != oracle(&items[j], &items[i]) {
                return Err(Error::InvalidData(format!(
                    "oracle is not symmetric on items {i} and {j}"
                )));
            }
            if ij {
                uf.union(i, j);
            }
        }
    }
    Ok((0..n).map(|i| uf.find(i)).collect())
}

/// Partition sizes under an equivalence oracle, in order of each class's
/// first member.
pub fn cluster_by_equivalence<T>(
    items: &[T],
    oracle: impl Fn(&T, &T) -> bool,
) -> Result<ClusterProfile> {
    let labels = equivalence_labels(items, oracle)?;
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    for l in labels {
        match sizes.iter_mut().find(|(k, _)| *k == l) {
            Some((_, c)) => *c += 1,
            None => sizes.push((l, 1)),
        }
    }
    ClusterProfile::new(sizes.into_iter().map(|(_, c)| c).collect())
}

pub fn exact_bits_oracle(a: &Bits, b: &Bits) -> bool {
    a == b
}

/// Equal on the first `public_count` positions, i.e. the same public
/// pass/fail pattern against a common target.
pub fn public_pattern_oracle(public_count: usize) -> impl Fn(&Bits, &Bits) -> bool {
    move |a, b| a.iter().take(public_count).eq(b.iter().take(public_count))
}
