//! Fixtures shared by the criterion benches.

use arbor_core::agents::BeliefPolicy;
use arbor_core::environment::Task;
use arbor_core::experiment::{AgentSet, ExperimentConfig};
use arbor_core::types::FreshContext;
use arbor_core::{AgentId, Bits, LogProbTrace, NodeRecord, PromptContext, SearchRng};
use rand::{Rng, SeedableRng};

/// Default two-agent set and `n` evaluation tasks.
pub fn search_fixture(n: usize) -> (AgentSet, Vec<Task>) {
    let cfg = ExperimentConfig::default();
    let family = cfg.env.family();
    let tasks = cfg
        .env
        .eval_tasks(&family, n)
        .expect("default config is valid");
    (AgentSet::build(&cfg, &family), tasks)
}

/// `groups` trees of `per_group` records with `tokens`-token traces, scored
/// by a random belief policy, plus that policy.
pub fn record_groups(
    groups: usize,
    per_group: usize,
    tokens: usize,
) -> (BeliefPolicy, Vec<Vec<NodeRecord>>) {
    let mut rng = SearchRng::seed_from_u64(7);
    let m = 16;
    let policy = BeliefPolicy::new((0..m).map(|_| rng.random_range(0.2..0.8)).collect(), 1.0);
    let bits = |rng: &mut SearchRng| Bits((0..m).map(|_| rng.random_bool(0.5)).collect());
    let out = (0..groups)
        .map(|g| {
            let prompt = bits(&mut rng);
            (0..per_group)
                .map(|i| {
                    let output = bits(&mut rng);
                    let mut trace =
                        LogProbTrace::uniform(policy.token_logprobs(&prompt, &output, tokens));
                    trace.logp_infer = trace.logp_old.iter().map(|l| l - 0.01).collect();
                    let ctx = PromptContext::Fresh(FreshContext {
                        task_id: g as u64,
                        prompt: prompt.clone(),
                    });
                    let mut r =
                        NodeRecord::new(i, AgentId(1 + i % 2), ctx, output, trace, (i % 2) as f64);
                    r.set_advantage(if i % 2 == 0 { -1.0 } else { 1.0 })
                        .expect("finite advantage");
                    r
                })
                .collect()
        })
        .collect();
    (policy, out)
}

/// Cluster sizes summing to `n`, with cluster `i` of size `i + 1` until
/// the total is reached.
pub fn cluster_sizes(n: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n;
    let mut next = 1;
    while left > 0 {
        let s = next.min(left);
        sizes.push(s);
        left -= s;
        next += 1;
    }
    sizes
}

/// `n` random vectors of dimension `dim`.
pub fn embeddings(n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = SearchRng::seed_from_u64(11);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}
