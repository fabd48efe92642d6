use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arbor_core::agents::{Agent, RemoteAgent};
use arbor_core::config::{load_config, Config};
use arbor_core::dispatch::{write_update_log, UpdateMode};
use arbor_core::diversity::{aec, da_at_k, ea, g_vendi, naudc, pass_at_k};
use arbor_core::environment::{
    evaluate, read_task_set, write_task_set, Evaluator, EvaluatorRegistry, Task,
};
use arbor_core::experiment::{
    compare_modes, mode_variants, plot_data, run_async_training, run_experiment, summary_csv,
    write_results_csv, AgentSet, Mode,
};
use arbor_core::reward_model::{
    build_rm_dataset, eval_rm, select_final, train_bt_history, train_mse_history, FeatureSpec,
    RmDataset, RmModel,
};
use arbor_core::search::{final_vanilla, run_many, FeedbackMode, SearchConfig, SearchTrace};
use arbor_core::{with_workers, AgentId, Error, Result};

use crate::diversity_input::{self, Equivalence, TaskInput};
use crate::{
    Cli, Command, DiversityArgs, Feedback, LossArg, Metric, OnOff, OracleArg, RmAction, SearchArgs,
    UpdateModeArg,
};

/// Task streams for generated task sets; kept apart from the training and
/// evaluation streams used by experiments.
const SEARCH_STREAM: u64 = 0x5EA;
const RM_TRAIN_STREAM: u64 = 0x3A1;
const RM_SELECT_STREAM: u64 = 0x3A2;

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    if cli.workers.is_some() {
        cfg.experiment.workers = cli.workers;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let workers = cfg.experiment.workers;
    with_workers(workers, || match &cli.command {
        Command::Search(a) => search(&cfg, a, &cli.out),
        Command::Train(a) => train(&cfg, a.updates, &cli.out),
        Command::Rm { action } => rm(&cfg, action, &cli.out),
        Command::Diversity(a) => diversity(a, &cli.out),
        Command::Experiment => experiment(&cfg, &cli.out),
        Command::Compare(a) => compare(&cfg, &a.modes, &cli.out),
    })
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn evaluator(cfg: &Config) -> Result<Arc<dyn Evaluator>> {
    EvaluatorRegistry::new().resolve(&cfg.experiment.env.backend)
}

/// Search agents: the remote endpoint alone when configured, otherwise the
/// simulated agents at their initial skills.
fn search_agents(cfg: &Config) -> Vec<Arc<dyn Agent>> {
    match &cfg.remote {
        Some(r) => {
            vec![Arc::new(RemoteAgent::new(AgentId::from_index(0), r.clone())) as Arc<dyn Agent>]
        }
        None => {
            let family = cfg.experiment.env.family();
            AgentSet::build(&cfg.experiment, &family).agents
        }
    }
}

fn generated_tasks(cfg: &Config, stream: u64, count: usize) -> Result<Vec<Task>> {
    let env = &cfg.experiment.env;
    let family = env.family();
    (0..count as u64)
        .map(|i| env.task(&family, stream, i))
        .collect()
}

fn search_config(cfg: &Config, budget: Option<usize>) -> Result<SearchConfig> {
    let mut sc = cfg.experiment.search.clone();
    if let Some(b) = budget {
        sc.budget = b;
    }
    sc.validate()?;
    Ok(sc)
}

fn depth_hist(trace: &SearchTrace) -> String {
    trace
        .depth_histogram
        .iter()
        .map(|(d, c)| format!("{d}:{c}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn search(cfg: &Config, args: &SearchArgs, out: &Path) -> Result<()> {
    let tasks = match &args.tasks {
        Some(p) => read_task_set(p)?,
        None => generated_tasks(cfg, SEARCH_STREAM, args.num_tasks)?,
    };
    let mut sc = search_config(cfg, args.budget)?;
    if let Some(g) = args.depth_guidance {
        sc.depth_guidance = g == OnOff::On;
    }
    if let Some(f) = args.feedback {
        sc.feedback_mode = match f {
            Feedback::Binary => FeedbackMode::Binary,
            Feedback::Structured => FeedbackMode::Structured,
        };
    }
    let agents = match &args.agents {
        Some(path) => {
            let from_file = load_config(path)?;
            let mut merged = cfg.clone();
            merged.experiment.agents = from_file.experiment.agents;
            merged.remote = from_file.remote;
            merged.validate()?;
            search_agents(&merged)
        }
        None => search_agents(cfg),
    };
    let ev = evaluator(cfg)?;
    let traces = run_many(&tasks, &agents, ev.as_ref(), &sc, cfg.experiment.seed)?;

    write_task_set(&out.join("tasks.jsonl"), &tasks)?;
    let dir = out.join("traces");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut summary = String::from("task_id,solved_public,solved_private,depth_hist\n");
    let (mut public, mut private, mut failures) = (0, 0, 0);
    for (trace, task) in traces.iter().zip(&tasks) {
        trace
            .tree
            .write_trace(&dir.join(format!("task_{}.jsonl", task.id())))?;
        let chosen = final_vanilla(trace);
        let solved_public = chosen.is_some();
        let solved_private = match chosen {
            Some(s) => evaluate(task, s)?.solved(),
            None => false,
        };
        public += solved_public as usize;
        private += solved_private as usize;
        failures += trace.failures.len();
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            task.id(),
            solved_public as u8,
            solved_private as u8,
            depth_hist(trace)
        );
    }
    write(&out.join("summary.csv"), &summary)?;
    let n = tasks.len().max(1) as f64;
    println!(
        "searched {} tasks: public pass {:.3}, private pass {:.3}, failed expansions {failures}",
        tasks.len(),
        public as f64 / n,
        private as f64 / n
    );
    Ok(())
}

fn train(cfg: &Config, updates: UpdateModeArg, out: &Path) -> Result<()> {
    let mode = match updates {
        UpdateModeArg::Inline => UpdateMode::Inline,
        UpdateModeArg::Async => UpdateMode::Async,
    };
    let res = run_async_training(&cfg.experiment, mode)?;
    let report = &res.report;
    write_update_log(&out.join("update_log.csv"), &report.log)?;
    let policies = serde_json::to_string_pretty(&res.policies)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    write(&out.join("policies.json"), &policies)?;
    let dispatched: usize = report.dispatched.values().sum();
    let leftover: usize = report.leftover.values().sum();
    println!(
        "produced {} records, filtered {}, dispatched {dispatched}, leftover {leftover}, updates {}",
        report.produced,
        report.filtered,
        report.log.len()
    );
    if !report.errors.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} updates failed: {}",
            report.errors.len(),
            report.errors.join("; ")
        )));
    }
    Ok(())
}

fn feature_spec(agents: &[Arc<dyn Agent>]) -> FeatureSpec {
    FeatureSpec {
        num_agents: agents.iter().map(|a| a.id().0).max().unwrap_or(0),
    }
}

fn data_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("examples.jsonl"), dir.join("pairs.jsonl"))
}

fn rm(cfg: &Config, action: &RmAction, out: &Path) -> Result<()> {
    let rm_cfg = &cfg.experiment.rm;
    match action {
        RmAction::Build { num_tasks, budget } => {
            let tasks = generated_tasks(cfg, RM_TRAIN_STREAM, *num_tasks)?;
            let sc = search_config(cfg, *budget)?;
            let agents = search_agents(cfg);
            let ev = evaluator(cfg)?;
            let traces = run_many(&tasks, &agents, ev.as_ref(), &sc, cfg.experiment.seed)?;
            let pairs: Vec<_> = traces
                .iter()
                .zip(&tasks)
                .map(|(t, k)| (t, k.view()))
                .collect();
            let ds = build_rm_dataset(&pairs, rm_cfg.balance, &feature_spec(&agents));
            let (ex, pr) = data_paths(out);
            ds.write(&ex, &pr)?;
            let pos = ds.examples.iter().filter(|e| e.label == 1).count();
            println!(
                "{} examples ({pos} positive), {} pairs from {} tasks",
                ds.examples.len(),
                ds.pairs.len(),
                tasks.len()
            );
            Ok(())
        }
        RmAction::Train { data, loss } => {
            let (ex, pr) = data_paths(data);
            let ds = RmDataset::read(&ex, Some(&pr))?;
            if matches!(loss, LossArg::Mse | LossArg::Both) {
                let h = train_mse_history(&ds.examples, rm_cfg.epochs, rm_cfg.lr)?;
                h.model.save(&out.join("model_mse.json"))?;
                println!(
                    "mse: loss {:.6} -> {:.6}",
                    h.losses.first().copied().unwrap_or(f64::NAN),
                    h.losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            if matches!(loss, LossArg::Bt | LossArg::Both) {
                let h = train_bt_history(&ds.pairs, rm_cfg.epochs, rm_cfg.lr)?;
                h.model.save(&out.join("model_bt.json"))?;
                println!(
                    "bt: mean margin {:.6} -> {:.6}",
                    h.losses.first().copied().unwrap_or(f64::NAN),
                    h.losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            Ok(())
        }
        RmAction::Eval { model, data } => {
            let m = RmModel::load(model)?;
            let (ex, _) = data_paths(data);
            let ds = RmDataset::read(&ex, None)?;
            let metrics = eval_rm(&m, &ds.examples)?;
            let body = serde_json::to_string_pretty(&metrics)
                .map_err(|e| Error::InvalidData(e.to_string()))?;
            write(&out.join("rm_eval.json"), &body)?;
            println!(
                "n {} adaptive_acc {:.4} auc {} spearman {:.4}",
                metrics.n,
                metrics.adaptive_acc,
                if metrics.auc_defined {
                    format!("{:.4}", metrics.auc_roc)
                } else {
                    "undefined".into()
                },
                metrics.spearman
            );
            Ok(())
        }
        RmAction::Select {
            model,
            num_tasks,
            budget,
        } => {
            let m = RmModel::load(model)?;
            let tasks = generated_tasks(cfg, RM_SELECT_STREAM, *num_tasks)?;
            let sc = search_config(cfg, *budget)?;
            let agents = search_agents(cfg);
            let spec = feature_spec(&agents);
            if m.weights.len() != spec.len() {
                return Err(Error::Shape {
                    expected: spec.len(),
                    actual: m.weights.len(),
                });
            }
            let ev = evaluator(cfg)?;
            let traces = run_many(&tasks, &agents, ev.as_ref(), &sc, cfg.experiment.seed)?;
            let mut csv = String::from("task_id,vanilla_node,rm_node,vanilla_solved,rm_solved\n");
            let (mut v, mut r) = (0usize, 0usize);
            for (trace, task) in traces.iter().zip(&tasks) {
                let vanilla = trace.chosen_final;
                let picked = select_final(trace, task.view(), &m, &spec);
                let solved = |id: Option<usize>| -> Result<bool> {
                    match id {
                        Some(id) => Ok(evaluate(task, &trace.tree.node(id).solution)?.solved()),
                        None => Ok(false),
                    }
                };
                let (vs, rs) = (solved(vanilla)?, solved(picked)?);
                v += vs as usize;
                r += rs as usize;
                let show = |id: Option<usize>| id.map(|i| i.to_string()).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    task.id(),
                    show(vanilla),
                    show(picked),
                    vs as u8,
                    rs as u8
                );
            }
            write(&out.join("selection.csv"), &csv)?;
            let n = tasks.len().max(1) as f64;
            println!(
                "private pass: vanilla {:.3}, reward model {:.3}",
                v as f64 / n,
                r as f64 / n
            );
            Ok(())
        }
    }
}

/// Trace files under `input`, sorted by name.
fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Per-task metrics are averaged over the tasks where they are defined.
/// Incorrect trace solutions are dropped before any clustering metric.
fn diversity(args: &DiversityArgs, out: &Path) -> Result<()> {
    let tasks = diversity_input::load(&args.input, args.kind.as_deref())?;
    let eq = match args.oracle {
        OracleArg::Exact => Equivalence::ExactBits,
        OracleArg::Public => Equivalence::PublicPattern,
    };
    let with_correct: Vec<&TaskInput> = tasks.values().filter(|t| t.correct_count() > 0).collect();
    let (name, used, value) = match args.metric {
        Metric::Passk => {
            let vals = tasks
                .values()
                .filter_map(|t| t.total.map(|n| (n, t.correct.len())))
                .filter(|&(n, _)| n >= args.k)
                .map(|(n, c)| pass_at_k(n, c, args.k))
                .collect::<Result<Vec<_>>>()?;
            (format!("pass@{}", args.k), vals.len(), mean(&vals))
        }
        Metric::Dak => {
            let mut vals = Vec::new();
            for t in with_correct.iter().filter(|t| t.correct_count() >= args.k) {
                vals.push(da_at_k(&t.profile(eq)?, args.k)?);
            }
            (format!("da@{}", args.k), vals.len(), mean(&vals))
        }
        Metric::Ea => {
            let vals = with_correct
                .iter()
                .map(|t| t.profile(eq).map(|p| ea(&p)))
                .collect::<Result<Vec<_>>>()?;
            ("ea".to_string(), vals.len(), mean(&vals))
        }
        Metric::Naudc => {
            let mut vals = Vec::new();
            for t in with_correct
                .iter()
                .filter(|t| t.correct_count() >= args.k_max)
            {
                vals.push(naudc(&t.profile(eq)?, args.k_max)?);
            }
            (format!("naudc@{}", args.k_max), vals.len(), mean(&vals))
        }
        Metric::Aec => {
            let per_task: Vec<Vec<Vec<f64>>> = tasks
                .values()
                .map(|t| t.vectors_or_bits(0.0))
                .filter(|v| !v.is_empty())
                .collect();
            let v = if per_task.is_empty() {
                f64::NAN
            } else {
                aec(&per_task, args.eps, args.min_pts)?
            };
            ("aec".to_string(), per_task.len(), v)
        }
        Metric::Gvendi => {
            let per_task: Vec<Vec<Vec<f64>>> = tasks
                .values()
                .map(|t| t.vectors_or_bits(-1.0))
                .filter(|v| !v.is_empty())
                .collect();
            let vectors: Vec<Vec<f64>> = per_task.iter().flatten().cloned().collect();
            let v = if vectors.is_empty() {
                f64::NAN
            } else {
                g_vendi(&vectors, args.proj_dim, args.proj_seed)?
            };
            ("g_vendi".to_string(), per_task.len(), v)
        }
    };
    let body = format!("metric,tasks,value\n{name},{used},{value:.6}\n");
    write(&out.join("diversity.csv"), &body)?;
    print!("{body}");
    Ok(())
}

fn experiment(cfg: &Config, out: &Path) -> Result<()> {
    let res = run_experiment(&cfg.experiment)?;
    write_results_csv(&out.join("results.csv"), &res.rows)?;
    write(&out.join("plot.csv"), &plot_data(&res.rows))?;
    write_update_log(&out.join("update_log.csv"), &res.update_log)?;
    let a = res.accounting;
    println!(
        "{}: {} expansions, {} records trained in {} updates",
        cfg.experiment.label(),
        a.expansions,
        a.records_trained,
        a.updates
    );
    if let Some(last) = res.rows.last() {
        println!(
            "final pass1 {:.3} pass1_mcts {:.3} pass_n {:.3}",
            last.pass1, last.pass1_mcts, last.pass_n
        );
    }
    Ok(())
}

fn compare(cfg: &Config, modes: &[String], out: &Path) -> Result<()> {
    let modes = modes
        .iter()
        .map(|m| m.trim().parse::<Mode>())
        .collect::<Result<Vec<_>>>()?;
    let configs = mode_variants(&cfg.experiment, &modes);
    let (results, summary) = compare_modes(&configs)?;
    let mut seen = BTreeMap::new();
    for r in &results {
        let label = r.config.label();
        let n = seen.entry(label.clone()).or_insert(0);
        *n += 1;
        let file = if *n == 1 {
            format!("results_{label}.csv")
        } else {
            format!("results_{label}_{n}.csv")
        };
        write_results_csv(&out.join(file), &r.rows)?;
    }
    let body = summary_csv(&summary);
    write(&out.join("summary.csv"), &body)?;
    print!("{body}");
    Ok(())
}
