//! TOML configuration files.
//!
//! The file is a flat key tree: top-level `seed`, `workers` and `mode`,
//! then one table per module (`environment`, `agents`, `bandit`, `search`,
//! `train`, `dispatch`, `eval`, `rm`). Unknown keys are rejected and every
//! error names the full key path, e.g. `train.eps_low`.

use std::collections::BTreeSet;
use std::path::Path;

use toml::{Table, Value};

use crate::agents::RemoteConfig;
use crate::error::{Error, Result};
use crate::experiment::{AgentSpec, ExperimentConfig, Mode, SkillPattern};
use crate::rl::{ObjectiveKind, TisMode};
use crate::search::{BackupScore, FeedbackMode};

pub const DEFAULT_REMOTE_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_REMOTE_RETRIES: u32 = 2;

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    /// Present when `agents.remote` is configured.
    pub remote: Option<RemoteConfig>,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if let Some(r) = &self.remote {
            if r.endpoint.is_empty() {
                return Err(Error::config("agents.remote.endpoint", "must not be empty"));
            }
            if r.timeout_ms == 0 {
                return Err(Error::config(
                    "agents.remote.timeout_ms",
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Parse and validate a config file body. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<Config> {
    let root: Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
    let mut cfg = Config::default();
    let exp = &mut cfg.experiment;
    let mut top = Section::new("", &root);
    top.u64("seed", &mut exp.seed)?;
    if let Some(v) = top.take("workers") {
        exp.workers = Some(as_usize(&top.path("workers"), v)?);
    }
    top.parsed("mode", &mut exp.mode, |s| s.parse::<Mode>().ok())?;

    if let Some(mut s) = top.table("environment")? {
        let env = &mut exp.env;
        s.string("backend", &mut env.backend)?;
        s.usize("len", &mut env.len)?;
        s.usize("public_min", &mut env.public_min)?;
        s.usize("public_max", &mut env.public_max)?;
        s.f64("hint_noise", &mut env.hint_noise)?;
        s.u64("family_seed", &mut env.family_seed)?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("agents")? {
        if let Some(v) = s.take("sim") {
            let path = s.path("sim");
            let list = v
                .as_array()
                .ok_or_else(|| Error::config(&path, "expected an array of tables"))?;
            exp.agents = list
                .iter()
                .enumerate()
                .map(|(i, item)| agent_spec(&format!("{path}[{i}]"), item))
                .collect::<Result<_>>()?;
        }
        if let Some(mut r) = s.table("remote")? {
            let mut remote = RemoteConfig {
                endpoint: String::new(),
                timeout_ms: DEFAULT_REMOTE_TIMEOUT_MS,
                retries: DEFAULT_REMOTE_RETRIES,
            };
            if r.raw.get("endpoint").is_none() {
                return Err(Error::config(
                    r.path("endpoint"),
                    "required when agents.remote is set",
                ));
            }
            r.string("endpoint", &mut remote.endpoint)?;
            r.u64("timeout_ms", &mut remote.timeout_ms)?;
            let mut retries = remote.retries as u64;
            r.u64("retries", &mut retries)?;
            remote.retries = u32::try_from(retries)
                .map_err(|_| Error::config(r.path("retries"), "too large"))?;
            r.finish()?;
            cfg.remote = Some(remote);
        }
        s.finish()?;
    }

    if let Some(mut s) = top.table("bandit")? {
        let search = &mut exp.search;
        s.f64("prior_alpha", &mut search.prior_alpha)?;
        s.f64("prior_beta", &mut search.prior_beta)?;
        s.f64("gamma1", &mut search.schedule.gamma1)?;
        s.f64("decay", &mut search.schedule.decay)?;
        s.f64("gamma_min", &mut search.schedule.gamma_min)?;
        s.bool("depth_guidance", &mut search.depth_guidance)?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("search")? {
        let search = &mut exp.search;
        s.usize("budget", &mut search.budget)?;
        s.bool("depth_guidance", &mut search.depth_guidance)?;
        s.parsed("feedback_mode", &mut search.feedback_mode, |v| match v {
            "binary" => Some(FeedbackMode::Binary),
            "structured" => Some(FeedbackMode::Structured),
            _ => None,
        })?;
        s.parsed("backup", &mut search.backup, |v| match v {
            "reward" => Some(BackupScore::Reward),
            "public_pass_rate" => Some(BackupScore::PublicPassRate),
            _ => None,
        })?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("train")? {
        let t = &mut exp.train;
        s.parsed("objective", &mut t.objective, |v| match v {
            "mars2" | "token" => Some(ObjectiveKind::Token),
            "mars2plus" | "sequence" => Some(ObjectiveKind::Sequence),
            _ => None,
        })?;
        s.f64("eps_low", &mut t.loss.eps_low)?;
        s.f64("eps_high", &mut t.loss.eps_high)?;
        s.f64("kl_coef", &mut t.loss.beta_kl)?;
        s.f64("l_max", &mut t.loss.l_max)?;
        s.f64("l_cache", &mut t.loss.l_cache)?;
        s.f64("tis_clip", &mut t.loss.tis_clip)?;
        s.parsed("tis_mode", &mut t.loss.tis_mode, |v| match v {
            "truncated" => Some(TisMode::TruncatedRatio),
            "log" => Some(TisMode::LogRatio),
            _ => None,
        })?;
        s.f64("std_floor", &mut t.loss.std_floor)?;
        s.f64("step_size", &mut t.step_size)?;
        s.bool("natural", &mut t.natural)?;
        s.f64("max_delta", &mut t.max_delta)?;
        s.usize("rounds", &mut t.rounds)?;
        s.usize("tasks_per_round", &mut t.tasks_per_round)?;
        s.usize("rollout_budget", &mut t.rollout_budget)?;
        s.usize("checkpoint_every", &mut t.checkpoint_every)?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("dispatch")? {
        let t = &mut exp.train;
        s.usize("threshold", &mut t.threshold)?;
        s.bool("filter", &mut t.filter)?;
        s.bool("flush_final", &mut t.flush_final)?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("eval")? {
        s.usize("tasks", &mut exp.eval.tasks)?;
        s.bool(
            "search_every_checkpoint",
            &mut exp.eval.search_every_checkpoint,
        )?;
        s.finish()?;
    }

    if let Some(mut s) = top.table("rm")? {
        s.usize("epochs", &mut exp.rm.epochs)?;
        s.f64("lr", &mut exp.rm.lr)?;
        s.bool("balance", &mut exp.rm.balance)?;
        s.finish()?;
    }

    top.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn agent_spec(path: &str, item: &Value) -> Result<AgentSpec> {
    let table = item
        .as_table()
        .ok_or_else(|| Error::config(path, "expected a table"))?;
    let mut s = Section::new(path, table);
    let mut a = AgentSpec::default();
    s.parsed("pattern", &mut a.pattern, |v| match v {
        "uniform" => Some(SkillPattern::Uniform),
        "even" => Some(SkillPattern::Even),
        "odd" => Some(SkillPattern::Odd),
        _ => None,
    })?;
    s.f64("strong", &mut a.strong)?;
    s.f64("weak", &mut a.weak)?;
    if table.contains_key("strong")
        && !table.contains_key("weak")
        && a.pattern == SkillPattern::Uniform
    {
        a.weak = a.strong;
    }
    s.f64("fix_prob", &mut a.fix_prob)?;
    s.f64("drift_prob", &mut a.drift_prob)?;
    s.usize("trace_len", &mut a.trace_len)?;
    s.f64("logit_scale", &mut a.logit_scale)?;
    s.f64("infer_noise", &mut a.infer_noise)?;
    s.finish()?;
    Ok(a)
}

/// One table being read; tracks consumed keys so leftovers can be reported.
struct Section<'a> {
    prefix: String,
    raw: &'a Table,
    seen: BTreeSet<String>,
}

impl<'a> Section<'a> {
    fn new(prefix: &str, raw: &'a Table) -> Self {
        Section {
            prefix: prefix.to_string(),
            raw,
            seen: BTreeSet::new(),
        }
    }

    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a Value> {
        self.seen.insert(key.to_string());
        self.raw.get(key)
    }

    fn table(&mut self, key: &str) -> Result<Option<Section<'a>>> {
        let path = self.path(key);
        match self.take(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section::new(&path, t))),
            Some(_) => Err(Error::config(path, "expected a table")),
        }
    }

    fn f64(&mut self, key: &str, out: &mut f64) -> Result<()> {
        if let Some(v) = self.take(key) {
            *out = match v {
                Value::Float(f) => *f,
                Value::Integer(i) => *i as f64,
                _ => return Err(Error::config(self.path(key), "expected a number")),
            };
        }
        Ok(())
    }

    fn u64(&mut self, key: &str, out: &mut u64) -> Result<()> {
        if let Some(v) = self.take(key) {
            *out = as_u64(&self.path(key), v)?;
        }
        Ok(())
    }

    fn usize(&mut self, key: &str, out: &mut usize) -> Result<()> {
        if let Some(v) = self.take(key) {
            *out = as_usize(&self.path(key), v)?;
        }
        Ok(())
    }

    /// Accepts TOML booleans and the strings `on` / `off`.
    fn bool(&mut self, key: &str, out: &mut bool) -> Result<()> {
        if let Some(v) = self.take(key) {
            *out = match v {
                Value::Boolean(b) => *b,
                Value::String(s) if s == "on" => true,
                Value::String(s) if s == "off" => false,
                _ => {
                    return Err(Error::config(
                        self.path(key),
                        "expected true/false or on/off",
                    ))
                }
            };
        }
        Ok(())
    }

    fn string(&mut self, key: &str, out: &mut String) -> Result<()> {
        if let Some(v) = self.take(key) {
            *out = v
                .as_str()
                .ok_or_else(|| Error::config(self.path(key), "expected a string"))?
                .to_string();
        }
        Ok(())
    }

    fn parsed<T>(
        &mut self,
        key: &str,
        out: &mut T,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<()> {
        let mut s = String::new();
        if self.raw.contains_key(key) {
            self.string(key, &mut s)?;
            *out = parse(&s).ok_or_else(|| {
                Error::config(self.path(key), format!("unrecognized value `{s}`"))
            })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.raw.keys().find(|k| !self.seen.contains(*k)) {
            Some(k) => Err(Error::config(self.path(k), "unknown key")),
            None => Ok(()),
        }
    }
}

fn as_u64(path: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::config(path, "expected a non-negative integer")),
    }
}

fn as_usize(path: &str, v: &Value) -> Result<usize> {
    usize::try_from(as_u64(path, v)?).map_err(|_| Error::config(path, "too large"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), Config::default());
    }

    #[test]
    fn reads_nested_keys() {
        let cfg = parse_config(
            r#"
            seed = 9
            mode = "homo"
            [environment]
            len = 12
            public_max = 10
            [[agents.sim]]
            pattern = "even"
            strong = 0.95
            weak = 0.5
            [[agents.sim]]
            pattern = "odd"
            [bandit]
            depth_guidance = "on"
            gamma1 = 0.9
            [train]
            objective = "mars2"
            kl_coef = 0.0
            tis_mode = "log"
            [dispatch]
            threshold = 32
            filter = true
            [agents.remote]
            endpoint = "http://127.0.0.1:9"
            "#,
        )
        .unwrap();
        let e = &cfg.experiment;
        assert_eq!((e.seed, e.mode, e.env.len), (9, Mode::Homo, 12));
        assert_eq!(e.agents.len(), 2);
        assert_eq!(e.agents[0].strong, 0.95);
        assert_eq!(e.agents[1].pattern, SkillPattern::Odd);
        assert!(e.search.depth_guidance);
        assert_eq!(e.search.schedule.gamma1, 0.9);
        assert_eq!(e.train.objective, ObjectiveKind::Token);
        assert_eq!(e.train.loss.beta_kl, 0.0);
        assert_eq!(e.train.loss.tis_mode, TisMode::LogRatio);
        assert_eq!((e.train.threshold, e.train.filter), (32, true));
        let r = cfg.remote.unwrap();
        assert_eq!(r.timeout_ms, DEFAULT_REMOTE_TIMEOUT_MS);
    }

    fn key_of(text: &str) -> String {
        match parse_config(text).unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn errors_carry_key_paths() {
        assert_eq!(key_of("[train]\neps_low = \"x\""), "train.eps_low");
        assert_eq!(key_of("[train]\nbogus = 1"), "train.bogus");
        assert_eq!(key_of("colour = 1"), "colour");
        assert_eq!(key_of("[[agents.sim]]\nstrong = 2.0"), "agents.skill");
        assert_eq!(key_of("[[agents.sim]]\nshade = 1"), "agents.sim[0].shade");
        assert_eq!(
            key_of("[search]\nfeedback_mode = \"loud\""),
            "search.feedback_mode"
        );
        assert_eq!(key_of("[train]\neps_low = -1.0"), "train.eps_low");
        assert_eq!(
            key_of("[agents.remote]\nretries = 1"),
            "agents.remote.endpoint"
        );
        assert_eq!(key_of("mode = \"single\""), "agents.sim");
        assert_eq!(key_of("seed = -3"), "seed");
        assert_eq!(key_of("seed = ["), "<file>");
    }
}
