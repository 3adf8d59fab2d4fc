//! Scenario runner for relaystore: named experiments on the simulator (or
//! on loopback TCP for a smoke run), CSV output, and trace checks.

use std::collections::BTreeMap;
use std::io::Write;

use anyhow::{anyhow, Result};
use relaystore::replay;
use relaystore::trace::TraceRecord;
use relaystore::ClusterConfig;
use serde::Serialize;

pub mod runs;
pub mod scenarios;

/// One CSV row per trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub scenario: String,
    pub n_nodes: u32,
    pub object_bytes: u64,
    pub d: Option<u32>,
    pub arrival_interval_s: f64,
    pub trial: u32,
    pub completed: bool,
    pub latency_s: f64,
    pub bytes_on_wire: Option<u64>,
    #[serde(rename = "predicted_T_d")]
    pub predicted_t_d: Option<f64>,
}

impl Row {
    pub fn new(scenario: impl Into<String>, n_nodes: u32, object_bytes: u64) -> Self {
        Self {
            scenario: scenario.into(),
            n_nodes,
            object_bytes,
            d: None,
            arrival_interval_s: 0.0,
            trial: 0,
            completed: true,
            latency_s: f64::NAN,
            bytes_on_wire: None,
            predicted_t_d: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub invariant: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    /// A representative trace, for `--trace`.
    pub trace: Vec<TraceRecord>,
}

impl Outcome {
    pub fn check(&mut self, invariant: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { invariant: invariant.into(), passed, detail: detail.into() });
    }

    /// Records one check per replay invariant; only the first violation of
    /// each is kept in the detail.
    pub fn replay(&mut self, label: &str, trace: &[TraceRecord], exclusive_senders: bool) {
        let report = replay::check(trace, exclusive_senders);
        let mut first: BTreeMap<&str, String> = BTreeMap::new();
        for v in &report.violations {
            first.entry(v.invariant).or_insert_with(|| format!("{label}: {} at t={}ns on {}", v.detail, v.t, v.node));
        }
        for (invariant, detail) in first {
            self.check(format!("replay/{invariant}"), false, detail);
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// One line per invariant: every check when there are a few, otherwise
    /// the pass count and the first failure (or last pass).
    pub fn summary(&self) -> Vec<String> {
        let mut by_name: BTreeMap<&str, Vec<&Check>> = BTreeMap::new();
        for c in &self.checks {
            by_name.entry(&c.invariant).or_default().push(c);
        }
        let verdict = |ok: bool| if ok { "ok" } else { "AssertionFailed" };
        let mut lines = Vec::new();
        for (name, checks) in by_name {
            if checks.len() <= 4 {
                lines.extend(checks.iter().map(|c| format!("{:>15} {name}: {}", verdict(c.passed), c.detail)));
                continue;
            }
            let passed = checks.iter().filter(|c| c.passed).count();
            let shown = checks.iter().find(|c| !c.passed).unwrap_or(checks.last().unwrap());
            lines.push(format!(
                "{:>15} {name} ({passed}/{}): {}",
                verdict(passed == checks.len()),
                checks.len(),
                shown.detail
            ));
        }
        lines
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

pub struct Ctx {
    pub cfg: ClusterConfig,
    pub seed: u64,
    /// Overrides the scenario's default trial count.
    pub trials: Option<u32>,
}

impl Ctx {
    pub fn new(cfg: ClusterConfig, seed: u64) -> Self {
        Self { cfg, seed, trials: None }
    }

    pub fn trials_or(&self, default: u32) -> u32 {
        self.trials.unwrap_or(default)
    }

    pub(crate) fn require_sim(&self, scenario: &str) -> Result<()> {
        if self.cfg.backend == "sim" {
            Ok(())
        } else {
            Err(anyhow!("configuration error: scenario {scenario} runs on the sim backend only"))
        }
    }
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &Ctx) -> Result<Outcome>;
}

pub struct ScenarioRegistry {
    scenarios: BTreeMap<&'static str, Box<dyn Scenario>>,
}

impl ScenarioRegistry {
    pub fn empty() -> Self {
        Self { scenarios: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        scenarios::register_all(&mut r);
        r
    }

    pub fn register(&mut self, s: Box<dyn Scenario>) {
        self.scenarios.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Scenario> {
        self.scenarios
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| anyhow!("unknown scenario {name:?}; known: {}", self.names().collect::<Vec<_>>().join(", ")))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.scenarios.keys().copied()
    }

    pub fn run(&self, name: &str, ctx: &Ctx) -> Result<Outcome> {
        self.get(name)?.run(ctx)
    }
}
