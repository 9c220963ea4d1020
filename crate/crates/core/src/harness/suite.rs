use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use super::{run_agent_episode, AgentKind, HarnessError, RunConfig, VERSION};
use crate::metrics::{aggregate, EpisodeMetrics, MeanStd, Summary};
use crate::world::Scenario;

pub const METRICS_HEADER: [&str; 8] = [
    "scenario",
    "seed",
    "recall",
    "precision",
    "precision_relaxed",
    "aae_deg",
    "auc_judd",
    "steps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Episodes spread over the rayon pool; sequential when the `parallel`
    /// feature is off.
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub agent: AgentKind,
    pub scenario: String,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteResult {
    pub rows: Vec<EpisodeRow>,
    /// `(agent, seed, message)` for episodes that errored or panicked.
    pub failures: Vec<(AgentKind, u64, String)>,
}

impl SuiteResult {
    pub fn rows_for(&self, agent: AgentKind) -> Vec<&EpisodeRow> {
        self.rows.iter().filter(|r| r.agent == agent).collect()
    }

    pub fn summary(&self, agent: AgentKind) -> Summary {
        let m: Vec<EpisodeMetrics> = self.rows_for(agent).iter().map(|r| r.metrics).collect();
        aggregate(&m)
    }
}

pub(crate) fn map_jobs<T, R, F>(jobs: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return jobs.par_iter().map(&f).collect();
    }
    let _ = exec;
    jobs.iter().map(f).collect()
}

pub(crate) fn guarded<R>(f: impl FnOnce() -> Result<R, HarnessError>) -> Result<R, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => Ok(r),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(match p.downcast_ref::<&str>() {
            Some(s) => format!("panic: {s}"),
            None => match p.downcast_ref::<String>() {
                Some(s) => format!("panic: {s}"),
                None => "panic".into(),
            },
        }),
    }
}

/// Runs every agent on every seed. Episode failures are collected rather
/// than aborting the others. With `log_dir` each episode writes its JSONL log.
pub fn run_suite(
    cfg: &RunConfig,
    scenario: &Scenario,
    agents: &[AgentKind],
    seeds: &[u64],
    exec: Execution,
    log_dir: Option<&Path>,
) -> SuiteResult {
    let jobs: Vec<(AgentKind, u64)> = agents
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results = map_jobs(&jobs, exec, |&(agent, seed)| {
        let r = guarded(|| {
            let (log, metrics) = run_agent_episode(cfg, scenario, agent, seed)?;
            if let Some(dir) = log_dir {
                log.write(&dir.join(format!("{}_{agent}_seed{seed}.jsonl", scenario.name)))?;
            }
            Ok(metrics)
        });
        (agent, seed, r)
    });
    let mut out = SuiteResult::default();
    for (agent, seed, r) in results {
        match r {
            Ok(metrics) => out.rows.push(EpisodeRow {
                agent,
                scenario: scenario.name.clone(),
                seed,
                metrics,
            }),
            Err(msg) => {
                log::error!("episode {agent}/seed {seed} failed: {msg}");
                out.failures.push((agent, seed, msg));
            }
        }
    }
    out
}

pub(crate) fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Per-episode metrics rows, preceded by a `#` line carrying the config
/// hash and tool version.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpisodeRow], config_hash: &str) -> std::io::Result<()> {
    writeln!(w, "# config_hash={config_hash} version={VERSION}")?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        let m = &r.metrics;
        cw.write_record([
            r.scenario.clone(),
            r.seed.to_string(),
            m.recall.to_string(),
            m.precision.to_string(),
            m.precision_relaxed.to_string(),
            m.aae_mean.to_string(),
            m.auc_judd.to_string(),
            m.steps_survived.to_string(),
        ])
        .map_err(csv_err)?;
    }
    cw.flush()
}

pub(crate) const SUMMARY_FIELDS: [&str; 6] =
    ["recall", "precision", "precision_relaxed", "aae_deg", "auc_judd", "steps"];

pub(crate) fn summary_values(s: &Summary) -> [MeanStd; 6] {
    [s.recall, s.precision, s.precision_relaxed, s.aae_deg, s.auc_judd, s.steps]
}

/// Mean and sample standard deviation per labelled group.
pub fn write_summary_csv<W: Write>(
    mut w: W,
    label: &str,
    groups: &[(String, Summary)],
    config_hash: &str,
) -> std::io::Result<()> {
    writeln!(w, "# config_hash={config_hash} version={VERSION}")?;
    let mut cw = csv::Writer::from_writer(w);
    let mut header = vec![label.to_string(), "episodes".to_string()];
    for f in SUMMARY_FIELDS {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_std"));
    }
    cw.write_record(&header).map_err(csv_err)?;
    for (name, s) in groups {
        let mut rec = vec![name.clone(), s.episodes.to_string()];
        for v in summary_values(s) {
            rec.push(v.mean.to_string());
            rec.push(v.std.to_string());
        }
        cw.write_record(&rec).map_err(csv_err)?;
    }
    cw.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::bundled;

    fn small_cfg() -> RunConfig {
        RunConfig {
            max_steps: 25,
            ..RunConfig::default()
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cfg = small_cfg();
        let s = bundled("clutter_multi_actor").unwrap();
        let agents = [AgentKind::Random, AgentKind::Template];
        let a = run_suite(&cfg, &s, &agents, &[0, 1, 2], Execution::Sequential, None);
        let b = run_suite(&cfg, &s, &agents, &[0, 1, 2], Execution::Parallel, None);
        assert_eq!(a.rows, b.rows);
        assert!(a.failures.is_empty());
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a.summary(AgentKind::Random).episodes, 3);
    }

    #[test]
    fn csv_layout() {
        let row = EpisodeRow {
            agent: AgentKind::Oracle,
            scenario: "x".into(),
            seed: 4,
            metrics: EpisodeMetrics {
                recall: 1.0,
                precision: 0.5,
                precision_relaxed: 0.75,
                steps_survived: 10,
                aae_mean: 2.0,
                auc_judd: 0.9,
            },
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row], "abc").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# config_hash=abc"));
        assert_eq!(lines[1], METRICS_HEADER.join(","));
        assert_eq!(lines[2], "x,4,1,0.5,0.75,2,0.9,10");
    }

    #[test]
    fn panics_are_contained() {
        let r: Result<(), String> = guarded(|| panic!("boom"));
        assert_eq!(r.unwrap_err(), "panic: boom");
    }
}
