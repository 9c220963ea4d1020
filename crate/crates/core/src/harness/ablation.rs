use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::suite::{csv_err, guarded, map_jobs};
use super::{run_agent_episode, AgentKind, Execution, HarnessError, RunConfig, VERSION};
use crate::metrics::{aggregate, EpisodeMetrics, Summary};

/// One ablation row: a name and dotted-key overrides of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub variant: Vec<Variant>,
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Config(format!("ablation grid at `{}`: {}", e.path(), e.inner())))
    }

    /// Variants to run; an empty grid runs the unmodified configuration.
    pub fn variants(&self) -> Vec<Variant> {
        if self.variant.is_empty() {
            vec![Variant {
                name: "full".into(),
                set: BTreeMap::new(),
            }]
        } else {
            self.variant.clone()
        }
    }
}

pub fn load_grid(path: &Path) -> Result<AblationGrid, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    AblationGrid::from_toml_str(&text)
}

/// Applies `a.b.c = value` overrides. Every key must name an existing field.
pub fn apply_overrides(
    base: &RunConfig,
    set: &BTreeMap<String, toml::Value>,
) -> Result<RunConfig, HarnessError> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for (key, value) in set {
        let mut node = &mut doc;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| HarnessError::Config(format!("unknown override key `{key}`")))?;
        }
        *node = serde_json::to_value(value)
            .map_err(|e| HarnessError::Config(format!("override `{key}`: {e}")))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc)
        .map_err(|e| HarnessError::Config(format!("override at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, Default)]
pub struct AblationResult {
    pub variants: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub failures: Vec<(String, u64, String)>,
}

impl AblationResult {
    pub fn summary(&self, variant: &str) -> Summary {
        let m: Vec<EpisodeMetrics> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.metrics)
            .collect();
        aggregate(&m)
    }

    pub fn summaries(&self) -> Vec<(String, Summary)> {
        self.variants.iter().map(|v| (v.clone(), self.summary(v))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: &str) -> std::io::Result<()> {
        writeln!(w, "# config_hash={config_hash} version={VERSION}")?;
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record([
            "variant",
            "seed",
            "recall",
            "precision",
            "precision_relaxed",
            "aae_deg",
            "auc_judd",
            "steps",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let m = &r.metrics;
            cw.write_record([
                r.variant.clone(),
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
}

/// Runs the learned agent under every variant and seed. All overrides are
/// resolved before any episode starts.
pub fn run_ablation(
    base: &RunConfig,
    grid: &AblationGrid,
    seeds: &[u64],
    exec: Execution,
) -> Result<AblationResult, HarnessError> {
    let variants = grid.variants();
    let mut resolved = Vec::with_capacity(variants.len());
    for v in &variants {
        let cfg = apply_overrides(base, &v.set)?;
        let scenario = cfg.load_scenario()?;
        resolved.push((v.name.clone(), cfg, scenario));
    }
    let jobs: Vec<(usize, u64)> = (0..resolved.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = map_jobs(&jobs, exec, |&(i, seed)| {
        let (_, cfg, scenario) = &resolved[i];
        let r = guarded(|| Ok(run_agent_episode(cfg, scenario, AgentKind::Ours, seed)?.1));
        (i, seed, r)
    });
    let mut out = AblationResult {
        variants: resolved.iter().map(|r| r.0.clone()).collect(),
        ..AblationResult::default()
    };
    for (i, seed, r) in results {
        let variant = resolved[i].0.clone();
        match r {
            Ok(metrics) => out.rows.push(AblationRow { variant, seed, metrics }),
            Err(msg) => {
                log::error!("variant {variant}/seed {seed} failed: {msg}");
                out.failures.push((variant, seed, msg));
            }
        }
    }
    Ok(out)
}
