//! Experiment configurations, grids and resumable batch runs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{compute_metrics, MetricsReport};
use super::report::{render_csv, render_grid_table, render_table};
use super::{io_err, EvalError, TaskManifest};
use crate::harness::{Budget, StrategyKind};
use crate::llm::{from_config, ProviderConfig};
use crate::orchestrator::{run_task, AgentTrajectory, Event, RunConfig, StagePolicy, Verdict};

/// A run configuration plus batch settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Overrides the strategy seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(run: RunConfig) -> Self {
        ExperimentConfig {
            run,
            parallelism: 1,
            seed: None,
        }
    }

    /// The run configuration with the seed override applied.
    pub fn effective_run(&self) -> RunConfig {
        let mut run = self.run.clone();
        if let Some(seed) = self.seed {
            run.strategy.rng_seed = seed;
        }
        run
    }
}

/// Stable identifier of a configuration. Parallelism does not affect
/// results and is left out.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = value.as_object_mut() {
        obj.remove("parallelism");
    }
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(digest)[..12].to_string()
}

/// Cartesian product over strategies, budgets and policies. Empty axes keep
/// the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub t: Vec<Budget>,
    #[serde(default)]
    pub policies: Vec<StagePolicy>,
}

impl GridSpec {
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let base = &self.base.run;
        let or_base = |v: &[StrategyKind]| {
            if v.is_empty() {
                vec![base.strategy.kind]
            } else {
                v.to_vec()
            }
        };
        let strategies = or_base(&self.strategies);
        let budgets = if self.t.is_empty() {
            vec![base.strategy.budget_t]
        } else {
            self.t.clone()
        };
        let policies = if self.policies.is_empty() {
            vec![base.policy]
        } else {
            self.policies.clone()
        };
        let mut out = Vec::new();
        for &kind in &strategies {
            for &budget in &budgets {
                for &policy in &policies {
                    let mut cfg = self.base.clone();
                    cfg.run.strategy.kind = kind;
                    cfg.run.strategy.budget_t = budget;
                    cfg.run.policy = policy;
                    out.push(cfg);
                }
            }
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Grid(Box<GridSpec>),
    List(Vec<ExperimentConfig>),
    Single(Box<ExperimentConfig>),
}

/// Read a configuration file holding a grid, a list or a single config.
pub fn load_configs(path: &Path) -> Result<Vec<ExperimentConfig>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parsed: ConfigFile =
        serde_json::from_str(&text).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
    let configs = match parsed {
        ConfigFile::Grid(g) => g.expand(),
        ConfigFile::List(v) => v,
        ConfigFile::Single(c) => vec![*c],
    };
    for c in &configs {
        c.run.budgets.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        c.run
            .provider
            .validate()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        if c.parallelism == 0 {
            return Err(EvalError::Config("parallelism must be >= 1".into()));
        }
    }
    Ok(configs)
}

/// Where one task's outputs live under a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskArtifacts {
    pub dir: PathBuf,
}

impl TaskArtifacts {
    pub fn new(config_dir: &Path, task_id: &str) -> Self {
        TaskArtifacts {
            dir: config_dir.join(task_id),
        }
    }

    pub fn trajectory(&self) -> PathBuf {
        self.dir.join("trajectory.jsonl")
    }

    pub fn patch(&self) -> PathBuf {
        self.dir.join("patch.diff")
    }

    pub fn plan(&self) -> PathBuf {
        self.dir.join("plan.json")
    }

    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.json")
    }

    /// A previously completed trajectory, if one was written.
    pub fn load_complete(&self) -> Option<AgentTrajectory> {
        let text = std::fs::read_to_string(self.trajectory()).ok()?;
        AgentTrajectory::from_jsonl(&text).ok()
    }
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// A scripted replay path naming a directory holds one file per task.
fn provider_for_task(cfg: &ProviderConfig, task_id: &str, base: &Path) -> ProviderConfig {
    let mut cfg = cfg.clone();
    if let Some(p) = cfg.replay_path.as_ref() {
        let abs = if p.is_absolute() { p.clone() } else { base.join(p) };
        if abs.is_dir() {
            cfg.replay_path = Some(abs.join(format!("{task_id}.json")));
        }
    }
    cfg
}

fn infra_trajectory(task_id: &str, reason: String) -> AgentTrajectory {
    let mut t = AgentTrajectory::new(task_id);
    t.verdict = Verdict::InfrastructureError;
    t.push(Event::Verdict {
        verdict: Verdict::InfrastructureError,
        rounds_to_pass: None,
        reason: Some(reason),
    });
    t
}

/// Run (or resume) one configuration over all tasks.
pub fn run_config(
    manifests: &[TaskManifest],
    cfg: &ExperimentConfig,
    run_dir: &Path,
    config_base: &Path,
) -> Result<MetricsReport, EvalError> {
    let digest = config_digest(cfg);
    let dir = run_dir.join(&digest);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&dir.join("config.json"), &cfg_json)?;
    let run = cfg.effective_run();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let results: Vec<Result<AgentTrajectory, EvalError>> = pool.install(|| {
        manifests
            .par_iter()
            .map(|task| {
                let art = TaskArtifacts::new(&dir, &task.task_id);
                if let Some(done) = art.load_complete() {
                    return Ok(done);
                }
                std::fs::create_dir_all(&art.dir).map_err(|e| io_err(&art.dir, e))?;
                let provider_cfg = provider_for_task(&run.provider, &task.task_id, config_base);
                let traj = match from_config(&provider_cfg, config_base) {
                    Ok(mut provider) => {
                        let outcome = run_task(task, &run, provider.as_mut(), None);
                        write(&art.patch(), &outcome.patch)?;
                        if let Some(plan) = &outcome.plan {
                            write(
                                &art.plan(),
                                &serde_json::to_string_pretty(plan).expect("plan serializes"),
                            )?;
                        }
                        if let Some(report) = &outcome.probe_report {
                            write(&art.probe(), &report.to_json())?;
                        }
                        outcome.trajectory
                    }
                    Err(e) => infra_trajectory(&task.task_id, format!("provider: {e}")),
                };
                write(&art.trajectory(), &traj.to_jsonl())?;
                Ok(traj)
            })
            .collect()
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = compute_metrics(&digest, &trajectories, manifests);
    write(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    write(&dir.join("report.csv"), &render_csv(&report)?)?;
    write(&dir.join("report.txt"), &render_table(&report))?;
    Ok(report)
}

/// Run every configuration in order and write a combined summary table.
pub fn run_grid(
    manifests: &[TaskManifest],
    configs: &[ExperimentConfig],
    run_dir: &Path,
    config_base: &Path,
) -> Result<Vec<MetricsReport>, EvalError> {
    let mut reports = Vec::new();
    for cfg in configs {
        reports.push(run_config(manifests, cfg, run_dir, config_base)?);
    }
    let labelled: Vec<(&ExperimentConfig, &MetricsReport)> = configs.iter().zip(&reports).collect();
    write(&run_dir.join("summary.txt"), &render_grid_table(&labelled))?;
    Ok(reports)
}
