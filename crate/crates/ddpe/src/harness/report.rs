//! The multi-seed experiment runner and its persisted report.

use super::config::{ExperimentConfig, ProtocolConfig};
use super::{accuracy_per_domain, evaluate, train, TrainHistory};
use crate::data::{leave_one_domain_out_split, single_source_split, DatasetSplit, DomainSample};
use crate::dynconv::{build_network, Model, NetworkConfig};
use crate::error::{bail, Result};
use crate::rng::{derive, STREAM_INIT};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One (target, seed) accuracy measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCell {
    pub target: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: usize,
    pub mean: f64,
    pub std: f64,
}

/// Aggregated experiment outcome. The JSON form is fully determined by
/// (config, seeds); wall-clock time is reported on stderr only so that
/// repeated invocations produce byte-identical artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: ProtocolConfig,
    pub seeds: Vec<u64>,
    pub targets: Vec<usize>,
    pub cells: Vec<RunCell>,
    pub per_target: Vec<TargetSummary>,
    pub overall_mean: f64,
    /// verbatim experiment configuration for provenance
    pub config_echo: String,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub histories: Vec<(String, TrainHistory)>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| crate::error::err_fmt!(Parse, "report parse failure: {e}"))
    }

    /// Plain-text table: one row per target, mean ± std over seeds.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>10}   per-seed\n",
            "target", "mean", "std"
        ));
        for t in &self.per_target {
            let per_seed: Vec<String> = self
                .cells
                .iter()
                .filter(|c| c.target == t.target)
                .map(|c| format!("{:.4}", c.accuracy))
                .collect();
            out.push_str(&format!(
                "{:<10} {:>10.4} {:>10.4}   {}\n",
                t.target,
                t.mean,
                t.std,
                per_seed.join(" ")
            ));
        }
        out.push_str(&format!("overall mean accuracy: {:.4}\n", self.overall_mean));
        out
    }

    fn recompute_aggregates(&mut self) {
        let mut per_target: Vec<TargetSummary> = Vec::new();
        for &target in &self.targets {
            let vals: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.target == target)
                .map(|c| c.accuracy)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            per_target.push(TargetSummary {
                target,
                mean,
                std: var.sqrt(),
            });
        }
        self.overall_mean = if per_target.is_empty() {
            0.0
        } else {
            per_target.iter().map(|t| t.mean).sum::<f64>() / per_target.len() as f64
        };
        self.per_target = per_target;
    }
}

fn domains_of(samples: &[DomainSample]) -> Vec<usize> {
    let set: BTreeSet<usize> = samples.iter().map(|s| s.domain_label).collect();
    set.into_iter().collect()
}

fn flush(report: &RunReport, out_dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        for (name, history) in &report.histories {
            std::fs::write(dir.join(format!("history_{name}.csv")), history.to_csv())?;
        }
    }
    Ok(())
}

struct TrainedRun {
    eval_model: Model<f32>,
    history: TrainHistory,
}

fn run_one(
    net_cfg: &NetworkConfig,
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedRun> {
    let model = build_network::<f32>(net_cfg, derive(seed, STREAM_INIT))?;
    let tc = cfg.train.to_train_config(&cfg.perturb, seed);
    let (final_model, swa_model, history) = train(model, split, &tc)?;
    let eval_model = match swa_model {
        Some(m) if tc.swa.enabled => m,
        _ => final_model,
    };
    Ok(TrainedRun {
        eval_model,
        history,
    })
}

/// Runs the full grid of seeds × protocol targets: fresh model, train,
/// evaluate with SWA weights when enabled. Partial results are flushed to
/// `out_dir` after every run.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    run_experiment_with_echo(cfg, &cfg.to_toml(), out_dir)
}

/// [`run_experiment`] with the original config text preserved verbatim in
/// the report (the CLI passes the file contents through untouched).
pub fn run_experiment_with_echo(
    cfg: &ExperimentConfig,
    config_echo: &str,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let samples = cfg.data.load()?;
    if samples.is_empty() {
        bail!(Config, "dataset is empty");
    }
    let domains = domains_of(&samples);
    if domains.len() < 2 {
        bail!(Config, "DG protocols need at least two domains");
    }
    let (c, h, w) = match samples[0].image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!(Dim, "samples must be C×H×W, got {s:?}"),
    };
    let classes = samples.iter().map(|s| s.class_label).max().unwrap() + 1;
    let net_cfg = cfg.network.to_network_config(c, h, w, classes)?;

    let targets: Vec<usize> = match cfg.protocol {
        ProtocolConfig::LeaveOneOut { target: Some(t) } => {
            if !domains.contains(&t) {
                bail!(Config, "target domain {t} not present in dataset");
            }
            vec![t]
        }
        ProtocolConfig::LeaveOneOut { target: None } => domains.clone(),
        ProtocolConfig::SingleSource { source } => {
            if !domains.contains(&source) {
                bail!(Config, "source domain {source} not present in dataset");
            }
            domains.iter().copied().filter(|d| *d != source).collect()
        }
    };

    let mut report = RunReport {
        protocol: cfg.protocol.clone(),
        seeds: cfg.train.seeds.clone(),
        targets: targets.clone(),
        cells: Vec::new(),
        per_target: Vec::new(),
        overall_mean: 0.0,
        config_echo: config_echo.to_string(),
        wall_clock_secs: 0.0,
        histories: Vec::new(),
    };

    match cfg.protocol {
        ProtocolConfig::LeaveOneOut { .. } => {
            for &target in &targets {
                let split = leave_one_domain_out_split(&samples, target)?;
                split.validate()?;
                for &seed in &cfg.train.seeds {
                    let run = run_one(&net_cfg, &split, cfg, seed)?;
                    let accuracy = evaluate(&run.eval_model, &split.test)?;
                    report.cells.push(RunCell {
                        target,
                        seed,
                        accuracy,
                    });
                    report
                        .histories
                        .push((format!("target{target}_seed{seed}"), run.history));
                    report.recompute_aggregates();
                    flush(&report, out_dir)?;
                }
            }
        }
        ProtocolConfig::SingleSource { source } => {
            let split = single_source_split(&samples, source)?;
            split.validate()?;
            for &seed in &cfg.train.seeds {
                let run = run_one(&net_cfg, &split, cfg, seed)?;
                let per_domain = accuracy_per_domain(&run.eval_model, &split.test)?;
                for (&domain, &accuracy) in &per_domain {
                    report.cells.push(RunCell {
                        target: domain,
                        seed,
                        accuracy,
                    });
                }
                report
                    .histories
                    .push((format!("source{source}_seed{seed}"), run.history));
                report.recompute_aggregates();
                flush(&report, out_dir)?;
            }
        }
    }

    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean over seeds of the mean target accuracy, recomputed from cells.
pub fn mean_accuracy_by_target(report: &RunReport) -> BTreeMap<usize, f64> {
    report
        .per_target
        .iter()
        .map(|t| (t.target, t.mean))
        .collect()
}
