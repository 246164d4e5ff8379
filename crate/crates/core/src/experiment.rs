//! End-to-end runs: scenario generation, training, per-round metrics and the
//! files a run leaves behind.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{count_hypotheses_constrained, Assignment};
use crate::config::ExperimentConfig;
use crate::data::{generate, Scenario};
use crate::error::{BcflError, Result};
use crate::metrics::{
    accumulate_coassociation, association_accuracy, classification_metrics, heldout_log_likelihood, parameter_rmse,
    predict_labels, CoAssociationMatrix,
};
use crate::report::{write_ndjson, CommLedger, HypothesisSummary, RoundReport};
use crate::sim::{run_training_with, Mode, RoundConfig, ServerState, TrainingRun};

pub const ROUNDS_FILE: &str = "rounds.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COASSOC_FILE: &str = "coassoc.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub header: String,
    pub mode: Mode,
    pub m_max: usize,
    pub seed: u64,
    pub clusters: usize,
    pub clients: usize,
    pub rounds: usize,
    pub true_groups: Vec<usize>,
    pub metrics: BTreeMap<String, f64>,
    pub comm: CommLedger,
    pub hypotheses: Vec<HypothesisSummary>,
    pub cluster_means: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
    pub coassoc: CoAssociationMatrix,
    pub final_state: ServerState,
}

/// Metrics of one round, recorded into `report.metrics`.
pub fn record_metrics(scenario: &Scenario, cfg: &RoundConfig, state: &ServerState, report: &mut RoundReport) -> Result<()> {
    let truth = scenario.true_groups();
    let acc = association_accuracy(report, &truth)?;
    let m = &mut report.metrics;
    m.insert("association_accuracy".into(), acc);
    m.insert("hypothesis_count".into(), state.hypotheses.len() as f64);
    m.insert(
        "heldout_log_likelihood".into(),
        heldout_log_likelihood(&state.hypotheses, &scenario.test, &cfg.model),
    );
    if scenario.group_params.first().is_some_and(|p| p.len() == cfg.model.param_dim()) {
        let rmse = parameter_rmse(report, &scenario.group_params)?;
        report.metrics.insert("parameter_rmse".into(), rmse);
    }
    let predictions = predict_labels(&state.hypotheses, &scenario.test, &cfg.model);
    if !predictions.is_empty() {
        let labels: Vec<usize> = scenario.test.iter().flat_map(|d| d.observations.iter().filter_map(|o| o.label)).collect();
        let classes = scenario.class_means.len().max(1 + labels.iter().chain(&predictions).max().copied().unwrap_or(0));
        let (micro, macro_f1) = classification_metrics(&predictions, &labels, classes)?;
        report.metrics.insert("micro_accuracy".into(), micro);
        report.metrics.insert("macro_f1".into(), macro_f1);
    }
    Ok(())
}

/// Trains on an already generated scenario.
pub fn run_on_scenario(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let rc = cfg.round_config();
    let TrainingRun { reports, state } =
        run_training_with(&rc, &scenario.rounds, |state, report| record_metrics(scenario, &rc, state, report))?;
    let mut coassoc = CoAssociationMatrix::new(rc.clients);
    for r in &reports {
        coassoc = accumulate_coassociation(coassoc, r)?;
    }
    let last = reports.last().expect("at least one round");
    let summary = RunSummary {
        header: scenario.header.clone(),
        mode: rc.mode,
        m_max: rc.m_max,
        seed: rc.seed,
        clusters: rc.clusters,
        clients: rc.clients,
        rounds: rc.rounds,
        true_groups: scenario.true_groups(),
        metrics: last.metrics.clone(),
        comm: state.ledger,
        hypotheses: last.hypotheses.clone(),
        cluster_means: last.cluster_means.clone(),
    };
    Ok(ExperimentOutput { reports, summary, coassoc, final_state: state })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let scenario = generate(&cfg.skew(), cfg.rounds)?;
    run_on_scenario(&scenario, cfg)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BcflError {
    BcflError::Io(format!("{}: {e}", path.display()))
}

/// Writes `rounds.ndjson`, `summary.json` and `coassoc.csv` into `dir`.
pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let rounds = dir.join(ROUNDS_FILE);
    let mut w = BufWriter::new(File::create(&rounds).map_err(|e| io_err(&rounds, e))?);
    write_ndjson(&mut w, &out.reports)?;
    w.flush()?;
    let summary = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&out.summary).map_err(|e| BcflError::Io(e.to_string()))?;
    fs::write(&summary, text + "\n").map_err(|e| io_err(&summary, e))?;
    let coassoc = dir.join(COASSOC_FILE);
    out.coassoc.write_csv(File::create(&coassoc).map_err(|e| io_err(&coassoc, e))?)?;
    Ok(())
}

/// Runs for every (mode, m_max) pair of the config's sweep grid on one shared
/// scenario. Greedy ignores `m_max` and runs once.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentOutput>> {
    cfg.validate()?;
    let scenario = generate(&cfg.skew(), cfg.rounds)?;
    let mut jobs = Vec::new();
    for &mode in &cfg.sweep.modes {
        let ms: &[usize] = if mode == Mode::Greedy { &[1] } else { &cfg.sweep.m_max };
        for &m_max in ms {
            jobs.push(ExperimentConfig { mode, m_max, ..cfg.clone() });
        }
    }
    for job in &jobs {
        job.validate()?;
    }
    jobs.par_iter().map(|job| run_on_scenario(&scenario, job)).collect()
}

/// Directory name of one sweep entry.
pub fn sweep_entry_name(summary: &RunSummary) -> String {
    format!("{}-m{}", summary.mode, summary.m_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub hypotheses: usize,
    pub max_weight_deviation: f64,
    pub max_mean_deviation: f64,
}

/// Full enumeration against multi-hypothesis tracking with enough capacity to
/// keep every trajectory. Hypotheses are matched by their label trajectory.
pub fn oracle_compare(cfg: &ExperimentConfig) -> Result<OracleComparison> {
    let exact = ExperimentConfig { mode: Mode::Conceptual, ..cfg.clone() };
    exact.validate()?;
    let rc = exact.round_config();
    let per_round = count_hypotheses_constrained(rc.clusters as u32, rc.clients as u32);
    let total: usize = per_round
        .pow(rc.rounds as u32)
        .try_into()
        .map_err(|_| BcflError::Config("hypothesis count overflows".into()))?;
    let tracked = ExperimentConfig { mode: Mode::MultiHypothesis, m_max: total, ..cfg.clone() };
    let scenario = generate(&cfg.skew(), cfg.rounds)?;
    let a = run_on_scenario(&scenario, &exact)?.final_state.hypotheses;
    let b = run_on_scenario(&scenario, &tracked)?.final_state.hypotheses;
    if a.len() != b.len() {
        return Err(BcflError::DegenerateSet(format!("{} enumerated vs {} tracked hypotheses", a.len(), b.len())));
    }
    let index: BTreeMap<&Vec<Assignment>, usize> =
        b.hypotheses().iter().enumerate().map(|(i, h)| (&h.trajectory, i)).collect();
    let mut max_w: f64 = 0.0;
    let mut max_m: f64 = 0.0;
    for (h, w) in a.iter() {
        let &i = index
            .get(&h.trajectory)
            .ok_or_else(|| BcflError::DegenerateSet("trajectory missing from tracked set".into()))?;
        let other = &b.hypotheses()[i];
        max_w = max_w.max((w - b.weights()[i]).abs());
        for (x, y) in h.clusters.iter().zip(&other.clusters) {
            max_m = max_m.max((x.mean() - y.mean()).amax());
        }
    }
    Ok(OracleComparison { hypotheses: a.len(), max_weight_deviation: max_w, max_mean_deviation: max_m })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            rounds: 3,
            groups: 2,
            clients_per_group: 2,
            samples_per_round: 10,
            test_samples: 20,
            m_max: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn outputs_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small()).unwrap();
        write_outputs(dir.path(), &out).unwrap();
        let first = fs::read(dir.path().join(ROUNDS_FILE)).unwrap();
        write_outputs(dir.path(), &run_experiment(&small()).unwrap()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(ROUNDS_FILE)).unwrap());
        let coassoc = fs::read_to_string(dir.path().join(COASSOC_FILE)).unwrap();
        assert_eq!(coassoc.lines().count(), 4);
        assert_eq!(out.summary.comm.weights_sent, 3 * 2 * 4 * 2);
        assert!(out.summary.metrics.contains_key("association_accuracy"));
        assert!(out.summary.metrics.contains_key("parameter_rmse"));
    }

    #[test]
    fn coassociation_diagonal_counts_rounds() {
        let out = run_experiment(&small()).unwrap();
        for j in 0..4 {
            assert!((out.coassoc.get(j, j) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_skew_reports_classification() {
        let cfg = ExperimentConfig {
            scheme: crate::data::SkewScheme::LabelSkew,
            label_count: 3,
            separation: 3.0,
            ..small()
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summary.metrics.contains_key("macro_f1"));
        assert!(!out.summary.metrics.contains_key("parameter_rmse"));
    }

    #[test]
    fn sweep_runs_each_pair() {
        let cfg = ExperimentConfig { rounds: 2, ..small() };
        let runs = sweep(&cfg).unwrap();
        assert_eq!(runs.len(), 1 + 3 + 3);
        let names: Vec<String> = runs.iter().map(|r| sweep_entry_name(&r.summary)).collect();
        assert!(names.contains(&"greedy-m1".to_string()));
    }

    #[test]
    fn oracle_on_tiny_instance() {
        let cfg = ExperimentConfig { rounds: 2, groups: 2, clients_per_group: 1, ..small() };
        let cmp = oracle_compare(&cfg).unwrap();
        assert_eq!(cmp.hypotheses, 16);
        assert!(cmp.max_weight_deviation < 1e-9);
        assert!(cmp.max_mean_deviation < 1e-9);
    }
}
