//! Run reports: one JSON object per round (newline-delimited) and a
//! summary JSON per run.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{BcflError, Result};
use crate::hypothesis::HypothesisSet;

/// Counters of values uploaded by clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    /// Association weights sent to the server.
    pub weights_sent: u64,
    /// Model parameters sent to the server.
    pub model_params_sent: u64,
    pub rounds_logged: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSummary {
    pub labels: Vec<usize>,
    pub weight: f64,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub mode: String,
    pub hypotheses: Vec<HypothesisSummary>,
    /// `cluster_means[h][i]` is the posterior mean of cluster `i` under hypothesis `h`.
    pub cluster_means: Vec<Vec<Vec<f64>>>,
    pub metrics: BTreeMap<String, f64>,
    pub comm: CommLedger,
}

impl RoundReport {
    pub fn from_set(round: usize, mode: &str, hset: &HypothesisSet, comm: CommLedger) -> Self {
        let hypotheses = hset
            .iter()
            .map(|(h, w)| HypothesisSummary { labels: h.assignment.labels().to_vec(), weight: w, log_weight: h.log_weight })
            .collect();
        let cluster_means = hset
            .hypotheses()
            .iter()
            .map(|h| h.clusters.iter().map(|c| c.mean().iter().copied().collect()).collect())
            .collect();
        RoundReport { round, mode: mode.to_string(), hypotheses, cluster_means, metrics: BTreeMap::new(), comm }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.weight).collect()
    }

    /// Single-line JSON. Non-finite numbers have no JSON form and are rejected.
    pub fn to_json_line(&self) -> Result<String> {
        let finite = self.hypotheses.iter().all(|h| h.weight.is_finite() && h.log_weight.is_finite())
            && self.cluster_means.iter().flatten().flatten().all(|v| v.is_finite())
            && self.metrics.values().all(|v| v.is_finite());
        if !finite {
            return Err(BcflError::contract(format!("round {} report holds a non-finite value", self.round)));
        }
        serde_json::to_string(self).map_err(|e| BcflError::Io(e.to_string()))
    }
}

pub fn write_ndjson<W: Write>(mut out: W, reports: &[RoundReport]) -> Result<()> {
    for r in reports {
        writeln!(out, "{}", r.to_json_line()?)?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<RoundReport>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BcflError::Io(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
