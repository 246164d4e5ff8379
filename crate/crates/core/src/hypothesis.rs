//! Association-hypothesis trajectories: expansion with the recursive weight
//! update, normalization, and the three reductions (greedy, top-M, merge).

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{build_cost_matrix, m_best_exact, Assignment};
use crate::error::{BcflError, Result};
use crate::gaussian::{merge_mixture, GaussianDensity};

/// `(round, creation rank)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HypothesisId {
    pub round: usize,
    pub rank: usize,
}

/// One association trajectory and its cluster posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: HypothesisId,
    pub parent: Option<HypothesisId>,
    pub round: usize,
    /// Labels chosen in the most recent round. Empty for the root.
    pub assignment: Assignment,
    /// Labels of every round so far, oldest first.
    #[serde(default)]
    pub trajectory: Vec<Assignment>,
    /// Unnormalized `log(pi_parent) + sum_j log w(j, label_j)`.
    pub log_weight: f64,
    pub clusters: Vec<GaussianDensity>,
}

impl Hypothesis {
    pub fn root(clusters: Vec<GaussianDensity>) -> Self {
        Hypothesis {
            id: HypothesisId { round: 0, rank: 0 },
            parent: None,
            round: 0,
            assignment: Assignment::from_labels_unchecked(Vec::new()),
            trajectory: Vec::new(),
            log_weight: 0.0,
            clusters,
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }
}

/// Hypotheses of one round together with their normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    hypotheses: Vec<Hypothesis>,
    weights: Vec<f64>,
}

impl HypothesisSet {
    /// Normalizes the log-weights of `hypotheses`.
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(BcflError::DegenerateSet("hypothesis set is empty".into()));
        }
        let round = hypotheses[0].round;
        if hypotheses.iter().any(|h| h.round != round) {
            return Err(BcflError::contract("hypotheses belong to different rounds"));
        }
        let k = hypotheses[0].cluster_count();
        if hypotheses.iter().any(|h| h.cluster_count() != k) {
            return Err(BcflError::contract("hypotheses differ in cluster count"));
        }
        normalize(HypothesisSet { hypotheses, weights: Vec::new() })
    }

    pub fn singleton(hypothesis: Hypothesis) -> Self {
        HypothesisSet { hypotheses: vec![hypothesis], weights: vec![1.0] }
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn round(&self) -> usize {
        self.hypotheses[0].round
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Hypothesis, f64)> {
        self.hypotheses.iter().zip(self.weights.iter().copied())
    }
}

/// A child trajectory before its posteriors are computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub parent: usize,
    pub assignment: Assignment,
    pub log_weight: f64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_weight
        .total_cmp(&a.log_weight)
        .then(a.parent.cmp(&b.parent))
        .then_with(|| a.assignment.cmp(&b.assignment))
}

/// Global top `m_max` children over every parent.
///
/// `log_weights[h][j][i]` is client `j`'s local log weight for cluster `i`
/// under parent `h`. A child's joint log weight is the parent's log
/// normalized weight plus the sum of its selected entries.
pub fn expand(hset: &HypothesisSet, log_weights: &[Vec<Vec<f64>>], m_max: usize) -> Result<Vec<Candidate>> {
    if m_max == 0 {
        return Err(BcflError::contract("m_max must be at least 1"));
    }
    if log_weights.len() != hset.len() {
        return Err(BcflError::contract(format!(
            "{} weight matrices for {} hypotheses",
            log_weights.len(),
            hset.len()
        )));
    }
    let k = hset.hypotheses[0].cluster_count();
    let c = log_weights[0].len();
    for m in log_weights {
        if m.len() != c || m.iter().any(|row| row.len() != k) {
            return Err(BcflError::contract(format!("weight matrix is not {c}x{k}")));
        }
    }
    let per_parent: Vec<Vec<Candidate>> = log_weights
        .par_iter()
        .enumerate()
        .map(|(h, matrix)| {
            let cost = build_cost_matrix(matrix)?;
            let log_prior = hset.weights[h].ln();
            Ok(m_best_exact(&cost, m_max)
                .items
                .into_iter()
                .map(|(assignment, _)| {
                    let score: f64 = assignment.labels().iter().enumerate().map(|(j, &i)| matrix[j][i]).sum();
                    Candidate { parent: h, assignment, log_weight: log_prior + score }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<Candidate> = per_parent.into_iter().flatten().collect();
    all.sort_by(candidate_order);
    all.truncate(m_max);
    Ok(all)
}

/// Drops candidates whose log weight trails the best by more than `gap`.
pub fn threshold_filter(mut candidates: Vec<Candidate>, gap: f64) -> Vec<Candidate> {
    let best = candidates.iter().map(|c| c.log_weight).fold(f64::NEG_INFINITY, f64::max);
    candidates.retain(|c| c.log_weight >= best - gap);
    candidates
}

/// Softmax of the log-weights.
pub fn normalize(mut hset: HypothesisSet) -> Result<HypothesisSet> {
    let logs: Vec<f64> = hset.hypotheses.iter().map(|h| h.log_weight).collect();
    if logs.iter().any(|v| v.is_nan()) {
        return Err(BcflError::DegenerateSet("NaN log weight".into()));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(BcflError::DegenerateSet("no finite log weight".into()));
    }
    let scaled: Vec<f64> = logs.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = scaled.iter().sum();
    hset.weights = scaled.iter().map(|s| s / total).collect();
    Ok(hset)
}

/// Keeps only the best candidate, with weight one. Ties go to the earliest.
pub fn select_greedy(candidates: Vec<Hypothesis>) -> Result<HypothesisSet> {
    let mut best: Option<Hypothesis> = None;
    for h in candidates {
        if best.as_ref().is_none_or(|b| h.log_weight > b.log_weight) {
            best = Some(h);
        }
    }
    best.map(HypothesisSet::singleton)
        .ok_or_else(|| BcflError::DegenerateSet("no candidate to select".into()))
}

/// Keeps the `m_max` best candidates and normalizes among them.
pub fn prune_top_m(mut candidates: Vec<Hypothesis>, m_max: usize) -> Result<HypothesisSet> {
    if m_max == 0 {
        return Err(BcflError::contract("m_max must be at least 1"));
    }
    candidates.sort_by(|a, b| b.log_weight.total_cmp(&a.log_weight));
    candidates.truncate(m_max);
    HypothesisSet::new(candidates)
}

/// Collapses the set into one hypothesis whose cluster posteriors are the
/// moment-matched merges of the members' posteriors.
///
/// The merged hypothesis keeps the most probable member's identity and
/// assignment, drops the parent link and carries weight one.
pub fn consensus_merge(hset: &HypothesisSet) -> Result<HypothesisSet> {
    let total: f64 = hset.weights.iter().sum();
    let weights: Vec<f64> = hset.weights.iter().map(|w| w / total).collect();
    let k = hset.hypotheses[0].cluster_count();
    let clusters = (0..k)
        .map(|i| {
            let comps: Vec<GaussianDensity> = hset.hypotheses.iter().map(|h| h.clusters[i].clone()).collect();
            merge_mixture(&weights, &comps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lead = 0;
    for (idx, &w) in weights.iter().enumerate() {
        if w > weights[lead] {
            lead = idx;
        }
    }
    let src = &hset.hypotheses[lead];
    Ok(HypothesisSet::singleton(Hypothesis {
        id: src.id,
        parent: None,
        round: src.round,
        assignment: src.assignment.clone(),
        trajectory: src.trajectory.clone(),
        log_weight: 0.0,
        clusters,
    }))
}
