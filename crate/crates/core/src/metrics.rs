//! Evaluation: association accuracy under the best cluster relabeling,
//! co-association accumulation, classification scores, parameter error and
//! held-out predictive likelihood.

use std::io::Write;

use nalgebra::DVector;

use crate::data::ClientDataset;
use crate::error::{BcflError, Result};
use crate::gaussian::{log_sum_exp, LocalModelSpec};
use crate::hypothesis::HypothesisSet;
use crate::report::RoundReport;

/// Above this many clusters the relabeling search is greedy.
pub const EXHAUSTIVE_MATCH_MAX_CLUSTERS: usize = 6;

/// Best injective map of rows into distinct columns (`rows <= cols`),
/// maximizing the summed score.
fn best_injective(score: &[Vec<f64>]) -> Vec<usize> {
    fn dfs(score: &[Vec<f64>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == score.len() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                dfs(score, row + 1, used, cur, acc + score[row][col], best);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let cols = score.first().map_or(0, Vec::len);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    dfs(score, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best.1
}

fn greedy_injective(score: &[Vec<f64>]) -> Vec<usize> {
    let rows = score.len();
    let cols = score.first().map_or(0, Vec::len);
    let mut out = vec![usize::MAX; rows];
    let mut used = vec![false; cols];
    for _ in 0..rows {
        let mut pick = None;
        for r in (0..rows).filter(|&r| out[r] == usize::MAX) {
            for c in (0..cols).filter(|&c| !used[c]) {
                if pick.is_none_or(|(_, _, v)| score[r][c] > v) {
                    pick = Some((r, c, score[r][c]));
                }
            }
        }
        let (r, c, _) = pick.expect("rows <= cols");
        out[r] = c;
        used[c] = true;
    }
    out
}

fn match_rows(score: &[Vec<f64>], exhaustive: bool) -> Vec<usize> {
    if exhaustive {
        best_injective(score)
    } else {
        greedy_injective(score)
    }
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|c| m.iter().map(|row| row[c]).collect()).collect()
}

/// Fraction of clients whose cluster maps to their true group under the
/// best one-to-one relabeling.
pub fn assignment_accuracy(labels: &[usize], truth: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let g = truth.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0.0; g]; k];
    for (&l, &t) in labels.iter().zip(truth) {
        confusion[l][t] += 1.0;
    }
    let exhaustive = k <= EXHAUSTIVE_MATCH_MAX_CLUSTERS;
    let matched: f64 = if k <= g {
        let map = match_rows(&confusion, exhaustive);
        map.iter().enumerate().map(|(r, &c)| confusion[r][c]).sum()
    } else {
        let t = transpose(&confusion);
        let map = match_rows(&t, exhaustive);
        map.iter().enumerate().map(|(r, &c)| t[r][c]).sum()
    };
    matched / labels.len() as f64
}

/// Weight-averaged [`assignment_accuracy`] over the report's hypotheses.
pub fn association_accuracy(report: &RoundReport, truth: &[usize]) -> Result<f64> {
    let mut acc = 0.0;
    for h in &report.hypotheses {
        if h.labels.len() != truth.len() {
            return Err(BcflError::contract("truth length differs from client count"));
        }
        acc += h.weight * assignment_accuracy(&h.labels, truth);
    }
    Ok(acc)
}

/// Accumulated probability that two clients share a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAssociationMatrix {
    entries: Vec<Vec<f64>>,
    rounds: usize,
}

impl CoAssociationMatrix {
    pub fn new(clients: usize) -> Self {
        CoAssociationMatrix { entries: vec![vec![0.0; clients]; clients], rounds: 0 }
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn rounds_accumulated(&self) -> usize {
        self.rounds
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a][b]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.entries {
            w.write_record(row.iter().map(f64::to_string)).map_err(|e| BcflError::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adds one round: `entries[a][b] += w` for every hypothesis of weight `w`
/// that places `a` and `b` in the same cluster.
pub fn accumulate_coassociation(mut matrix: CoAssociationMatrix, report: &RoundReport) -> Result<CoAssociationMatrix> {
    let c = matrix.entries.len();
    for h in &report.hypotheses {
        if h.labels.len() != c {
            return Err(BcflError::contract("report client count differs from matrix size"));
        }
        for a in 0..c {
            for b in 0..c {
                if h.labels[a] == h.labels[b] {
                    matrix.entries[a][b] += h.weight;
                }
            }
        }
    }
    matrix.rounds += 1;
    Ok(matrix)
}

/// Micro accuracy and macro F1 over `num_classes` classes. Classes without
/// support or predictions contribute an F1 of zero.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(BcflError::contract("predictions and labels must be nonempty and equally long"));
    }
    if predictions.iter().chain(labels).any(|&v| v >= num_classes) {
        return Err(BcflError::contract("class index out of range"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let micro = correct as f64 / labels.len() as f64;
    let f1_sum: f64 = (0..num_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fneg[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok((micro, f1_sum / num_classes as f64))
}

/// Weight-averaged RMSE between matched cluster means and true group
/// parameters, `sqrt(sum_g |m - w_g|^2 / (G * dim))`.
///
/// With at least as many clusters as groups each group gets its own cluster;
/// otherwise every group is compared with its nearest cluster.
pub fn parameter_rmse(report: &RoundReport, true_params: &[DVector<f64>]) -> Result<f64> {
    let g = true_params.len();
    if g == 0 {
        return Err(BcflError::contract("no true parameters"));
    }
    let d = true_params[0].len();
    let mut total = 0.0;
    for (h, means) in report.hypotheses.iter().zip(&report.cluster_means) {
        if means.iter().any(|m| m.len() != d) {
            return Err(BcflError::contract("parameter dimensions differ"));
        }
        let sq: Vec<Vec<f64>> = true_params
            .iter()
            .map(|p| means.iter().map(|m| m.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum()).collect())
            .collect();
        let err: f64 = if means.len() >= g {
            let neg: Vec<Vec<f64>> = sq.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            let map = match_rows(&neg, means.len() <= EXHAUSTIVE_MATCH_MAX_CLUSTERS);
            map.iter().enumerate().map(|(r, &c)| sq[r][c]).sum()
        } else {
            sq.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum()
        };
        total += h.weight * (err / (g * d) as f64).sqrt();
    }
    Ok(total)
}

fn client_cluster(labels: &[usize], client: usize) -> usize {
    labels.get(client).copied().unwrap_or(0)
}

/// Mean per-sample log predictive density of held-out data, mixing the
/// hypotheses' plug-in predictions with their weights.
pub fn heldout_log_likelihood(hset: &HypothesisSet, test: &[ClientDataset], spec: &LocalModelSpec) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let logw: Vec<f64> = hset.weights().iter().map(|w| w.ln()).collect();
    for d in test {
        let params: Vec<&DVector<f64>> = hset
            .hypotheses()
            .iter()
            .map(|h| h.clusters[client_cluster(h.assignment.labels(), d.client_id)].mean())
            .collect();
        for o in &d.observations {
            let terms: Vec<f64> = params.iter().zip(&logw).map(|(w, lw)| lw + spec.log_likelihood_one(w, o)).collect();
            total += log_sum_exp(&terms);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Most probable label under the weighted mixture of plug-in classifiers.
/// Empty for non-classification models.
pub fn predict_labels(hset: &HypothesisSet, test: &[ClientDataset], spec: &LocalModelSpec) -> Vec<usize> {
    let mut out = Vec::new();
    for d in test {
        for o in &d.observations {
            let mut mix: Option<Vec<f64>> = None;
            for (h, w) in hset.iter() {
                let param = h.clusters[client_cluster(h.assignment.labels(), d.client_id)].mean();
                let Some(p) = spec.class_probabilities(param, &o.features) else {
                    return Vec::new();
                };
                let acc = mix.get_or_insert_with(|| vec![0.0; p.len()]);
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += w * v;
                }
            }
            let probs = mix.unwrap_or_default();
            let mut best = 0;
            for (k, &v) in probs.iter().enumerate() {
                if v > probs[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}
