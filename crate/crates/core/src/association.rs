//! Client-to-cluster assignment under the one-cluster-per-client constraint.
//!
//! Because each client picks exactly one cluster and clusters have no
//! capacity, the total cost `Tr(A^T L)` separates over clients. The optimum is
//! a per-row argmin and the k-best list is a k-best search over a product of
//! independently sorted rows.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{BcflError, Result};

/// `C x K` matrix of negative log association weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    clients: usize,
    clusters: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(clients: usize, clusters: usize, entries: Vec<f64>) -> Result<Self> {
        if clients == 0 || clusters == 0 {
            return Err(BcflError::contract("cost matrix needs at least one client and one cluster"));
        }
        if entries.len() != clients * clusters {
            return Err(BcflError::contract(format!(
                "cost matrix has {} entries, expected {}",
                entries.len(),
                clients * clusters
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(BcflError::contract("cost matrix entries must be finite"));
        }
        Ok(CostMatrix { clients, clusters, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(BcflError::contract("cost matrix rows differ in length"));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn get(&self, client: usize, cluster: usize) -> f64 {
        self.entries[client * self.clusters + cluster]
    }

    pub fn row(&self, client: usize) -> &[f64] {
        &self.entries[client * self.clusters..(client + 1) * self.clusters]
    }

    /// Sum of the selected entries, accumulated in client order.
    pub fn total_cost(&self, assignment: &Assignment) -> f64 {
        assignment.labels().iter().enumerate().map(|(j, &i)| self.get(j, i)).sum()
    }
}

/// Cluster label of every client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(labels: Vec<usize>, clusters: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= clusters) {
            return Err(BcflError::contract(format!("label {bad} out of range for {clusters} clusters")));
        }
        Ok(Assignment(labels))
    }

    pub(crate) fn from_labels_unchecked(labels: Vec<usize>) -> Self {
        Assignment(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clients assigned to `cluster`, in increasing order.
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(move |(_, &l)| l == cluster).map(|(j, _)| j)
    }
}

/// Assignments in nondecreasing total cost.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedAssignments {
    pub items: Vec<(Assignment, f64)>,
}

impl RankedAssignments {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.items.iter().map(|(_, c)| *c).collect()
    }
}

/// Negates a matrix of local log weights.
pub fn build_cost_matrix(local_log_weights: &[Vec<f64>]) -> Result<CostMatrix> {
    if local_log_weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(BcflError::contract("log weights must be finite"));
    }
    let rows: Vec<Vec<f64>> = local_log_weights.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    CostMatrix::from_rows(&rows)
}

fn row_argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// Per-client argmin, ties to the lowest cluster index.
pub fn best_assignment(l: &CostMatrix) -> (Assignment, f64) {
    let labels: Vec<usize> = (0..l.clients()).map(|j| row_argmin(l.row(j))).collect();
    let a = Assignment(labels);
    let cost = l.total_cost(&a);
    (a, cost)
}

/// Ordering key: cost, then labels lexicographically.
fn rank_cmp(a: &(Assignment, f64), b: &(Assignment, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))
}

struct Node {
    cost: f64,
    labels: Vec<usize>,
    ranks: Vec<usize>,
    last: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Reversed so that `BinaryHeap` pops the cheapest node first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.labels.cmp(&self.labels))
    }
}

/// Exact `M` best assignments in nondecreasing cost, ties ordered by labels.
///
/// Each client's clusters are sorted by cost. A state is a vector of ranks;
/// its successors raise the rank of one client at or after the last raised
/// position, so every rank vector has a unique parent and costs never
/// decrease along an edge. Popping a min-heap therefore enumerates
/// assignments in cost order.
pub fn m_best_exact(l: &CostMatrix, m: usize) -> RankedAssignments {
    if m == 0 {
        return RankedAssignments::default();
    }
    let c = l.clients();
    let order: Vec<Vec<usize>> = (0..c)
        .map(|j| {
            let row = l.row(j);
            let mut idx: Vec<usize> = (0..l.clusters()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let node = |ranks: Vec<usize>, last: usize| {
        let labels: Vec<usize> = ranks.iter().enumerate().map(|(j, &r)| order[j][r]).collect();
        let cost = labels.iter().enumerate().map(|(j, &i)| l.get(j, i)).sum();
        Node { cost, labels, ranks, last }
    };

    let mut heap = BinaryHeap::new();
    heap.push(node(vec![0; c], 0));
    let mut out: Vec<(Assignment, f64)> = Vec::new();
    while let Some(top) = heap.pop() {
        // Keep popping through cost ties at the boundary so the final
        // lexicographic tie order is global.
        if out.len() >= m && top.cost > out[m - 1].1 {
            break;
        }
        for p in top.last..c {
            if top.ranks[p] + 1 < l.clusters() {
                let mut ranks = top.ranks.clone();
                ranks[p] += 1;
                heap.push(node(ranks, p));
            }
        }
        out.push((Assignment(top.labels), top.cost));
    }
    out.sort_by(rank_cmp);
    out.truncate(m);
    RankedAssignments { items: out }
}

/// Approximate `M` best assignments by single-client substitutions.
///
/// Starting from the optimum, each step accepts the cheapest not-yet-seen
/// assignment that differs from an accepted one in exactly one client's
/// label, then offers that assignment's own single substitutions.
pub fn m_best_heuristic(l: &CostMatrix, m: usize) -> RankedAssignments {
    if m == 0 {
        return RankedAssignments::default();
    }
    let (best, best_cost) = best_assignment(l);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(best.0.clone());
    let mut frontier = BinaryHeap::new();
    let mut out = Vec::with_capacity(m);

    let mut current = (best, best_cost);
    loop {
        let labels = current.0.labels().to_vec();
        out.push(current);
        if out.len() == m {
            break;
        }
        for j in 0..l.clients() {
            for i in 0..l.clusters() {
                if i == labels[j] {
                    continue;
                }
                let mut cand = labels.clone();
                cand[j] = i;
                if seen.insert(cand.clone()) {
                    let cost = cand.iter().enumerate().map(|(jj, &ii)| l.get(jj, ii)).sum();
                    frontier.push(Node { cost, labels: cand, ranks: Vec::new(), last: 0 });
                }
            }
        }
        match frontier.pop() {
            Some(n) => current = (Assignment(n.labels), n.cost),
            None => break,
        }
    }
    out.sort_by(rank_cmp);
    RankedAssignments { items: out }
}

/// Count of per-cluster client subsets when clusters may overlap:
/// `prod_i sum_c binom(C, c) = 2^(C K)`.
pub fn count_hypotheses_unconstrained(clusters: u32, clients: u32) -> BigUint {
    BigUint::from(1u8) << (u64::from(clusters) * u64::from(clients))
}

/// Count of assignments with exactly one cluster per client: `K^C`.
pub fn count_hypotheses_constrained(clusters: u32, clients: u32) -> BigUint {
    BigUint::from(clusters).pow(clients)
}
