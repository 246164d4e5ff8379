//! Round-based server/client simulation.
//!
//! Each round broadcasts the cluster posteriors of every live hypothesis,
//! collects per-client association log weights, decides associations
//! according to the [`Mode`], lets clients update against their assigned
//! clusters and fuses the results at the server.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use num_bigint::BigUint;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{count_hypotheses_constrained, Assignment};
use crate::data::ClientDataset;
use crate::error::{BcflError, Result};
use crate::gaussian::{
    assoc_log_weight_at_mean, assoc_log_weight_sampled, fuse_local_posteriors, posterior_update, FusionMode,
    GaussianDensity, LocalModelSpec,
};
use crate::hypothesis::{
    consensus_merge, expand, prune_top_m, select_greedy, threshold_filter, Candidate, Hypothesis, HypothesisId,
    HypothesisSet,
};
use crate::report::{CommLedger, RoundReport};
use crate::rng::{derive_seed, stream};

/// Per-client log weights below this are clamped.
pub const LOG_WEIGHT_FLOOR: f64 = -1.0e12;
/// Largest total hypothesis count the conceptual mode will enumerate.
pub const CONCEPTUAL_LIMIT: u64 = 1_000_000;
pub const DEFAULT_PRIOR_VARIANCE: f64 = 10.0;
pub const KMEANS_MAX_ITERS: usize = 50;

const INIT_STREAM: u64 = 11;
const KMEANS_STREAM: u64 = 12;
const WEIGHT_STREAM: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full enumeration of every association.
    Conceptual,
    Greedy,
    Consensus,
    MultiHypothesis,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Conceptual, Mode::Greedy, Mode::Consensus, Mode::MultiHypothesis];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Conceptual => "conceptual",
            Mode::Greedy => "greedy",
            Mode::Consensus => "consensus",
            Mode::MultiHypothesis => "multi-hypothesis",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BcflError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BcflError::Config(format!("unknown mode `{s}`")))
    }
}

/// How clients score a broadcast cluster against their data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum WeightEstimator {
    /// Likelihood at the cluster's posterior mean.
    #[default]
    AtMean,
    /// Monte Carlo average of the likelihood over `n` posterior draws.
    Sampled { n: usize, seed: u64 },
}

impl fmt::Display for WeightEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightEstimator::AtMean => f.write_str("at-mean"),
            WeightEstimator::Sampled { n, seed } => write!(f, "sampled({n}, {seed})"),
        }
    }
}

impl FromStr for WeightEstimator {
    type Err = BcflError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "at-mean" {
            return Ok(WeightEstimator::AtMean);
        }
        let bad = || BcflError::Config(format!("unknown weight estimator `{s}`, expected `at-mean` or `sampled(n, seed)`"));
        let inner = s
            .strip_prefix("sampled(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (n, seed) = inner.split_once(',').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let seed: u64 = seed.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(BcflError::Config("sampled estimator needs at least one draw".into()));
        }
        Ok(WeightEstimator::Sampled { n, seed })
    }
}

impl TryFrom<String> for WeightEstimator {
    type Error = BcflError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeightEstimator> for String {
    fn from(w: WeightEstimator) -> String {
        w.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub clusters: usize,
    pub clients: usize,
    pub rounds: usize,
    pub m_max: usize,
    pub mode: Mode,
    pub weight_estimator: WeightEstimator,
    pub fusion_mode: FusionMode,
    pub warm_up_rounds: usize,
    pub seed: u64,
    pub model: LocalModelSpec,
    /// Variance of the isotropic zero-mean initial prior.
    pub prior_variance: f64,
    /// Children trailing the best by more than this many nats are dropped
    /// before pruning.
    pub log_weight_gap: Option<f64>,
    /// Run client computations on the rayon pool.
    pub parallel: bool,
}

impl RoundConfig {
    pub fn new(clusters: usize, clients: usize, rounds: usize, mode: Mode, model: LocalModelSpec) -> Self {
        RoundConfig {
            clusters,
            clients,
            rounds,
            m_max: 1,
            mode,
            weight_estimator: WeightEstimator::AtMean,
            fusion_mode: FusionMode::PriorCorrected,
            warm_up_rounds: 0,
            seed: 0,
            model,
            prior_variance: DEFAULT_PRIOR_VARIANCE,
            log_weight_gap: None,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clients == 0 || self.rounds == 0 || self.m_max == 0 {
            return Err(BcflError::Config("clusters, clients, rounds and m_max must be positive".into()));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(BcflError::Config("prior_variance must be positive".into()));
        }
        if self.log_weight_gap.is_some_and(|g| g.is_nan() || g < 0.0) {
            return Err(BcflError::Config("log_weight_gap must be nonnegative".into()));
        }
        if self.warm_up_rounds > self.rounds {
            return Err(BcflError::Config("warm_up_rounds exceeds rounds".into()));
        }
        self.model.validate().map_err(|e| BcflError::Config(e.to_string()))?;
        if self.mode == Mode::Conceptual {
            let per_round = count_hypotheses_constrained(self.clusters as u32, self.clients as u32);
            if per_round.pow(self.rounds as u32) > BigUint::from(CONCEPTUAL_LIMIT) {
                return Err(BcflError::Config(format!(
                    "conceptual mode would enumerate more than {CONCEPTUAL_LIMIT} hypotheses"
                )));
            }
        }
        Ok(())
    }

    fn base_prior(&self) -> Result<GaussianDensity> {
        GaussianDensity::isotropic(DVector::zeros(self.model.param_dim()), self.prior_variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub hypotheses: HypothesisSet,
    /// Zero-mean prior shared by every cluster before symmetry breaking.
    pub prior: GaussianDensity,
    pub ledger: CommLedger,
}

/// Root state: `K` cluster priors with seeded jittered means.
pub fn initialize(cfg: &RoundConfig) -> Result<ServerState> {
    cfg.validate()?;
    let prior = cfg.base_prior()?;
    let d = cfg.model.param_dim();
    let jitter = Normal::new(0.0, 0.1 * cfg.prior_variance.sqrt()).expect("positive scale");
    let mut rng = stream(cfg.seed, &[INIT_STREAM]);
    let clusters = (0..cfg.clusters)
        .map(|_| {
            let mean = DVector::from_fn(d, |_, _| jitter.sample(&mut rng));
            GaussianDensity::isotropic(mean, cfg.prior_variance)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ServerState {
        round: 0,
        hypotheses: HypothesisSet::singleton(Hypothesis::root(clusters)),
        prior,
        ledger: CommLedger::default(),
    })
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn nearest(point: &DVector<f64>, centroids: &[DVector<f64>]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate().skip(1) {
        if sq_dist(point, c) < sq_dist(point, &centroids[best]) {
            best = i;
        }
    }
    best
}

/// Lloyd's k-means with farthest-point seeding. Returns each point's group
/// and the index of the point each centroid was last seeded at.
fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::Rng;
    let mut rng = stream(seed, &[KMEANS_STREAM]);
    let mut anchors = vec![rng.random_range(0..points.len())];
    while anchors.len() < k {
        let mut far = 0;
        let mut far_d = f64::NEG_INFINITY;
        for (p, x) in points.iter().enumerate() {
            let d = anchors.iter().map(|&a| sq_dist(x, &points[a])).fold(f64::INFINITY, f64::min);
            if d > far_d {
                far = p;
                far_d = d;
            }
        }
        anchors.push(far);
    }
    let mut centroids: Vec<DVector<f64>> = anchors.iter().map(|&a| points[a].clone()).collect();
    let mut groups: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = points.iter().zip(&groups).filter(|(_, &g)| g == i).map(|(p, _)| p).collect();
            if members.is_empty() {
                // Reseed at the point farthest from its own centroid.
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for (p, x) in points.iter().enumerate() {
                    let d = sq_dist(x, &points[anchors[groups[p]]]);
                    if d > far_d {
                        far = p;
                        far_d = d;
                    }
                }
                anchors[i] = far;
                *centroid = points[far].clone();
            } else {
                *centroid = members.iter().fold(DVector::zeros(points[0].len()), |acc, p| acc + *p) / members.len() as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == groups {
            break;
        }
        groups = next;
    }
    (groups, anchors)
}

/// Warm start: every client fits its data from the flat prior, the local
/// posterior means are grouped by k-means and each group's posteriors are
/// fused. A group left empty takes the local posterior at its seed point.
pub fn warm_up(clients: &[ClientDataset], cfg: &RoundConfig) -> Result<Vec<GaussianDensity>> {
    if cfg.warm_up_rounds == 0 {
        return Err(BcflError::contract("warm-up requires warm_up_rounds >= 1"));
    }
    if clients.is_empty() {
        return Err(BcflError::contract("warm-up needs at least one client"));
    }
    let prior = cfg.base_prior()?;
    let fit = |d: &ClientDataset| posterior_update(&prior, d, &cfg.model);
    let locals: Vec<GaussianDensity> = if cfg.parallel {
        clients.par_iter().map(fit).collect::<Result<_>>()?
    } else {
        clients.iter().map(fit).collect::<Result<_>>()?
    };
    let means: Vec<DVector<f64>> = locals.iter().map(|g| g.mean().clone()).collect();
    let (groups, anchors) = kmeans(&means, cfg.clusters, cfg.seed);
    (0..cfg.clusters)
        .map(|i| {
            let members: Vec<GaussianDensity> =
                locals.iter().zip(&groups).filter(|(_, &g)| g == i).map(|(l, _)| l.clone()).collect();
            if members.is_empty() {
                Ok(locals[anchors[i]].clone())
            } else {
                fuse_local_posteriors(&members, &prior, FusionMode::NaiveProduct)
            }
        })
        .collect()
}

/// Initial state, warmed on the pooled first `warm_up_rounds` rounds when
/// that count is positive.
pub fn start(cfg: &RoundConfig, data: &[Vec<ClientDataset>]) -> Result<ServerState> {
    let mut state = initialize(cfg)?;
    if cfg.warm_up_rounds > 0 {
        if data.len() < cfg.warm_up_rounds {
            return Err(BcflError::contract("not enough rounds of data for warm-up"));
        }
        let pooled: Vec<ClientDataset> = (0..cfg.clients)
            .map(|j| ClientDataset::concat(data[..cfg.warm_up_rounds].iter().map(|r| &r[j])))
            .collect();
        let warmed = warm_up(&pooled, cfg)?;
        state.hypotheses = HypothesisSet::singleton(Hypothesis::root(warmed));
    }
    Ok(state)
}

fn trajectory_key(h: &Hypothesis) -> u64 {
    let labels: Vec<u64> = h
        .trajectory
        .iter()
        .flat_map(|a| a.labels().iter().map(|&l| l as u64).chain(std::iter::once(u64::MAX)))
        .collect();
    derive_seed(0, &labels)
}

/// `matrix[j][i]`: client `j`'s log weight for cluster `i` of `h`.
fn client_log_weights(
    h: &Hypothesis,
    round: usize,
    clients: &[ClientDataset],
    cfg: &RoundConfig,
) -> Result<Vec<Vec<f64>>> {
    let key = trajectory_key(h);
    let row = |(j, d): (usize, &ClientDataset)| -> Result<Vec<f64>> {
        h.clusters
            .iter()
            .enumerate()
            .map(|(i, cluster)| {
                let v = match cfg.weight_estimator {
                    WeightEstimator::AtMean => assoc_log_weight_at_mean(cluster, d, &cfg.model)?,
                    WeightEstimator::Sampled { n, seed } => {
                        let s = derive_seed(seed, &[WEIGHT_STREAM, round as u64, key, j as u64, i as u64]);
                        assoc_log_weight_sampled(cluster, d, &cfg.model, n, s)?
                    }
                };
                if v.is_nan() {
                    return Err(BcflError::SingularModel(format!("NaN log weight for client {j}, cluster {i}")));
                }
                Ok(v.max(LOG_WEIGHT_FLOOR))
            })
            .collect()
    };
    if cfg.parallel {
        clients.par_iter().enumerate().map(row).collect()
    } else {
        clients.iter().enumerate().map(row).collect()
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Every assignment of every parent, in odometer order.
fn enumerate_all(hset: &HypothesisSet, logw: &[Vec<Vec<f64>>], k: usize) -> Vec<Candidate> {
    let c = logw[0].len();
    let mut out = Vec::new();
    for (h, matrix) in logw.iter().enumerate() {
        let log_prior = hset.weights()[h].ln();
        let mut labels = vec![0usize; c];
        'odometer: loop {
            let score: f64 = labels.iter().enumerate().map(|(j, &i)| matrix[j][i]).sum();
            out.push(Candidate {
                parent: h,
                assignment: Assignment::from_labels_unchecked(labels.clone()),
                log_weight: log_prior + score,
            });
            for pos in (0..c).rev() {
                labels[pos] += 1;
                if labels[pos] < k {
                    continue 'odometer;
                }
                labels[pos] = 0;
            }
            break;
        }
    }
    out
}

fn decide(hset: &HypothesisSet, logw: &[Vec<Vec<f64>>], cfg: &RoundConfig) -> Result<Vec<Candidate>> {
    let mut cands = match cfg.mode {
        Mode::Greedy => {
            let matrix = &logw[0];
            let labels: Vec<usize> = matrix.iter().map(|row| argmax_row(row)).collect();
            let score: f64 = labels.iter().enumerate().map(|(j, &i)| matrix[j][i]).sum();
            vec![Candidate {
                parent: 0,
                assignment: Assignment::from_labels_unchecked(labels),
                log_weight: hset.weights()[0].ln() + score,
            }]
        }
        Mode::Conceptual => enumerate_all(hset, logw, cfg.clusters),
        Mode::Consensus | Mode::MultiHypothesis => expand(hset, logw, cfg.m_max)?,
    };
    if let Some(gap) = cfg.log_weight_gap {
        if cfg.mode != Mode::Conceptual {
            cands = threshold_filter(cands, gap);
        }
    }
    Ok(cands)
}

/// Client updates against the assigned clusters and server-side fusion.
fn realize(
    hset: &HypothesisSet,
    cands: Vec<Candidate>,
    round: usize,
    clients: &[ClientDataset],
    cfg: &RoundConfig,
) -> Result<Vec<Hypothesis>> {
    let k = cfg.clusters;
    let mut needed: BTreeMap<(usize, usize, usize), ()> = BTreeMap::new();
    for c in &cands {
        for (j, &i) in c.assignment.labels().iter().enumerate() {
            needed.insert((c.parent, i, j), ());
        }
    }
    let keys: Vec<(usize, usize, usize)> = needed.into_keys().collect();
    let update = |&(p, i, j): &(usize, usize, usize)| {
        posterior_update(&hset.hypotheses()[p].clusters[i], &clients[j], &cfg.model)
    };
    let values: Vec<GaussianDensity> = if cfg.parallel {
        keys.par_iter().map(update).collect::<Result<_>>()?
    } else {
        keys.iter().map(update).collect::<Result<_>>()?
    };
    let locals: BTreeMap<(usize, usize, usize), GaussianDensity> = keys.into_iter().zip(values).collect();

    let build = |(rank, c): (usize, &Candidate)| -> Result<Hypothesis> {
        let parent = &hset.hypotheses()[c.parent];
        let clusters = (0..k)
            .map(|i| {
                let members: Vec<GaussianDensity> = c.assignment.members(i).map(|j| locals[&(c.parent, i, j)].clone()).collect();
                if members.is_empty() {
                    Ok(parent.clusters[i].clone())
                } else {
                    fuse_local_posteriors(&members, &parent.clusters[i], cfg.fusion_mode)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trajectory = parent.trajectory.clone();
        trajectory.push(c.assignment.clone());
        Ok(Hypothesis {
            id: HypothesisId { round, rank },
            parent: Some(parent.id),
            round,
            assignment: c.assignment.clone(),
            trajectory,
            log_weight: c.log_weight,
            clusters,
        })
    };
    if cfg.parallel {
        cands.par_iter().enumerate().map(build).collect()
    } else {
        cands.iter().enumerate().map(build).collect()
    }
}

fn charge(ledger: &mut CommLedger, cfg: &RoundConfig, parents: usize, children: usize) {
    let (k, c, m) = (cfg.clusters as u64, cfg.clients as u64, cfg.m_max as u64);
    let d = cfg.model.param_dim() as u64;
    let (weights, params) = match cfg.mode {
        Mode::MultiHypothesis => (k * c * m, d * k * m),
        Mode::Consensus => (k * c, d * k * m),
        Mode::Greedy => (0, d * k),
        Mode::Conceptual => (k * c * parents as u64, d * k * children as u64),
    };
    ledger.weights_sent += weights;
    ledger.model_params_sent += params;
    ledger.rounds_logged += 1;
}

/// One communication round.
pub fn run_round(state: ServerState, clients: &[ClientDataset], cfg: &RoundConfig) -> Result<(ServerState, RoundReport)> {
    if state.round >= cfg.rounds {
        return Err(BcflError::contract(format!("round {} is past the configured {}", state.round, cfg.rounds)));
    }
    if clients.len() != cfg.clients {
        return Err(BcflError::contract(format!("{} datasets for {} clients", clients.len(), cfg.clients)));
    }
    if state.hypotheses.hypotheses()[0].cluster_count() != cfg.clusters {
        return Err(BcflError::contract("state cluster count differs from config"));
    }
    let round = state.round + 1;
    let hset = &state.hypotheses;
    let logw: Vec<Vec<Vec<f64>>> = hset
        .hypotheses()
        .iter()
        .map(|h| client_log_weights(h, round, clients, cfg))
        .collect::<Result<_>>()?;
    let cands = decide(hset, &logw, cfg)?;
    let children = cands.len();
    let built = realize(hset, cands, round, clients, cfg)?;
    let next = match cfg.mode {
        Mode::Greedy => select_greedy(built)?,
        Mode::Conceptual => HypothesisSet::new(built)?,
        Mode::MultiHypothesis => prune_top_m(built, cfg.m_max)?,
        Mode::Consensus => consensus_merge(&prune_top_m(built, cfg.m_max)?)?,
    };
    let mut ledger = state.ledger;
    charge(&mut ledger, cfg, hset.len(), children);
    let report = RoundReport::from_set(round, cfg.mode.name(), &next, ledger);
    Ok((ServerState { round, hypotheses: next, prior: state.prior, ledger }, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub reports: Vec<RoundReport>,
    pub state: ServerState,
}

/// Folds [`run_round`] over `data`, one entry of `C` datasets per round.
pub fn run_training(cfg: &RoundConfig, data: &[Vec<ClientDataset>]) -> Result<TrainingRun> {
    run_training_with(cfg, data, |_, _| Ok(()))
}

/// As [`run_training`], calling `observe` after every round.
pub fn run_training_with<F>(cfg: &RoundConfig, data: &[Vec<ClientDataset>], mut observe: F) -> Result<TrainingRun>
where
    F: FnMut(&ServerState, &mut RoundReport) -> Result<()>,
{
    cfg.validate()?;
    if data.len() != cfg.rounds {
        return Err(BcflError::contract(format!("{} rounds of data for {} configured", data.len(), cfg.rounds)));
    }
    let mut state = start(cfg, data)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for clients in data {
        let (next, mut report) = run_round(state, clients, cfg)?;
        observe(&next, &mut report)?;
        reports.push(report);
        state = next;
    }
    Ok(TrainingRun { reports, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Observation, SkewConfig};

    fn gm(dim: usize) -> LocalModelSpec {
        LocalModelSpec::GaussianMean { dim, noise_variance: 1.0 }
    }

    fn scenario(groups: usize, per_group: usize, rounds: usize, seed: u64) -> Vec<Vec<ClientDataset>> {
        let cfg = SkewConfig { groups, clients_per_group: per_group, samples_per_round: 20, seed, test_samples: 1, ..SkewConfig::default() };
        generate(&cfg, rounds).unwrap().rounds
    }

    fn labels_per_round(run: &TrainingRun) -> Vec<Vec<usize>> {
        run.reports.iter().map(|r| r.hypotheses[0].labels.clone()).collect()
    }

    #[test]
    fn initialize_is_seeded_and_distinct() {
        let cfg = RoundConfig { seed: 4, ..RoundConfig::new(3, 2, 1, Mode::Greedy, gm(2)) };
        let a = initialize(&cfg).unwrap();
        let b = initialize(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hypotheses.weights(), &[1.0]);
        let means: Vec<&DVector<f64>> = a.hypotheses.hypotheses()[0].clusters.iter().map(|c| c.mean()).collect();
        assert_eq!(means.len(), 3);
        assert!(means[0] != means[1] && means[1] != means[2] && means[0] != means[2]);
    }

    #[test]
    fn single_cluster_is_pooled_posterior() {
        let data = scenario(2, 2, 1, 3);
        for mode in [Mode::Greedy, Mode::Consensus, Mode::MultiHypothesis, Mode::Conceptual] {
            let cfg = RoundConfig { m_max: 3, ..RoundConfig::new(1, 4, 1, mode, gm(2)) };
            let init = initialize(&cfg).unwrap();
            let prior = init.hypotheses.hypotheses()[0].clusters[0].clone();
            let run = run_training(&cfg, &data).unwrap();
            assert_eq!(run.state.hypotheses.len(), 1);
            let pooled = posterior_update(&prior, &ClientDataset::concat(&data[0]), &cfg.model).unwrap();
            let fused = &run.state.hypotheses.hypotheses()[0].clusters[0];
            assert!((fused.mean() - pooled.mean()).amax() < 1e-10);
            assert!((fused.covariance() - pooled.covariance()).amax() < 1e-12);
        }
    }

    #[test]
    fn greedy_takes_per_client_argmax() {
        let pt = |x: f64| ClientDataset::new(0, 1, 0, vec![Observation::point(vec![x])]);
        let mut data = vec![pt(-3.0), pt(3.0), pt(-2.5)];
        for (j, d) in data.iter_mut().enumerate() {
            d.client_id = j;
        }
        let cfg = RoundConfig::new(2, 3, 1, Mode::Greedy, gm(1));
        let mut state = initialize(&cfg).unwrap();
        let root = Hypothesis::root(vec![GaussianDensity::scalar(-3.0, 1.0).unwrap(), GaussianDensity::scalar(3.0, 1.0).unwrap()]);
        state.hypotheses = HypothesisSet::singleton(root);
        let (_, report) = run_round(state, &data, &cfg).unwrap();
        assert_eq!(report.hypotheses[0].labels, vec![0, 1, 0]);
    }

    #[test]
    fn m1_modes_share_greedy_trajectory() {
        let data = scenario(3, 2, 6, 9);
        let run = |mode| {
            let cfg = RoundConfig { seed: 9, m_max: 1, ..RoundConfig::new(3, 6, 6, mode, gm(2)) };
            labels_per_round(&run_training(&cfg, &data).unwrap())
        };
        let g = run(Mode::Greedy);
        assert_eq!(run(Mode::Consensus), g);
        assert_eq!(run(Mode::MultiHypothesis), g);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let data = scenario(2, 3, 4, 1);
        for estimator in [WeightEstimator::AtMean, WeightEstimator::Sampled { n: 8, seed: 5 }] {
            let cfg = RoundConfig {
                m_max: 4,
                weight_estimator: estimator,
                ..RoundConfig::new(2, 6, 4, Mode::MultiHypothesis, gm(2))
            };
            let par = run_training(&cfg, &data).unwrap();
            let ser = run_training(&RoundConfig { parallel: false, ..cfg }, &data).unwrap();
            assert_eq!(par, ser);
        }
    }

    #[test]
    fn ledger_counts() {
        let data = scenario(2, 2, 3, 2);
        let sent = |mode, m_max| {
            let cfg = RoundConfig { m_max, ..RoundConfig::new(2, 4, 3, mode, gm(2)) };
            run_training(&cfg, &data).unwrap().state.ledger
        };
        let mh = sent(Mode::MultiHypothesis, 3);
        assert_eq!(mh.weights_sent, 3 * 2 * 4 * 3);
        assert_eq!(mh.model_params_sent, 3 * 2 * 2 * 3);
        assert_eq!(mh.rounds_logged, 3);
        assert_eq!(sent(Mode::Consensus, 3).weights_sent, 3 * 2 * 4);
        assert_eq!(sent(Mode::Greedy, 3).weights_sent, 0);
    }

    #[test]
    fn warm_up_identical_clients() {
        let obs: Vec<Observation> = (0..10).map(|i| Observation::point(vec![i as f64 * 0.1, 1.0])).collect();
        let clients: Vec<ClientDataset> = (0..4).map(|j| ClientDataset::new(j, 1, 0, obs.clone())).collect();
        let cfg = RoundConfig { warm_up_rounds: 1, ..RoundConfig::new(3, 4, 1, Mode::Greedy, gm(2)) };
        let warmed = warm_up(&clients, &cfg).unwrap();
        assert_eq!(warmed.len(), 3);
        for w in &warmed[1..] {
            assert!((w.mean() - warmed[0].mean()).amax() < 1e-6);
        }
    }

    #[test]
    fn warm_up_separates_groups() {
        let cfg_data = SkewConfig { groups: 2, clients_per_group: 3, samples_per_round: 50, test_samples: 1, seed: 8, ..SkewConfig::default() };
        let sc = generate(&cfg_data, 1).unwrap();
        let cfg = RoundConfig { warm_up_rounds: 1, ..RoundConfig::new(2, 6, 1, Mode::Greedy, gm(2)) };
        let warmed = warm_up(&sc.rounds[0], &cfg).unwrap();
        for truth in &sc.group_params {
            let closest = warmed.iter().map(|w| (w.mean() - truth).norm()).fold(f64::INFINITY, f64::min);
            assert!(closest < 1.0);
        }
    }

    #[test]
    fn estimator_parsing() {
        assert_eq!("at-mean".parse::<WeightEstimator>().unwrap(), WeightEstimator::AtMean);
        assert_eq!("sampled(64, 3)".parse::<WeightEstimator>().unwrap(), WeightEstimator::Sampled { n: 64, seed: 3 });
        assert!("sampled(0, 3)".parse::<WeightEstimator>().is_err());
        assert!("mean".parse::<WeightEstimator>().is_err());
        let s: WeightEstimator = serde_json::from_str("\"sampled(2, 9)\"").unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), "\"sampled(2, 9)\"");
        assert_eq!("multi-hypothesis".parse::<Mode>().unwrap(), Mode::MultiHypothesis);
    }

    #[test]
    fn conceptual_guard() {
        let ok = RoundConfig::new(2, 2, 2, Mode::Conceptual, gm(1));
        assert!(ok.validate().is_ok());
        let big = RoundConfig::new(4, 10, 2, Mode::Conceptual, gm(1));
        assert!(matches!(big.validate(), Err(BcflError::Config(_))));
    }

    #[test]
    fn round_past_horizon_is_rejected() {
        let data = scenario(1, 2, 1, 0);
        let cfg = RoundConfig::new(1, 2, 1, Mode::Greedy, gm(2));
        let run = run_training(&cfg, &data).unwrap();
        assert!(run_round(run.state, &data[0], &cfg).is_err());
    }
}
