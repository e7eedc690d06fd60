//! Weighted k-medoids (PAM) on a precomputed dissimilarity matrix.
//!
//! All ties break toward the lowest index, so results are a pure function of
//! the matrix and weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spellseq::DissimilarityMatrix;

/// Upper bound on the number of clusters tried by [`select_k`].
pub const DEFAULT_KMAX: usize = 10;
const MAX_SWAPS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of items ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("silhouette requires at least two clusters")]
    SingleCluster,
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Row indices of the medoids, ascending.
    pub medoids: Vec<usize>,
    /// Cluster position (into `medoids`) of every item.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    pub build_cost: f64,
    /// Total cost after each accepted swap.
    pub swap_trace: Vec<f64>,
    pub asw: Option<f64>,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }
}

/// Nearest medoid (position, distance) with the lowest-index tie rule.
fn nearest(d: &DissimilarityMatrix, medoids: &[usize], j: usize) -> (usize, f64, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (pos, &m) in medoids.iter().enumerate() {
        let v = d.get(m, j);
        if v < best.1 {
            second = best.1;
            best = (pos, v);
        } else if v < second {
            second = v;
        }
    }
    (best.0, best.1, second)
}

/// Weighted cost of assigning every item to its nearest medoid.
pub fn assignment_cost(d: &DissimilarityMatrix, medoids: &[usize]) -> f64 {
    (0..d.n())
        .map(|j| d.weights[j] * nearest(d, medoids, j).1)
        .sum()
}

fn assign(d: &DissimilarityMatrix, medoids: &[usize]) -> Vec<usize> {
    (0..d.n()).map(|j| nearest(d, medoids, j).0).collect()
}

fn build(d: &DissimilarityMatrix, k: usize) -> Vec<usize> {
    let n = d.n();
    let mut is_medoid = vec![false; n];
    let mut near = vec![f64::INFINITY; n];
    let mut medoids = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !is_medoid[c]) {
            let row = d.row(c);
            let cost: f64 = (0..n).map(|j| d.weights[j] * near[j].min(row[j])).sum();
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some((c, cost));
            }
        }
        let (c, _) = best.expect("k <= n leaves a candidate");
        is_medoid[c] = true;
        medoids.push(c);
        for (j, v) in near.iter_mut().enumerate() {
            *v = v.min(d.get(c, j));
        }
    }
    medoids.sort_unstable();
    medoids
}

/// PAM: greedy BUILD followed by best-improvement SWAP.
pub fn pam_cluster(d: &DissimilarityMatrix, k: usize) -> Result<Clustering, ClusterError> {
    let n = d.n();
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    let mut medoids = build(d, k);
    let build_cost = assignment_cost(d, &medoids);
    let mut total = build_cost;
    let mut trace = Vec::new();
    let mut is_medoid = vec![false; n];
    for &m in &medoids {
        is_medoid[m] = true;
    }
    for _ in 0..MAX_SWAPS {
        let cache: Vec<(usize, f64, f64)> = (0..n).map(|j| nearest(d, &medoids, j)).collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for pos in 0..medoids.len() {
            for h in (0..n).filter(|&h| !is_medoid[h]) {
                let row = d.row(h);
                let mut delta = 0.0;
                for (j, &(npos, d1, d2)) in cache.iter().enumerate() {
                    let dh = row[j];
                    let new = if npos == pos { d2.min(dh) } else { d1.min(dh) };
                    delta += d.weights[j] * (new - d1);
                }
                if best.is_none_or(|(_, _, b)| delta < b) {
                    best = Some((pos, h, delta));
                }
            }
        }
        let Some((pos, h, delta)) = best else { break };
        if delta >= 0.0 {
            break;
        }
        let mut candidate = medoids.clone();
        candidate[pos] = h;
        candidate.sort_unstable();
        let new_total = assignment_cost(d, &candidate);
        if new_total >= total {
            break;
        }
        is_medoid[medoids[pos]] = false;
        is_medoid[h] = true;
        medoids = candidate;
        total = new_total;
        trace.push(total);
    }
    let assignment = assign(d, &medoids);
    Ok(Clustering {
        k,
        medoids,
        assignment,
        total_cost: total,
        build_cost,
        swap_trace: trace,
        asw: None,
    })
}

/// Weighted average silhouette width. Single-member clusters contribute 0.
pub fn average_silhouette(d: &DissimilarityMatrix, c: &Clustering) -> Result<f64, ClusterError> {
    if c.k < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let n = d.n();
    let mut sizes = vec![0usize; c.k];
    let mut cluster_weight = vec![0.0; c.k];
    for (j, &a) in c.assignment.iter().enumerate() {
        sizes[a] += 1;
        cluster_weight[a] += d.weights[j];
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(ClusterError::EmptyCluster(empty));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut sums = vec![0.0; c.k];
    for i in 0..n {
        let own = c.assignment[i];
        let wi = d.weights[i];
        den += wi;
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = d.row(i);
        for j in 0..n {
            if j != i {
                sums[c.assignment[j]] += d.weights[j] * row[j];
            }
        }
        let a = sums[own] / (cluster_weight[own] - wi);
        let b = (0..c.k)
            .filter(|&k| k != own)
            .map(|k| sums[k] / cluster_weight[k])
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        let s = if m > 0.0 { (b - a) / m } else { 0.0 };
        num += wi * s;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub clustering: Clustering,
    /// `(k, asw)` for every k tried.
    pub asw_by_k: Vec<(usize, f64)>,
    /// Set when n < 3 and no silhouette comparison was possible.
    pub degenerate: bool,
}

/// Runs PAM for each k in `[kmin, kmax]` and keeps the highest silhouette;
/// ties go to the smaller k. `kmax` defaults to `min(10, n - 1)`.
pub fn select_k(
    d: &DissimilarityMatrix,
    kmin: usize,
    kmax: Option<usize>,
) -> Result<Selection, ClusterError> {
    let n = d.n();
    if n == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if n < 3 {
        let clustering = pam_cluster(d, n.min(2))?;
        return Ok(Selection {
            clustering,
            asw_by_k: Vec::new(),
            degenerate: true,
        });
    }
    let kmin = kmin.max(2);
    let kmax = kmax.unwrap_or(DEFAULT_KMAX).min(n - 1).max(kmin);
    if kmin > n - 1 {
        return Err(ClusterError::TooManyClusters { k: kmin, n });
    }
    let runs: Vec<Result<Clustering, ClusterError>> = (kmin..=kmax)
        .into_par_iter()
        .map(|k| {
            let mut c = pam_cluster(d, k)?;
            c.asw = Some(average_silhouette(d, &c)?);
            Ok(c)
        })
        .collect();
    let mut best: Option<Clustering> = None;
    let mut asw_by_k = Vec::new();
    for run in runs {
        let c = run?;
        let asw = c.asw.expect("set above");
        asw_by_k.push((c.k, asw));
        if best.as_ref().is_none_or(|b| asw > b.asw.expect("set above")) {
            best = Some(c);
        }
    }
    Ok(Selection {
        clustering: best.expect("at least one k"),
        asw_by_k,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMedoid {
    pub cluster: usize,
    pub index: usize,
    /// Sum of member weights.
    pub weight: f64,
    pub n_members: usize,
}

/// The member of each cluster with minimal weighted mean dissimilarity to
/// the cluster.
pub fn extract_medoids(c: &Clustering, d: &DissimilarityMatrix) -> Vec<ClusterMedoid> {
    (0..c.k)
        .filter_map(|cluster| {
            let members = c.members(cluster);
            if members.is_empty() {
                return None;
            }
            let weight: f64 = members.iter().map(|&j| d.weights[j]).sum();
            let mut best = (members[0], f64::INFINITY);
            for &i in &members {
                let s: f64 = members.iter().map(|&j| d.weights[j] * d.get(i, j)).sum::<f64>() / weight;
                if s < best.1 {
                    best = (i, s);
                }
            }
            Some(ClusterMedoid {
                cluster,
                index: best.0,
                weight,
                n_members: members.len(),
            })
        })
        .collect()
}
