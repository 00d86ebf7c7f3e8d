//! Predictive metrics, correlation matrix distance, k-means over correlation
//! matrices and trait-level residual profiles.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on Lloyd iterations per restart.
pub const MAX_LLOYD_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub mean_log_lik: f64,
    pub count: usize,
}

/// Accuracy of the argmax level (ties go to the lower level) and the mean log
/// probability of the realized level. Levels in `truth` are 1-based.
pub fn accuracy_and_ll(predictions: &[Vec<f64>], truth: &[usize]) -> Result<MetricReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Structural(format!(
            "{} predictions for {} observations",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(MetricReport {
            accuracy: 0.0,
            mean_log_lik: 0.0,
            count: 0,
        });
    }
    let mut hits = 0usize;
    let mut ll = 0.0;
    for (p, &y) in predictions.iter().zip(truth) {
        if y == 0 || y > p.len() {
            return Err(Error::Data(format!("level {y} outside 1..={}", p.len())));
        }
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        hits += usize::from(best + 1 == y);
        ll += p[y - 1].max(f64::MIN_POSITIVE).ln();
    }
    let n = truth.len() as f64;
    Ok(MetricReport {
        accuracy: hits as f64 / n,
        mean_log_lik: ll / n,
        count: truth.len(),
    })
}

/// Correlation matrix distance `1 - tr(R1 R2) / (||R1||_F ||R2||_F)`.
///
/// Symmetric in its arguments bit for bit.
pub fn cmd(r1: &DMatrix<f64>, r2: &DMatrix<f64>) -> Result<f64> {
    if r1.shape() != r2.shape() || r1.nrows() != r1.ncols() {
        return Err(Error::Metric(format!(
            "CMD needs two square matrices of equal shape, got {:?} and {:?}",
            r1.shape(),
            r2.shape()
        )));
    }
    let (n1, n2) = (r1.norm(), r2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Metric("CMD of a zero matrix is undefined".into()));
    }
    let n = r1.nrows();
    let mut trace = 0.0;
    for i in 0..n {
        trace += r1[(i, i)] * r2[(i, i)];
        for j in (i + 1)..n {
            trace += r1[(i, j)] * r2[(j, i)] + r1[(j, i)] * r2[(i, j)];
        }
    }
    Ok(1.0 - trace / (n1 * n2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id of every input matrix.
    pub assignments: Vec<usize>,
    pub centroids: Vec<DMatrix<f64>>,
    /// `centroid - population` per cluster; empty until
    /// [`ClusterResult::attach_residuals`] is called.
    pub residuals: Vec<DMatrix<f64>>,
    /// Sum over inputs of the CMD to their centroid.
    pub total_within: f64,
    /// Total within-cluster CMD after every Lloyd iteration of the winning
    /// restart.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn attach_residuals(&mut self, population: &DMatrix<f64>) -> Result<()> {
        if let Some(c) = self
            .centroids
            .iter()
            .find(|c| c.shape() != population.shape())
        {
            return Err(Error::Metric(format!(
                "population matrix {:?} does not match centroids {:?}",
                population.shape(),
                c.shape()
            )));
        }
        self.residuals = self.centroids.iter().map(|c| c - population).collect();
        Ok(())
    }
}

/// Elementwise mean rescaled to unit diagonal.
fn normalized_mean<'a>(members: impl Iterator<Item = &'a DMatrix<f64>>) -> Option<DMatrix<f64>> {
    let mut sum: Option<DMatrix<f64>> = None;
    let mut count = 0usize;
    for m in members {
        count += 1;
        match sum.as_mut() {
            Some(s) => *s += m,
            None => sum = Some(m.clone()),
        }
    }
    let mut mean = sum? / count as f64;
    let d: Vec<f64> = (0..mean.nrows()).map(|i| mean[(i, i)]).collect();
    if d.iter().all(|x| *x > 0.0) {
        for ((i, j), v) in mean
            .iter_mut()
            .enumerate()
            .map(|(k, v)| ((k % d.len(), k / d.len()), v))
        {
            *v /= (d[i] * d[j]).sqrt();
        }
    }
    Some(mean)
}

struct Run {
    assignments: Vec<usize>,
    centroids: Vec<DMatrix<f64>>,
    total: f64,
    history: Vec<f64>,
}

fn lloyd(mats: &[DMatrix<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Run> {
    let n = mats.len();
    let mut centroids: Vec<DMatrix<f64>> = sample(rng, n, k)
        .into_iter()
        .map(|i| mats[i].clone())
        .collect();
    let mut assignments = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();

    for _ in 0..MAX_LLOYD_ITERATIONS {
        // assignment step
        let mut changed = false;
        for (i, m) in mats.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = cmd(m, centroid)?;
                if d < best.1 {
                    best = (c, d);
                }
            }
            changed |= assignments[i] != best.0;
            assignments[i] = best.0;
            dist[i] = best.1;
        }
        // empty clusters take the point farthest from its centroid
        for c in 0..k {
            if assignments.contains(&c) {
                continue;
            }
            let far = (0..n)
                .filter(|&i| assignments.iter().filter(|&&a| a == assignments[i]).count() > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::Metric("cannot reseed an empty cluster".into()))?;
            centroids[c] = mats[far].clone();
            assignments[far] = c;
            dist[far] = 0.0;
            changed = true;
        }
        // update step; a new centroid is kept only if it does not increase
        // its cluster's within-cluster distance
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            let Some(candidate) = normalized_mean(members.iter().map(|&i| &mats[i])) else {
                continue;
            };
            let old: f64 = members.iter().map(|&i| dist[i]).sum();
            let new_dist = members
                .iter()
                .map(|&i| cmd(&mats[i], &candidate))
                .collect::<Result<Vec<_>>>()?;
            if new_dist.iter().sum::<f64>() <= old {
                *centroid = candidate;
                for (&i, d) in members.iter().zip(new_dist) {
                    dist[i] = d;
                }
            }
        }
        history.push(dist.iter().sum());
        if !changed {
            break;
        }
    }
    let total = dist.iter().sum();
    Ok(Run {
        assignments,
        centroids,
        total,
        history,
    })
}

/// Lloyd-style k-means under CMD, best of `restarts` seeded initializations.
pub fn kmeans_cmd(
    mats: &[DMatrix<f64>],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterResult> {
    if k == 0 || k > mats.len() {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {} matrices",
            mats.len()
        )));
    }
    if restarts == 0 {
        return Err(Error::Config(
            "at least one k-means restart is required".into(),
        ));
    }
    if mats.iter().any(|m| m.shape() != mats[0].shape()) {
        return Err(Error::Metric("correlation matrices differ in shape".into()));
    }
    let runs: Vec<Run> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(mats, k, &mut rng)
        })
        .collect::<Result<_>>()?;
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.total < a.total { b } else { a })
        .expect("at least one restart");
    Ok(ClusterResult {
        assignments: best.assignments,
        centroids: best.centroids,
        residuals: Vec::new(),
        total_within: best.total,
        history: best.history,
    })
}

/// Trait-by-trait block averages of a residual matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitProfile {
    /// Sorted trait labels indexing the matrix.
    pub traits: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// `centroid - population`, averaged over the item blocks of every trait
/// pair. `item_traits[j]` is the trait of item `j`.
pub fn residual_profile(
    centroid: &DMatrix<f64>,
    population: &DMatrix<f64>,
    item_traits: &[String],
) -> Result<TraitProfile> {
    let j = item_traits.len();
    if centroid.shape() != (j, j) || population.shape() != (j, j) {
        return Err(Error::Metric(format!(
            "residual profile over {j} items got matrices {:?} and {:?}",
            centroid.shape(),
            population.shape()
        )));
    }
    let traits: Vec<String> = item_traits
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: Vec<usize> = item_traits
        .iter()
        .map(|t| traits.binary_search(t).unwrap())
        .collect();
    let p = traits.len();
    let mut sums = DMatrix::zeros(p, p);
    let mut counts = DMatrix::<f64>::zeros(p, p);
    for a in 0..j {
        for b in 0..j {
            sums[(index[a], index[b])] += centroid[(a, b)] - population[(a, b)];
            counts[(index[a], index[b])] += 1.0;
        }
    }
    Ok(TraitProfile {
        traits,
        matrix: sums.component_div(&counts),
    })
}
