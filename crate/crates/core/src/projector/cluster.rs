//! k-means clustering of reference draws on the linear-predictor scale.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ReferenceFit;
use crate::error::{Error, Result};

const MAX_LLOYD: usize = 100;
const MAX_RESTARTS: usize = 10;

/// Collapses draws into `k` representatives given a cluster per draw: the
/// weighted mean of μ (response scale) and of φ within each cluster, with
/// cluster weight equal to the summed draw weight.
pub fn aggregate_draws(reference: &ReferenceFit, assignment: &[usize], k: usize) -> Result<ReferenceFit> {
    let n = reference.n_obs();
    if assignment.len() != reference.n_draws() {
        return Err(Error::Data("assignment length differs from draw count".into()));
    }
    let mut mu = DMatrix::zeros(k, n);
    let mut phi = vec![0.0; k];
    let mut w = vec![0.0; k];
    for (s, &c) in assignment.iter().enumerate() {
        let ws = reference.weights[s];
        w[c] += ws;
        phi[c] += ws * reference.phi[s];
        for i in 0..n {
            mu[(c, i)] += ws * reference.mu[(s, i)];
        }
    }
    for c in 0..k {
        if !(w[c] > 0.0) {
            return Err(Error::Numerical(format!("cluster {c} has no weight")));
        }
        phi[c] /= w[c];
        mu.row_mut(c).unscale_mut(w[c]);
    }
    let mut out = ReferenceFit::with_weights(reference.family, mu, phi, w)?;
    out.assignment = Some(assignment.to_vec());
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means run; `None` if some cluster ends up empty.
fn kmeans(points: &[Vec<f64>], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let s = points.len();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..s)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = s - 1;
            for (j, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = j;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..s)
        };
        centers.push(points[pick].clone());
        for (j, p) in points.iter().enumerate() {
            d2[j] = d2[j].min(sq_dist(p, centers.last().unwrap()));
        }
    }
    let mut assign = vec![usize::MAX; s];
    for _ in 0..MAX_LLOYD {
        let mut changed = false;
        for (j, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assign[j] != best.0 {
                assign[j] = best.0;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for (j, p) in points.iter().enumerate() {
            mass[assign[j]] += weights[j];
            for (a, v) in sums[assign[j]].iter_mut().zip(p) {
                *a += weights[j] * v;
            }
        }
        if mass.contains(&0.0) {
            return None;
        }
        for c in 0..k {
            centers[c] = sums[c].iter().map(|v| v / mass[c]).collect();
        }
        if !changed {
            break;
        }
    }
    Some(assign)
}

/// Clusters the draws of `reference` into at most `n_clusters`
/// representatives. Clusters are numbered by their first member draw.
pub fn cluster_draws(reference: &ReferenceFit, n_clusters: usize, seed: u64) -> Result<ReferenceFit> {
    let s = reference.n_draws();
    if n_clusters == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if n_clusters >= s {
        let assign: Vec<usize> = (0..s).collect();
        return aggregate_draws(reference, &assign, s);
    }
    let family = reference.family;
    let points: Vec<Vec<f64>> = (0..s)
        .map(|r| reference.mu.row(r).iter().map(|&m| family.link(m)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = n_clusters;
    loop {
        for _ in 0..MAX_RESTARTS {
            if let Some(raw) = kmeans(&points, &reference.weights, k, &mut rng) {
                let mut relabel = vec![usize::MAX; k];
                let mut next = 0;
                let assign: Vec<usize> = raw
                    .iter()
                    .map(|&c| {
                        if relabel[c] == usize::MAX {
                            relabel[c] = next;
                            next += 1;
                        }
                        relabel[c]
                    })
                    .collect();
                return aggregate_draws(reference, &assign, k);
            }
        }
        if k == 1 {
            return Err(Error::Numerical("k-means failed with a single cluster".into()));
        }
        log::warn!("empty cluster after {MAX_RESTARTS} restarts; reducing to {} clusters", k - 1);
        k -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use rand_distr::StandardNormal;

    #[test]
    fn identity_clustering() {
        let mu = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let r = ReferenceFit::new(Family::Gaussian, mu.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = cluster_draws(&r, 4, 0).unwrap();
        assert_eq!(c.mu, mu);
        assert_eq!(c.weights, vec![0.25; 4]);
        assert_eq!(c.assignment, Some(vec![0, 1, 2, 3]));
    }

    #[test]
    fn separated_groups_recovered() {
        let a = [0.1, 0.2, 0.3];
        let b = [0.8, 0.9, 0.7];
        let rows: Vec<f64> = (0..10).flat_map(|s| if s % 3 == 0 { b } else { a }).collect();
        let r = ReferenceFit::new(Family::Bernoulli, DMatrix::from_row_slice(10, 3, &rows), vec![]).unwrap();
        for seed in 0..5 {
            let c = cluster_draws(&r, 2, seed).unwrap();
            // Draw 0 is a `b` row so cluster 0 is b.
            for j in 0..3 {
                assert!((c.mu[(0, j)] - b[j]).abs() < 1e-15);
                assert!((c.mu[(1, j)] - a[j]).abs() < 1e-15);
            }
            assert!((c.weights[0] - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..6).map(|j| j as f64).collect();
        let rows: Vec<f64> = (0..100).flat_map(|_| base.iter().map(|b| b + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()).collect();
        let mu = DMatrix::from_row_slice(100, 6, &rows);
        let r = ReferenceFit::new(Family::Gaussian, mu.clone(), vec![1.0; 100]).unwrap();
        let c = cluster_draws(&r, 1, 9).unwrap();
        for j in 0..6 {
            let m: f64 = mu.column(j).iter().sum::<f64>() / 100.0;
            assert!((c.mu[(0, j)] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_distinct_rows_reduces_k() {
        let rows = [1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0];
        let r = ReferenceFit::new(Family::Poisson, DMatrix::from_row_slice(4, 2, &rows), vec![]).unwrap();
        let c = cluster_draws(&r, 3, 1).unwrap();
        assert_eq!(c.n_draws(), 2);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let r = ReferenceFit::new(Family::Gaussian, DMatrix::from_row_slice(40, 5, &rows), vec![1.0; 40]).unwrap();
        assert_eq!(cluster_draws(&r, 6, 77).unwrap(), cluster_draws(&r, 6, 77).unwrap());
    }
}
