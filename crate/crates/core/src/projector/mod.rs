//! Projection of a reference predictive onto a submodel.
//!
//! Each reference draw (or cluster of draws) is projected independently by
//! maximising the submodel likelihood against the reference means μ*: least
//! squares for Gaussian GLMs, IRLS for the other families, and PIRLS with a
//! Laplace-profiled deviance over θ once the submodel has group or smooth
//! terms.

mod cluster;
mod glm;
mod multilevel;
mod pirls;

pub use cluster::{aggregate_draws, cluster_draws};
pub use glm::{project_gaussian, project_irls};
pub use multilevel::{project_multilevel, GaussianGram};
pub use pirls::{joint_precision, laplace_deviance, pirls, profiled_deviance, PirlsOptions, PirlsState};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::formula::Term;
use crate::optim::NelderMead;

pub const DEFAULT_SEARCH_CLUSTERS: usize = 10;
pub const DEFAULT_EVAL_CLUSTERS: usize = 25;

/// Reference predictive summary: per-draw means on the response scale and
/// per-draw Gaussian standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFit {
    pub family: Family,
    /// Draws × observations.
    pub mu: DMatrix<f64>,
    pub phi: Vec<f64>,
    pub weights: Vec<f64>,
    /// For clustered fits: the cluster of each draw of the parent fit.
    pub assignment: Option<Vec<usize>>,
}

impl ReferenceFit {
    /// Uniformly weighted draws. `phi` may be empty for families without
    /// dispersion.
    pub fn new(family: Family, mu: DMatrix<f64>, phi: Vec<f64>) -> Result<Self> {
        let s = mu.nrows();
        let w = vec![1.0 / s as f64; s];
        Self::with_weights(family, mu, phi, w)
    }

    pub fn with_weights(family: Family, mu: DMatrix<f64>, phi: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let s = mu.nrows();
        if s == 0 {
            return Err(Error::Data("reference fit has no draws".into()));
        }
        let phi = if phi.is_empty() { vec![1.0; s] } else { phi };
        if phi.len() != s || weights.len() != s {
            return Err(Error::Data(format!(
                "{s} draws but {} dispersions and {} weights",
                phi.len(),
                weights.len()
            )));
        }
        if family.has_dispersion() {
            if let Some(p) = phi.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                return Err(Error::Data(format!("dispersion draw {p} is not positive")));
            }
        }
        for (k, v) in mu.iter().enumerate() {
            if !family.valid_mean(*v) {
                return Err(Error::Data(format!(
                    "draw {}, observation {}: mean {v} outside the {family} domain",
                    k % s,
                    k / s
                )));
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Data("draw weights must be nonnegative with positive sum".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            family,
            mu,
            phi,
            weights,
            assignment: None,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.mu.ncols()
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.mu.row(s).iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectOptions {
    pub pirls: PirlsOptions,
    pub irls_tol: f64,
    pub irls_max_iter: usize,
    /// θ optimiser settings; `None` uses [`NelderMead::for_dim`].
    pub optimizer: Option<NelderMead>,
    /// Per-observation prior weights (0 drops an observation).
    pub prior_weights: Option<Vec<f64>>,
    /// Skip the θ search and use these values, one vector per cluster.
    pub fixed_theta: Option<Vec<Vec<f64>>>,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self {
            pirls: PirlsOptions::default(),
            irls_tol: 1e-10,
            irls_max_iter: 100,
            optimizer: None,
            prior_weights: None,
            fixed_theta: None,
        }
    }
}

impl ProjectOptions {
    pub(crate) fn prior(&self, n: usize) -> Vec<f64> {
        self.prior_weights.clone().unwrap_or_else(|| vec![1.0; n])
    }
}

/// Projected parameters for one reference cluster.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterProjection {
    pub beta: Vec<f64>,
    /// Spherical group modes; actual group coefficients are `b = Λ(θ) u`.
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: f64,
    pub mu: Vec<f64>,
    /// Objective at the solution: residual deviance for GLMs, profiled
    /// deviance for multilevel submodels.
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub terms: Vec<Term>,
    pub clusters: Vec<ClusterProjection>,
    pub weights: Vec<f64>,
    pub kl: f64,
}

/// Projected Gaussian standard deviation: φ_⊥² = φ*² + mean((μ* − μ⊥)²).
pub(crate) fn project_dispersion(family: Family, phi_ref: f64, mu_ref: &[f64], mu_proj: &[f64], prior: &[f64]) -> f64 {
    if !family.has_dispersion() {
        return 1.0;
    }
    let (mut s, mut n) = (0.0, 0.0);
    for ((a, b), w) in mu_ref.iter().zip(mu_proj).zip(prior) {
        s += w * (a - b) * (a - b);
        n += w;
    }
    (phi_ref * phi_ref + s / n).sqrt()
}

/// Fits a single target `y` (a reference mean vector or an observed
/// response) on `design` with the projection machinery.
pub fn fit_target(
    design: &DesignMatrices,
    family: Family,
    y: &[f64],
    phi: f64,
    opts: &ProjectOptions,
    fixed_theta: Option<&[f64]>,
) -> Result<ClusterProjection> {
    let prior = opts.prior(design.n_obs());
    if design.has_groups() {
        multilevel::fit_one(design, family, y, phi, &prior, opts, fixed_theta)
    } else if family == Family::Gaussian {
        glm::gaussian_cluster(&design.x, y, phi, &prior)
    } else {
        glm::irls_cluster(family, &design.x, y, &prior, opts.irls_tol, opts.irls_max_iter)
    }
}

/// Projects every cluster of `reference` onto `design`.
pub fn project(
    reference: &ReferenceFit,
    design: &DesignMatrices,
    opts: &ProjectOptions,
    exec: Exec,
) -> Result<ProjectionResult> {
    if reference.n_obs() != design.n_obs() {
        return Err(Error::Data(format!(
            "reference has {} observations, design has {}",
            reference.n_obs(),
            design.n_obs()
        )));
    }
    let clusters = if design.has_groups() {
        project_multilevel(reference, design, opts, exec)?
    } else if reference.family == Family::Gaussian {
        project_gaussian(reference, design, opts, exec)?
    } else {
        project_irls(reference, design, opts, exec)?
    };
    let mut result = ProjectionResult {
        terms: design.terms.clone(),
        clusters,
        weights: reference.weights.clone(),
        kl: 0.0,
    };
    result.kl = kl_divergence(reference, &result, opts.prior_weights.as_deref());
    Ok(result)
}

/// Weighted mean over clusters of the mean per-observation KL divergence
/// from the reference predictive to the projected one.
pub fn kl_divergence(reference: &ReferenceFit, result: &ProjectionResult, prior: Option<&[f64]>) -> f64 {
    let n = reference.n_obs();
    let ones;
    let prior = match prior {
        Some(p) => p,
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let total: f64 = prior.iter().sum();
    let mut kl = 0.0;
    for (s, c) in result.clusters.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..n {
            if prior[i] > 0.0 {
                acc += prior[i] * reference.family.kl(reference.mu[(s, i)], c.mu[i], reference.phi[s], c.phi);
            }
        }
        kl += result.weights[s] * acc / total;
    }
    kl.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_result(mu: Vec<f64>, phi: f64) -> ProjectionResult {
        ProjectionResult {
            terms: vec![],
            clusters: vec![ClusterProjection {
                beta: vec![],
                u: vec![],
                b: vec![],
                theta: vec![],
                phi,
                mu,
                deviance: 0.0,
                iterations: 0,
                converged: true,
                flags: vec![],
            }],
            weights: vec![1.0],
            kl: 0.0,
        }
    }

    #[test]
    fn kl_examples() {
        let r = ReferenceFit::new(Family::Bernoulli, DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), vec![]).unwrap();
        assert_eq!(kl_divergence(&r, &toy_result(vec![0.5, 0.5], 1.0), None), 0.0);
        let r = ReferenceFit::new(Family::Bernoulli, DMatrix::from_row_slice(1, 2, &[0.9, 0.9]), vec![]).unwrap();
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_relative_eq!(kl_divergence(&r, &toy_result(vec![0.5, 0.5], 1.0), None), expect, epsilon = 1e-12);
        let r = ReferenceFit::new(Family::Gaussian, DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), vec![1.0]).unwrap();
        let kl = kl_divergence(&r, &toy_result(vec![1.0, 2.0, 3.0], 2f64.sqrt()), None);
        assert_relative_eq!(kl, 0.5 * (0.5 - 1.0 + 2f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(kl, 0.096_573_6, epsilon = 1e-6);
    }

    #[test]
    fn reference_validation() {
        assert!(ReferenceFit::new(Family::Bernoulli, DMatrix::from_element(2, 2, 1.5), vec![]).is_err());
        assert!(ReferenceFit::new(Family::Gaussian, DMatrix::zeros(2, 2), vec![1.0, -1.0]).is_err());
        assert!(ReferenceFit::new(Family::Gaussian, DMatrix::zeros(0, 2), vec![]).is_err());
        let r = ReferenceFit::with_weights(Family::Poisson, DMatrix::from_element(2, 3, 1.0), vec![], vec![1.0, 3.0]).unwrap();
        assert_eq!(r.weights, vec![0.25, 0.75]);
    }
}
