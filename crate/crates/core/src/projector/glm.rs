//! Projections onto submodels without group terms.

use nalgebra::{DMatrix, DVector};

use super::{project_dispersion, ClusterProjection, ProjectOptions, ReferenceFit};
use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;

/// Weighted least squares through an SVD; returns the minimum-norm solution
/// and whether X was numerically rank deficient on the weighted rows.
pub(crate) fn weighted_ls(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> Result<(DVector<f64>, bool)> {
    let (n, p) = x.shape();
    let mut xw = x.clone();
    let mut zw = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].max(0.0).sqrt();
        xw.row_mut(i).scale_mut(s);
        zw[i] = s * z[i];
    }
    let svd = xw.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * n.max(p) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let beta = svd
        .solve(&zw, eps)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok((beta, rank < p))
}

pub(crate) fn gaussian_cluster(x: &DMatrix<f64>, mu: &[f64], phi: f64, prior: &[f64]) -> Result<ClusterProjection> {
    let (beta, deficient) = weighted_ls(x, mu, prior)?;
    let fit: Vec<f64> = (x * &beta).iter().copied().collect();
    let deviance = mu.iter().zip(&fit).zip(prior).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
    let mut flags = Vec::new();
    if deficient {
        flags.push("rank-deficient X: minimum-norm solution".to_string());
    }
    Ok(ClusterProjection {
        beta: beta.iter().copied().collect(),
        u: vec![],
        b: vec![],
        theta: vec![],
        phi: project_dispersion(Family::Gaussian, phi, mu, &fit, prior),
        mu: fit,
        deviance,
        iterations: 1,
        converged: true,
        flags,
    })
}

/// Least-squares projection of each Gaussian cluster onto X.
pub fn project_gaussian(
    reference: &ReferenceFit,
    design: &DesignMatrices,
    opts: &ProjectOptions,
    exec: Exec,
) -> Result<Vec<ClusterProjection>> {
    if reference.family != Family::Gaussian || design.has_groups() {
        return Err(Error::Config("project_gaussian needs a Gaussian reference and no group terms".into()));
    }
    let prior = opts.prior(design.n_obs());
    exec.map_range(reference.n_draws(), |s| {
        gaussian_cluster(&design.x, &reference.row(s), reference.phi[s], &prior)
    })
    .into_iter()
    .collect()
}

fn deviance(family: Family, y: &[f64], mu: &[f64], prior: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(prior)
        .map(|((y, m), w)| if *w > 0.0 { w * family.unit_deviance(*y, *m) } else { 0.0 })
        .sum()
}

pub(crate) fn irls_cluster(
    family: Family,
    x: &DMatrix<f64>,
    y: &[f64],
    prior: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ClusterProjection> {
    let n = y.len();
    let mut eta: Vec<f64> = y.iter().map(|&v| family.link(family.initial_mean(v))).collect();
    let mut beta: Option<DVector<f64>> = None;
    let mut dev_old = f64::INFINITY;
    let mut flags = Vec::new();
    let (mut converged, mut iterations, mut floored_any) = (false, 0, false);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for it in 1..=max_iter {
        iterations = it;
        let mut z = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut all_floored = true;
        for i in 0..n {
            let pd = family.pseudo_data(y[i], eta[i]);
            z[i] = pd.z;
            w[i] = prior[i] * pd.w;
            floored_any |= pd.floored && prior[i] > 0.0;
            all_floored &= pd.floored || prior[i] == 0.0;
        }
        if all_floored {
            flags.push("all working weights underflowed (separation)".to_string());
        }
        let (mut b_new, deficient) = weighted_ls(x, &z, &w)?;
        if deficient && !flags.iter().any(|f| f.starts_with("rank")) {
            flags.push("rank-deficient X: minimum-norm solution".to_string());
        }
        let mut mu_new = linear_mean(family, x, &b_new);
        let mut dev_new = deviance(family, y, &mu_new, prior);
        if let Some(b_old) = &beta {
            let mut halvings = 0;
            while !(dev_new <= dev_old * (1.0 + 1e-12) + 1e-300) && halvings < 10 {
                b_new = (&b_new + b_old) * 0.5;
                mu_new = linear_mean(family, x, &b_new);
                dev_new = deviance(family, y, &mu_new, prior);
                halvings += 1;
            }
        }
        eta = (x * &b_new).iter().copied().collect();
        if best.as_ref().is_none_or(|(d, _)| dev_new < *d) {
            best = Some((dev_new, b_new.clone()));
        }
        let done = (dev_old - dev_new).abs() < tol * (dev_new.abs() + 0.1);
        dev_old = dev_new;
        beta = Some(b_new);
        if done {
            converged = true;
            break;
        }
    }
    if floored_any {
        flags.push("working weights floored".to_string());
    }
    if !converged {
        flags.push(format!("IRLS did not converge in {max_iter} iterations"));
    }
    let (dev, beta) = best.ok_or_else(|| Error::Numerical("IRLS ran no iterations".into()))?;
    Ok(ClusterProjection {
        mu: linear_mean(family, x, &beta),
        beta: beta.iter().copied().collect(),
        u: vec![],
        b: vec![],
        theta: vec![],
        phi: 1.0,
        deviance: dev,
        iterations,
        converged,
        flags,
    })
}

fn linear_mean(family: Family, x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (x * beta).iter().map(|&e| family.mean(e)).collect()
}

/// IRLS projection of each cluster onto X for non-Gaussian families: the
/// maximiser of Σ μ*ᵢ ξᵢ − B(ξᵢ).
pub fn project_irls(
    reference: &ReferenceFit,
    design: &DesignMatrices,
    opts: &ProjectOptions,
    exec: Exec,
) -> Result<Vec<ClusterProjection>> {
    if design.has_groups() {
        return Err(Error::Config("project_irls needs a design without group terms".into()));
    }
    let prior = opts.prior(design.n_obs());
    let family = reference.family;
    exec.map_range(reference.n_draws(), |s| {
        if family == Family::Gaussian {
            gaussian_cluster(&design.x, &reference.row(s), reference.phi[s], &prior)
        } else {
            irls_cluster(family, &design.x, &reference.row(s), &prior, opts.irls_tol, opts.irls_max_iter)
        }
    })
    .into_iter()
    .collect()
}
