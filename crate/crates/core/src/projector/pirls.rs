//! Penalized IRLS for the conditional modes (ũ, β̃) given θ, and the Laplace
//! approximation of the marginal deviance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::family::Family;

#[derive(Clone, Debug, PartialEq)]
pub struct PirlsOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PirlsState {
    /// Working response and weights (prior weights included) at the solution.
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub u: DVector<f64>,
    pub beta: DVector<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Penalized deviance Σ aᵢ·dev(yᵢ, μᵢ) + ‖u‖².
    pub deviance: f64,
    /// log det(ΛᵀZᵀWZΛ + I) at the final weights.
    pub logdet: f64,
    /// Penalized deviance after each accepted iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub jittered: bool,
}

/// Cholesky with escalating diagonal jitter starting at 1e-10.
pub(crate) fn robust_cholesky(m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, false));
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut jitter = 1e-10;
    for _ in 0..8 {
        let mut mj = m.clone();
        for i in 0..mj.nrows() {
            mj[(i, i)] += jitter * scale;
        }
        if let Some(c) = mj.cholesky() {
            return Ok((c, true));
        }
        jitter *= 100.0;
    }
    Err(Error::Numerical("penalized normal equations are not positive definite".into()))
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `[ZΛ | X]`ᵀ W `[ZΛ | X]` plus the identity on the u block.
pub fn joint_precision(zl: &DMatrix<f64>, x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let q = zl.ncols();
    let a = stack(zl, x);
    let mut aw = a.clone();
    for (i, wi) in w.iter().enumerate() {
        aw.row_mut(i).scale_mut(*wi);
    }
    let mut h = a.transpose() * aw;
    for j in 0..q {
        h[(j, j)] += 1.0;
    }
    h
}

fn stack(zl: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q, p) = (x.nrows(), zl.ncols(), x.ncols());
    let mut a = DMatrix::zeros(n, q + p);
    a.columns_mut(0, q).copy_from(zl);
    a.columns_mut(q, p).copy_from(x);
    a
}

fn u_logdet(zl: &DMatrix<f64>, w: &[f64]) -> Result<f64> {
    let mut zw = zl.clone();
    for (i, wi) in w.iter().enumerate() {
        zw.row_mut(i).scale_mut(*wi);
    }
    let mut m = zl.transpose() * zw;
    for j in 0..m.nrows() {
        m[(j, j)] += 1.0;
    }
    let (c, _) = robust_cholesky(m)?;
    Ok(log_det(&c))
}

/// Minimises Σ aᵢ·dev(yᵢ, g⁻¹(ηᵢ)) + ‖u‖² over (u, β) with
/// η = Xβ + ZΛ(θ)u, for prior weights `prior` and target `y`. The first
/// iteration starts from `start` when given, else from the family's
/// initial means.
pub fn pirls(
    design: &DesignMatrices,
    theta: &[f64],
    family: Family,
    y: &[f64],
    prior: &[f64],
    opts: &PirlsOptions,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<PirlsState> {
    let zl = design.z.mul_lambda(&design.lambda(theta));
    pirls_with(&zl, &design.x, family, y, prior, opts, start)
}

pub(crate) fn pirls_with(
    zl: &DMatrix<f64>,
    x: &DMatrix<f64>,
    family: Family,
    y: &[f64],
    prior: &[f64],
    opts: &PirlsOptions,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<PirlsState> {
    let (n, q, p) = (x.nrows(), zl.ncols(), x.ncols());
    let a = stack(zl, x);
    let penalized = |sol: &DVector<f64>| -> (Vec<f64>, f64) {
        let eta: Vec<f64> = (&a * sol).iter().copied().collect();
        let mut d: f64 = sol.rows(0, q).norm_squared();
        for i in 0..n {
            if prior[i] > 0.0 {
                d += prior[i] * family.unit_deviance(y[i], family.mean(eta[i]));
            }
        }
        (eta, d)
    };
    let (mut sol, mut eta, mut d_old) = match start {
        Some((u, b)) => {
            let mut s = DVector::zeros(q + p);
            s.rows_mut(0, q).copy_from(u);
            s.rows_mut(q, p).copy_from(b);
            let (e, d) = penalized(&s);
            (Some(s), e, d)
        }
        None => (
            None,
            y.iter().map(|&v| family.link(family.initial_mean(v))).collect(),
            f64::INFINITY,
        ),
    };
    let mut trace = Vec::new();
    let (mut converged, mut iterations, mut jittered) = (false, 0, false);
    let mut z = vec![0.0; n];
    let mut w = vec![0.0; n];
    for it in 1..=opts.max_iter {
        iterations = it;
        for i in 0..n {
            let pd = family.pseudo_data(y[i], eta[i]);
            z[i] = pd.z;
            w[i] = prior[i] * pd.w;
        }
        let h = joint_precision(zl, x, &w);
        let mut aw = a.clone();
        for i in 0..n {
            aw.row_mut(i).scale_mut(w[i]);
        }
        let rhs = aw.transpose() * DVector::from_column_slice(&z);
        let (chol, j) = robust_cholesky(h)?;
        jittered |= j;
        let mut cand = chol.solve(&rhs);
        let (mut e_new, mut d_new) = penalized(&cand);
        if let Some(old) = &sol {
            let mut halvings = 0;
            while !(d_new <= d_old * (1.0 + 1e-12) + 1e-300) && halvings < opts.max_halvings {
                cand = (&cand + old) * 0.5;
                (e_new, d_new) = penalized(&cand);
                halvings += 1;
            }
            if !(d_new <= d_old * (1.0 + 1e-12) + 1e-300) {
                // No descent found: keep the previous iterate.
                cand = old.clone();
                (e_new, d_new) = penalized(&cand);
            }
        }
        let done = (d_old - d_new).abs() < opts.tol * (d_new.abs() + 0.1);
        sol = Some(cand);
        eta = e_new;
        d_old = d_new;
        trace.push(d_new);
        if done {
            converged = true;
            break;
        }
    }
    let sol = sol.ok_or_else(|| Error::Numerical("PIRLS ran no iterations".into()))?;
    for i in 0..n {
        let pd = family.pseudo_data(y[i], eta[i]);
        z[i] = pd.z;
        w[i] = prior[i] * pd.w;
    }
    let logdet = u_logdet(zl, &w)?;
    Ok(PirlsState {
        mu: eta.iter().map(|&e| family.mean(e)).collect(),
        u: sol.rows(0, q).into_owned(),
        beta: sol.rows(q, p).into_owned(),
        eta,
        z,
        w,
        deviance: d_old,
        logdet,
        trace,
        iterations,
        converged,
        jittered,
    })
}

fn saturated_log_lik(family: Family, y: &[f64], prior: &[f64]) -> f64 {
    y.iter()
        .zip(prior)
        .filter(|(_, a)| **a > 0.0)
        .map(|(v, a)| a * family.log_lik(*v, v.max(1e-300), 1.0))
        .sum()
}

/// −2 log of the Laplace-approximate marginal likelihood at the PIRLS
/// solution. For the Gaussian family the residual variance is profiled out,
/// which makes the value exact.
pub fn laplace_deviance(family: Family, state: &PirlsState, y: &[f64], prior: &[f64]) -> f64 {
    match family {
        Family::Gaussian => {
            let nw: f64 = prior.iter().sum();
            let prss = state.deviance.max(1e-300);
            state.logdet + nw * (1.0 + (2.0 * std::f64::consts::PI * prss / nw).ln())
        }
        _ => state.deviance - 2.0 * saturated_log_lik(family, y, prior) + state.logdet,
    }
}

/// PIRLS at θ followed by [`laplace_deviance`].
pub fn profiled_deviance(
    design: &DesignMatrices,
    theta: &[f64],
    family: Family,
    y: &[f64],
    prior: &[f64],
    opts: &PirlsOptions,
) -> Result<f64> {
    let st = pirls(design, theta, family, y, prior, opts, None)
        .map_err(|e| Error::Numerical(format!("{e} at theta = {theta:?}")))?;
    Ok(laplace_deviance(family, &st, y, prior))
}
