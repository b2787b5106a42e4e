//! Projection onto submodels with group or smooth terms: θ is chosen by
//! minimising the Laplace-profiled deviance, then (ũ, β̃) are the PIRLS
//! modes at θ̂.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use super::pirls::{laplace_deviance, pirls_with, robust_cholesky};
use super::{project_dispersion, ClusterProjection, ProjectOptions, ReferenceFit};
use crate::design::{DesignMatrices, Lambda};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::optim::{minimize, NelderMead};

/// Weighted cross products of `[Z | X]` and a target `y`, from which the
/// Gaussian penalized least-squares problem can be solved for any θ in
/// O((q + p)³) without touching the rows again.
#[derive(Clone, Debug)]
pub struct GaussianGram {
    pub gzz: DMatrix<f64>,
    pub gzx: DMatrix<f64>,
    pub gxx: DMatrix<f64>,
    pub zy: DVector<f64>,
    pub xy: DVector<f64>,
    pub yy: f64,
    pub nw: f64,
}

#[derive(Clone, Debug)]
pub struct GramSolution {
    pub u: DVector<f64>,
    pub beta: DVector<f64>,
    /// log det(ΛᵀZᵀAZΛ + I).
    pub logdet: f64,
    /// Penalized residual sum of squares from the normal equations.
    pub prss: f64,
    pub jittered: bool,
}

fn weighted(m: &DMatrix<f64>, a: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, w) in a.iter().enumerate() {
        out.row_mut(i).scale_mut(*w);
    }
    out
}

impl GaussianGram {
    pub fn new(z: &DMatrix<f64>, x: &DMatrix<f64>, y: &[f64], prior: &[f64]) -> Self {
        let zw = weighted(z, prior);
        let xw = weighted(x, prior);
        let yv = DVector::from_column_slice(y);
        Self {
            gzz: z.transpose() * &zw,
            gzx: zw.transpose() * x,
            gxx: x.transpose() * &xw,
            zy: zw.transpose() * &yv,
            xy: xw.transpose() * &yv,
            yy: y.iter().zip(prior).map(|(v, a)| a * v * v).sum(),
            nw: prior.iter().sum(),
        }
    }

    /// Replaces the target, keeping the design cross products.
    pub fn retarget(&mut self, z: &DMatrix<f64>, x: &DMatrix<f64>, y: &[f64], prior: &[f64]) {
        let yw = DVector::from_iterator(y.len(), y.iter().zip(prior).map(|(v, a)| a * v));
        self.zy = z.transpose() * &yw;
        self.xy = x.transpose() * &yw;
        self.yy = y.iter().zip(prior).map(|(v, a)| a * v * v).sum();
    }

    /// Removes observation `i` (row `zi`, `xi`, target `yi`, weight `a`).
    pub fn downdate(&mut self, zi: &[f64], xi: &[f64], yi: f64, a: f64) {
        let (q, p) = (zi.len(), xi.len());
        for r in 0..q {
            if zi[r] == 0.0 {
                continue;
            }
            for c in 0..q {
                self.gzz[(r, c)] -= a * zi[r] * zi[c];
            }
            for c in 0..p {
                self.gzx[(r, c)] -= a * zi[r] * xi[c];
            }
            self.zy[r] -= a * zi[r] * yi;
        }
        for r in 0..p {
            for c in 0..p {
                self.gxx[(r, c)] -= a * xi[r] * xi[c];
            }
            self.xy[r] -= a * xi[r] * yi;
        }
        self.yy -= a * yi * yi;
        self.nw -= a;
    }

    pub fn solve(&self, lambda: &Lambda) -> Result<GramSolution> {
        let (q, p) = (self.gzz.nrows(), self.gxx.nrows());
        let mut h = DMatrix::zeros(q + p, q + p);
        let mut huu = lambda.sandwich(&self.gzz);
        for j in 0..q {
            huu[(j, j)] += 1.0;
        }
        let hux = lambda.right_mul(&self.gzx.transpose()).transpose();
        h.view_mut((0, 0), (q, q)).copy_from(&huu);
        h.view_mut((0, q), (q, p)).copy_from(&hux);
        h.view_mut((q, 0), (p, q)).copy_from(&hux.transpose());
        h.view_mut((q, q), (p, p)).copy_from(&self.gxx);
        let mut rhs = DVector::zeros(q + p);
        rhs.rows_mut(0, q).copy_from(&lambda.tr_mul_vec(&self.zy));
        rhs.rows_mut(q, p).copy_from(&self.xy);
        let (chol, jittered) = robust_cholesky(h)?;
        let sol = chol.solve(&rhs);
        let logdet = if q == 0 {
            0.0
        } else {
            2.0 * chol.l_dirty().diagonal().rows(0, q).iter().map(|d| d.ln()).sum::<f64>()
        };
        let prss = (self.yy - sol.dot(&rhs)).max(0.0);
        Ok(GramSolution {
            u: sol.rows(0, q).into_owned(),
            beta: sol.rows(q, p).into_owned(),
            logdet,
            prss,
            jittered,
        })
    }
}

/// Exact profiled −2 log-likelihood of a Gaussian multilevel model given
/// the penalized residual sum of squares.
pub(crate) fn gaussian_profiled(logdet: f64, prss: f64, nw: f64) -> f64 {
    logdet + nw * (1.0 + (2.0 * std::f64::consts::PI * prss.max(1e-300) / nw).ln())
}

fn residual_prss(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: &Lambda,
    sol: &GramSolution,
    y: &[f64],
    prior: &[f64],
) -> (Vec<f64>, DVector<f64>, f64) {
    let b = lambda.mul_vec(&sol.u);
    let eta = x * &sol.beta + z * &b;
    let mut prss = sol.u.norm_squared();
    for i in 0..y.len() {
        prss += prior[i] * (y[i] - eta[i]).powi(2);
    }
    (eta.iter().copied().collect(), b, prss)
}

fn optimizer(opts: &ProjectOptions, dim: usize) -> NelderMead {
    opts.optimizer.clone().unwrap_or_else(|| NelderMead::for_dim(dim))
}

fn boundary_flags(design: &DesignMatrices, theta: &[f64], flags: &mut Vec<String>) {
    let lower = design.theta_lower();
    if theta.iter().zip(&lower).any(|(t, l)| *l == 0.0 && *t == 0.0) {
        flags.push("variance component at zero".to_string());
    }
}

fn gaussian_cluster(
    design: &DesignMatrices,
    z: &DMatrix<f64>,
    gram: &GaussianGram,
    y: &[f64],
    phi: f64,
    prior: &[f64],
    opts: &ProjectOptions,
    fixed: Option<&[f64]>,
) -> Result<ClusterProjection> {
    let x = &design.x;
    let objective = |theta: &[f64]| -> f64 {
        let lam = design.lambda(theta);
        match gram.solve(&lam) {
            Ok(sol) => {
                let (_, _, prss) = residual_prss(z, x, &lam, &sol, y, prior);
                gaussian_profiled(sol.logdet, prss, gram.nw)
            }
            Err(_) => f64::INFINITY,
        }
    };
    let mut flags = Vec::new();
    let (theta, evals) = match fixed {
        Some(t) => (t.to_vec(), 0),
        None => {
            let nm = optimizer(opts, design.theta_len());
            let m = minimize(objective, &design.theta_init(), &design.theta_lower_boxed(), &design.theta_upper(), &nm);
            if !m.converged {
                flags.push("theta optimiser hit its evaluation cap".to_string());
            }
            (m.x, m.evals)
        }
    };
    let lam = design.lambda(&theta);
    let sol = gram.solve(&lam)?;
    if sol.jittered {
        flags.push("normal equations jittered".to_string());
    }
    let (eta, b, prss) = residual_prss(z, x, &lam, &sol, y, prior);
    boundary_flags(design, &theta, &mut flags);
    Ok(ClusterProjection {
        beta: sol.beta.iter().copied().collect(),
        u: sol.u.iter().copied().collect(),
        b: b.iter().copied().collect(),
        phi: project_dispersion(Family::Gaussian, phi, y, &eta, prior),
        mu: eta,
        deviance: gaussian_profiled(sol.logdet, prss, gram.nw),
        theta,
        iterations: evals,
        converged: !flags.iter().any(|f| f.contains("cap")),
        flags,
    })
}

fn glmm_cluster(
    design: &DesignMatrices,
    z: &DMatrix<f64>,
    family: Family,
    y: &[f64],
    prior: &[f64],
    opts: &ProjectOptions,
    fixed: Option<&[f64]>,
) -> Result<ClusterProjection> {
    let x = &design.x;
    let warm: RefCell<Option<(DVector<f64>, DVector<f64>)>> = RefCell::new(None);
    let evaluate = |theta: &[f64]| -> Result<_> {
        let lam = design.lambda(theta);
        let zl = lam.right_mul(z);
        let start = warm.borrow().clone();
        let st = pirls_with(&zl, x, family, y, prior, &opts.pirls, start.as_ref().map(|(u, b)| (u, b)))?;
        Ok((st, lam))
    };
    let mut flags = Vec::new();
    let theta = match fixed {
        Some(t) => t.to_vec(),
        None => {
            let objective = |theta: &[f64]| -> f64 {
                match evaluate(theta) {
                    Ok((st, _)) => {
                        let d = laplace_deviance(family, &st, y, prior);
                        if st.converged {
                            *warm.borrow_mut() = Some((st.u.clone(), st.beta.clone()));
                        }
                        d
                    }
                    Err(_) => f64::INFINITY,
                }
            };
            let nm = optimizer(opts, design.theta_len());
            let m = minimize(objective, &design.theta_init(), &design.theta_lower_boxed(), &design.theta_upper(), &nm);
            if !m.converged {
                flags.push("theta optimiser hit its evaluation cap".to_string());
            }
            m.x
        }
    };
    let (st, lam) = evaluate(&theta).map_err(|e| Error::Numerical(format!("{e} at theta = {theta:?}")))?;
    if st.jittered {
        flags.push("normal equations jittered".to_string());
    }
    if !st.converged {
        flags.push("PIRLS did not converge".to_string());
    }
    boundary_flags(design, &theta, &mut flags);
    let b = lam.mul_vec(&st.u);
    Ok(ClusterProjection {
        beta: st.beta.iter().copied().collect(),
        b: b.iter().copied().collect(),
        u: st.u.iter().copied().collect(),
        phi: 1.0,
        deviance: laplace_deviance(family, &st, y, prior),
        mu: st.mu,
        theta,
        iterations: st.iterations,
        converged: st.converged && !flags.iter().any(|f| f.contains("cap")),
        flags,
    })
}

/// Fits one target vector on a design with group blocks.
pub(crate) fn fit_one(
    design: &DesignMatrices,
    family: Family,
    y: &[f64],
    phi: f64,
    prior: &[f64],
    opts: &ProjectOptions,
    fixed: Option<&[f64]>,
) -> Result<ClusterProjection> {
    let z = design.z.dense();
    match family {
        Family::Gaussian => {
            let gram = GaussianGram::new(&z, &design.x, y, prior);
            gaussian_cluster(design, &z, &gram, y, phi, prior, opts, fixed)
        }
        _ => glmm_cluster(design, &z, family, y, prior, opts, fixed),
    }
}

/// Projects each cluster onto a design with group blocks.
pub fn project_multilevel(
    reference: &ReferenceFit,
    design: &DesignMatrices,
    opts: &ProjectOptions,
    exec: Exec,
) -> Result<Vec<ClusterProjection>> {
    if !design.has_groups() {
        return Err(Error::Config("project_multilevel needs a design with group terms".into()));
    }
    if let Some(f) = &opts.fixed_theta {
        if f.len() != reference.n_draws() || f.iter().any(|t| t.len() != design.theta_len()) {
            return Err(Error::Config("fixed theta must give one full θ vector per cluster".into()));
        }
    }
    let prior = opts.prior(design.n_obs());
    let z = design.z.dense().into_owned();
    let fixed = |s: usize| opts.fixed_theta.as_ref().map(|f| f[s].as_slice());
    match reference.family {
        Family::Gaussian => {
            let base = GaussianGram::new(&z, &design.x, &reference.row(0), &prior);
            exec.map_range(reference.n_draws(), |s| {
                let y = reference.row(s);
                let mut gram = base.clone();
                gram.retarget(&z, &design.x, &y, &prior);
                gaussian_cluster(design, &z, &gram, &y, reference.phi[s], &prior, opts, fixed(s))
            })
        }
        family => exec.map_range(reference.n_draws(), |s| {
            glmm_cluster(design, &z, family, &reference.row(s), &prior, opts, fixed(s))
        }),
    }
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Dataset, Factor};
    use crate::design::{build_design, DesignOptions};
    use crate::formula::Term;
    use crate::projector::pirls::{pirls, PirlsOptions};
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grouped(n: usize, levels: usize, sigma_g: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<usize> = (0..n).map(|i| i % levels).collect();
        let eff: Vec<f64> = (0..levels).map(|_| sigma_g * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = (0..n).map(|i| 1.0 + 0.5 * x[i] + eff[g[i]] + rng.sample::<f64, _>(StandardNormal)).collect();
        let mut cols = IndexMap::new();
        cols.insert("x".into(), Column::Continuous(x));
        cols.insert("g".into(), Column::Factor(Factor::from_codes(g, levels)));
        Dataset::new("y", y, cols).unwrap()
    }

    #[test]
    fn gram_matches_pirls() {
        let d = grouped(40, 4, 1.0, 3);
        let des = build_design(&d, &[Term::population("x"), Term::group_intercept("g"), Term::group_slope("x", "g")], &DesignOptions::default()).unwrap();
        let theta = [0.9, 0.2, 0.4];
        let prior: Vec<f64> = (0..40).map(|i| if i == 7 { 0.0 } else { 1.0 }).collect();
        let st = pirls(&des, &theta, Family::Gaussian, &d.response, &prior, &PirlsOptions::default(), None).unwrap();
        let z = des.z.dense().into_owned();
        let mut gram = GaussianGram::new(&z, &des.x, &d.response, &[1.0; 40]);
        let zi: Vec<f64> = z.row(7).iter().copied().collect();
        let xi: Vec<f64> = des.x.row(7).iter().copied().collect();
        gram.downdate(&zi, &xi, d.response[7], 1.0);
        let sol = gram.solve(&des.lambda(&theta)).unwrap();
        assert!((sol.u - &st.u).amax() < 1e-9);
        assert!((sol.beta - &st.beta).amax() < 1e-9);
        assert!((sol.logdet - st.logdet).abs() < 1e-9);
        assert!((sol.prss - st.deviance).abs() < 1e-8);
    }

    #[test]
    fn variance_component_tracks_group_signal() {
        for (sigma_g, strong) in [(3.0, true), (0.0, false)] {
            let d = grouped(200, 10, sigma_g, 11);
            let des = build_design(&d, &[Term::population("x"), Term::group_intercept("g")], &DesignOptions::default()).unwrap();
            let r = ReferenceFit::new(Family::Gaussian, DMatrix::from_row_slice(1, 200, &d.response), vec![1.0]).unwrap();
            let c = &project_multilevel(&r, &des, &ProjectOptions::default(), Exec::Sequential).unwrap()[0];
            if strong {
                assert!(c.theta[0] > 1.0, "{:?}", c.theta);
            } else {
                assert!(c.theta[0] < 0.3, "{:?}", c.theta);
            }
        }
    }

    #[test]
    fn cluster_order_is_irrelevant() {
        let d = grouped(30, 3, 1.0, 5);
        let des = build_design(&d, &[Term::population("x"), Term::group_intercept("g")], &DesignOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f64> = (0..90).map(|k| d.response[k % 30] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let fwd = DMatrix::from_row_slice(3, 30, &rows);
        let mut rev = fwd.clone();
        rev.swap_rows(0, 2);
        for family in [Family::Gaussian, Family::Poisson] {
            let (a, b) = if family == Family::Poisson {
                (fwd.map(|v| v.exp()), rev.map(|v| v.exp()))
            } else {
                (fwd.clone(), rev.clone())
            };
            let ra = ReferenceFit::new(family, a, vec![1.0; 3]).unwrap();
            let rb = ReferenceFit::new(family, b, vec![1.0; 3]).unwrap();
            let pa = project_multilevel(&ra, &des, &ProjectOptions::default(), Exec::Parallel).unwrap();
            let pb = project_multilevel(&rb, &des, &ProjectOptions::default(), Exec::Sequential).unwrap();
            assert_eq!(pa[0], pb[2]);
            assert_eq!(pa[1], pb[1]);
        }
    }
}
