//! Internally synthesised reference posterior: the full model is fitted to
//! the observed response with the projection machinery and draws come from
//! the Gaussian approximation at the mode, conditional on θ̂.
//!
//! Leave-one-out folds refit the mode without the held-out observation (θ
//! kept at θ̂) and reuse the same standard-normal and χ² variates, so fold
//! draws differ from the full-data draws only through the refit.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::data::Dataset;
use crate::design::{build_design, DesignMatrices, DesignOptions};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::formula::ModelFormula;
use crate::projector::{fit_target, joint_precision, ClusterProjection, ProjectOptions, ReferenceFit};
use crate::validate::LooReference;

#[derive(Clone, Debug)]
pub struct ApproxPosterior {
    pub family: Family,
    pub design: DesignMatrices,
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    pub mode: ClusterProjection,
    /// Multiplies the draw deviations from the mode; 0 collapses every draw
    /// onto the modal fit.
    pub draw_scale: f64,
    opts: ProjectOptions,
    eps: DMatrix<f64>,
    chi2: Vec<f64>,
    nu: f64,
    full: ReferenceFit,
}

fn stack(zl: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q, p) = (x.nrows(), zl.ncols(), x.ncols());
    let mut a = DMatrix::zeros(n, q + p);
    a.columns_mut(0, q).copy_from(zl);
    a.columns_mut(q, p).copy_from(x);
    a
}

impl ApproxPosterior {
    /// Fits `full` to `data` and prepares `n_draws` draws.
    pub fn fit(
        data: &Dataset,
        full: &ModelFormula,
        design_opts: &DesignOptions,
        n_draws: usize,
        seed: u64,
        draw_scale: f64,
    ) -> Result<Self> {
        if n_draws == 0 {
            return Err(Error::Config("need at least one reference draw".into()));
        }
        let family = full.family;
        if let Some((i, v)) = data.response.iter().enumerate().find(|(_, v)| !family.valid_response(**v)) {
            return Err(Error::Data(format!("observation {i}: response {v} outside the {family} domain")));
        }
        let design = build_design(data, &full.terms, design_opts)?;
        let opts = ProjectOptions::default();
        let y = data.response.clone();
        let mode = fit_target(&design, family, &y, 1.0, &opts, None)?;
        let theta = mode.theta.clone();
        let dim = design.q() + design.p();
        let nu = (y.len() as f64 - design.p() as f64).max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::from_fn(dim, n_draws, |_, _| StandardNormal.sample(&mut rng));
        let chi = ChiSquared::new(nu).map_err(|e| Error::Numerical(e.to_string()))?;
        let chi2 = (0..n_draws).map(|_| chi.sample(&mut rng)).collect();
        let mut post = Self {
            family,
            design,
            y,
            theta,
            mode,
            draw_scale,
            opts,
            eps,
            chi2,
            nu,
            full: ReferenceFit::new(family, DMatrix::from_element(1, 1, family.mean(0.0)), vec![1.0])?,
        };
        let full_prior = vec![1.0; post.y.len()];
        post.full = post.draws_from(&post.mode, &full_prior)?;
        Ok(post)
    }

    pub fn n_draws(&self) -> usize {
        self.chi2.len()
    }

    /// Residual-scale estimate of the Gaussian SD at the mode.
    pub fn sigma_hat(&self) -> f64 {
        let prior = vec![1.0; self.y.len()];
        (self.prss(&self.mode, &prior) / self.nu).sqrt()
    }

    fn prss(&self, fit: &ClusterProjection, prior: &[f64]) -> f64 {
        let r: f64 = self
            .y
            .iter()
            .zip(&fit.mu)
            .zip(prior)
            .map(|((y, m), a)| a * (y - m) * (y - m))
            .sum();
        r + fit.u.iter().map(|v| v * v).sum::<f64>()
    }

    /// Draws around `fit` (a mode computed with `prior`).
    fn draws_from(&self, fit: &ClusterProjection, prior: &[f64]) -> Result<ReferenceFit> {
        let family = self.family;
        let lam = self.design.lambda(&self.theta);
        let zl = self.design.z.mul_lambda(&lam);
        let a = stack(&zl, &self.design.x);
        let mut mode = DVector::zeros(a.ncols());
        let q = zl.ncols();
        for (j, v) in fit.u.iter().enumerate() {
            mode[j] = *v;
        }
        for (j, v) in fit.beta.iter().enumerate() {
            mode[q + j] = *v;
        }
        let w: Vec<f64> = match family {
            Family::Gaussian => prior.to_vec(),
            _ => {
                let eta = &a * &mode;
                eta.iter()
                    .zip(prior)
                    .map(|(e, p)| p * family.mu_eta(*e).powi(2) / family.variance(family.mean(*e)))
                    .collect()
            }
        };
        let h = joint_precision(&zl, &self.design.x, &w);
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&self.eps)
            .ok_or_else(|| Error::Numerical("singular posterior factor".into()))?;
        let nw: f64 = prior.iter().sum();
        let nu = (nw - self.design.p() as f64).max(1.0);
        let prss = self.prss(fit, prior);
        let s = self.n_draws();
        let mut phi = vec![1.0; s];
        let mut params = DMatrix::zeros(a.ncols(), s);
        for k in 0..s {
            let scale = if family == Family::Gaussian {
                phi[k] = if self.draw_scale == 0.0 {
                    (prss / nu).sqrt()
                } else {
                    (prss / self.chi2[k]).sqrt()
                };
                self.draw_scale * phi[k]
            } else {
                self.draw_scale
            };
            params.set_column(k, &(&mode + dev.column(k) * scale));
        }
        let eta = params.transpose() * a.transpose();
        let mu = eta.map(|e| family.mean(e));
        if family == Family::Gaussian {
            ReferenceFit::new(family, mu, phi)
        } else {
            ReferenceFit::new(family, mu, vec![])
        }
    }

    fn fold_fit(&self, i: usize) -> Result<(ClusterProjection, Vec<f64>)> {
        let mut prior = vec![1.0; self.y.len()];
        prior[i] = 0.0;
        let opts = ProjectOptions {
            prior_weights: Some(prior.clone()),
            ..self.opts.clone()
        };
        let theta = (!self.theta.is_empty()).then_some(self.theta.as_slice());
        let fit = fit_target(&self.design, self.family, &self.y, 1.0, &opts, theta)?;
        Ok((fit, prior))
    }
}

impl LooReference for ApproxPosterior {
    fn full(&self) -> &ReferenceFit {
        &self.full
    }

    fn response(&self) -> &[f64] {
        &self.y
    }

    fn fold(&self, i: usize) -> Result<ReferenceFit> {
        let (fit, prior) = self.fold_fit(i)?;
        self.draws_from(&fit, &prior)
    }
}
