//! Leave-one-out ELPD for the reference model and the submodels along a
//! solution path.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{build_design, DesignMatrices};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::family::Family;
use crate::formula::{ModelFormula, Term};
use crate::projector::{aggregate_draws, cluster_draws, project, ProjectOptions, ProjectionResult, ReferenceFit, DEFAULT_EVAL_CLUSTERS, DEFAULT_SEARCH_CLUSTERS};
use crate::search::{solution_path, SearchOptions, SizeStats, SolutionPath};

/// A reference posterior that can produce draws for each leave-one-out fold.
pub trait LooReference: Sync {
    /// Draws conditioned on all observations.
    fn full(&self) -> &ReferenceFit;
    /// Observed response.
    fn response(&self) -> &[f64];
    /// Draws (possibly reweighted) that approximate the posterior without
    /// observation `i`.
    fn fold(&self, i: usize) -> Result<ReferenceFit>;
}

/// Externally supplied draws; folds reweight them by truncated importance
/// sampling with raw ratios 1/p(yᵢ | draw), capped at √S times their mean.
#[derive(Clone, Debug)]
pub struct DrawsReference {
    pub fit: ReferenceFit,
    pub y: Vec<f64>,
}

impl DrawsReference {
    pub fn new(fit: ReferenceFit, y: Vec<f64>) -> Result<Self> {
        if fit.n_obs() != y.len() {
            return Err(Error::Data(format!("draws cover {} observations, data has {}", fit.n_obs(), y.len())));
        }
        Ok(Self { fit, y })
    }
}

impl LooReference for DrawsReference {
    fn full(&self) -> &ReferenceFit {
        &self.fit
    }

    fn response(&self) -> &[f64] {
        &self.y
    }

    fn fold(&self, i: usize) -> Result<ReferenceFit> {
        let f = &self.fit;
        let s = f.n_draws();
        let neg_ll: Vec<f64> = (0..s).map(|k| -f.family.log_lik(self.y[i], f.mu[(k, i)], f.phi[k])).collect();
        let top = neg_ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = neg_ll.iter().zip(&f.weights).map(|(l, w)| w * (l - top).exp()).collect();
        let cap = raw.iter().sum::<f64>() / s as f64 * (s as f64).sqrt();
        let w: Vec<f64> = raw.iter().map(|r| r.min(cap)).collect();
        let mut out = ReferenceFit::with_weights(f.family, f.mu.clone(), f.phi.clone(), w)?;
        out.assignment = f.assignment.clone();
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElpdSummary {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
    /// Paired difference to the reference and its standard error.
    pub diff_vs_reference: Option<(f64, f64)>,
    pub flags: Vec<String>,
}

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

impl ElpdSummary {
    pub fn from_pointwise(pointwise: Vec<f64>) -> Self {
        let n = pointwise.len() as f64;
        Self {
            elpd: pointwise.iter().sum(),
            se: (n * sample_var(&pointwise)).sqrt(),
            pointwise,
            diff_vs_reference: None,
            flags: Vec::new(),
        }
    }
}

/// Paired ELPD difference `a − b` and its standard error.
pub fn elpd_diff(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("pointwise lengths differ: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok((d.iter().sum(), (d.len() as f64 * sample_var(&d)).sqrt()))
}

/// log Σ_c w_c p(y | μ_c, φ_c).
pub fn mixture_log_density(family: Family, y: f64, mu: &[f64], phi: &[f64], weights: &[f64]) -> f64 {
    let lls: Vec<f64> = mu
        .iter()
        .zip(phi)
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|((m, p), w)| w.ln() + family.log_lik(y, *m, *p))
        .collect();
    let top = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + lls.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

fn reference_lpd(fit: &ReferenceFit, y: f64, i: usize) -> f64 {
    let mu: Vec<f64> = fit.mu.column(i).iter().copied().collect();
    mixture_log_density(fit.family, y, &mu, &fit.phi, &fit.weights)
}

fn projection_lpd(family: Family, res: &ProjectionResult, y: f64, i: usize) -> f64 {
    let mu: Vec<f64> = res.clusters.iter().map(|c| c.mu[i]).collect();
    let phi: Vec<f64> = res.clusters.iter().map(|c| c.phi).collect();
    mixture_log_density(family, y, &mu, &phi, &res.weights)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooMode {
    /// Re-project the full-data path's term sets in each fold.
    #[default]
    FixedPath,
    /// Rerun the forward search in each fold.
    FullSearch,
}

#[derive(Clone, Debug)]
pub struct LooOptions {
    pub mode: LooMode,
    pub search_clusters: usize,
    pub eval_clusters: usize,
    pub seed: u64,
    pub search: SearchOptions,
}

impl Default for LooOptions {
    fn default() -> Self {
        Self {
            mode: LooMode::FixedPath,
            search_clusters: DEFAULT_SEARCH_CLUSTERS,
            eval_clusters: DEFAULT_EVAL_CLUSTERS,
            seed: 0,
            search: SearchOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LooResult {
    pub reference: ElpdSummary,
    /// Sizes 0 (intercept only) through the path length.
    pub sizes: Vec<ElpdSummary>,
    /// Full-data projections at each size on the evaluation clusters.
    pub projections: Vec<ProjectionResult>,
    /// Per-fold paths (full-search mode only).
    pub fold_paths: Option<Vec<Vec<Term>>>,
}

struct FoldOutcome {
    reference: f64,
    sizes: Vec<Option<f64>>,
    failures: Vec<String>,
    path: Option<Vec<Term>>,
}

fn fold_options(base: &ProjectOptions, n: usize, i: usize, fixed: Option<Vec<Vec<f64>>>) -> ProjectOptions {
    let mut prior = base.prior_weights.clone().unwrap_or_else(|| vec![1.0; n]);
    prior[i] = 0.0;
    ProjectOptions {
        prior_weights: Some(prior),
        fixed_theta: fixed,
        ..base.clone()
    }
}

/// Leave-one-out ELPD of every size along `path` and of the reference.
pub fn loo_elpd_path(
    full: &ModelFormula,
    reference: &dyn LooReference,
    data: &Dataset,
    path: &SolutionPath,
    opts: &LooOptions,
) -> Result<LooResult> {
    let n = data.n_obs();
    let y = reference.response();
    let family = reference.full().family;
    let eval_fit = cluster_draws(reference.full(), opts.eval_clusters, derive_seed(opts.seed, 1))?;
    let eval_assign = eval_fit.assignment.clone().expect("clustered fit carries its assignment");
    let k_eval = eval_fit.n_draws();
    let sizes = path.len() + 1;
    let designs: Vec<DesignMatrices> = (0..sizes)
        .map(|s| build_design(data, &path.terms_at(s), &opts.search.design))
        .collect::<Result<_>>()?;
    let search_exec = opts.search.exec;
    let projections: Vec<ProjectionResult> = designs
        .iter()
        .map(|d| project(&eval_fit, d, &opts.search.project, search_exec))
        .collect::<Result<_>>()?;
    let search_assign = match opts.mode {
        LooMode::FixedPath => None,
        LooMode::FullSearch => {
            let f = cluster_draws(reference.full(), opts.search_clusters, derive_seed(opts.seed, 0))?;
            Some((f.n_draws(), f.assignment.expect("clustered fit carries its assignment")))
        }
    };

    let fold = |i: usize| -> Result<FoldOutcome> {
        let fold_ref = reference.fold(i)?;
        let reference_lpd = reference_lpd(&fold_ref, y[i], i);
        let eval_fold = aggregate_draws(&fold_ref, &eval_assign, k_eval)?;
        let mut out = FoldOutcome {
            reference: reference_lpd,
            sizes: Vec::with_capacity(sizes),
            failures: Vec::new(),
            path: None,
        };
        match &search_assign {
            None => {
                for (s, (design, proj)) in designs.iter().zip(&projections).enumerate() {
                    let fixed = design
                        .has_groups()
                        .then(|| proj.clusters.iter().map(|c| c.theta.clone()).collect());
                    let po = fold_options(&opts.search.project, n, i, fixed);
                    match project(&eval_fold, design, &po, Exec::Sequential) {
                        Ok(r) => out.sizes.push(Some(projection_lpd(family, &r, y[i], i))),
                        Err(e) => {
                            out.failures.push(format!("fold {i}, size {s}: {e}"));
                            out.sizes.push(None);
                        }
                    }
                }
            }
            Some((k_search, assign)) => {
                let search_fold = aggregate_draws(&fold_ref, assign, *k_search)?;
                let so = SearchOptions {
                    project: fold_options(&opts.search.project, n, i, None),
                    max_size: Some(path.len()),
                    exec: Exec::Sequential,
                    ..opts.search.clone()
                };
                let fold_path = solution_path(full, &search_fold, data, &so)?;
                for s in 0..sizes {
                    let terms = if s <= fold_path.len() { fold_path.terms_at(s) } else { fold_path.terms_at(fold_path.len()) };
                    let r = build_design(data, &terms, &opts.search.design)
                        .and_then(|d| project(&eval_fold, &d, &so.project, Exec::Sequential));
                    match r {
                        Ok(r) => out.sizes.push(Some(projection_lpd(family, &r, y[i], i))),
                        Err(e) => {
                            out.failures.push(format!("fold {i}, size {s}: {e}"));
                            out.sizes.push(None);
                        }
                    }
                }
                out.path = Some(fold_path.entries.iter().map(|e| e.term.clone()).collect());
            }
        }
        Ok(out)
    };
    let outcomes: Vec<FoldOutcome> = search_exec.map_range(n, fold).into_iter().collect::<Result<_>>()?;

    let reference_pw: Vec<f64> = outcomes.iter().map(|o| o.reference).collect();
    let ref_summary = ElpdSummary::from_pointwise(reference_pw.clone());
    let mut summaries = Vec::with_capacity(sizes);
    let mut filled: Vec<Vec<f64>> = vec![vec![f64::NEG_INFINITY; n]; sizes];
    let mut flags: Vec<Vec<String>> = vec![Vec::new(); sizes];
    for (i, o) in outcomes.iter().enumerate() {
        let mut last = None;
        for s in 0..sizes {
            match o.sizes[s] {
                Some(v) => {
                    filled[s][i] = v;
                    last = Some(v);
                }
                None => {
                    // Fall back to the nearest smaller size.
                    filled[s][i] = last.unwrap_or(o.reference);
                    flags[s].push(format!("observation {i}: fold projection failed"));
                }
            }
        }
        for f in &o.failures {
            log::warn!("{f}");
        }
    }
    for (pw, fl) in filled.into_iter().zip(flags) {
        let mut sm = ElpdSummary::from_pointwise(pw);
        sm.diff_vs_reference = Some(elpd_diff(&sm.pointwise, &reference_pw)?);
        sm.flags = fl;
        summaries.push(sm);
    }
    let fold_paths = match opts.mode {
        LooMode::FixedPath => None,
        LooMode::FullSearch => Some(outcomes.into_iter().map(|o| o.path.unwrap_or_default()).collect()),
    };
    Ok(LooResult {
        reference: ref_summary,
        sizes: summaries,
        projections,
        fold_paths,
    })
}

/// Copies per-size LOO summaries into the path.
pub fn attach_stats(path: &mut SolutionPath, loo: &LooResult) {
    let stats = |s: &ElpdSummary| {
        let (diff, diff_se) = s.diff_vs_reference.unwrap_or((0.0, 0.0));
        SizeStats {
            elpd: s.elpd,
            se: s.se,
            diff,
            diff_se,
        }
    };
    path.intercept_stats = loo.sizes.first().map(stats);
    for (e, s) in path.entries.iter_mut().zip(loo.sizes.iter().skip(1)) {
        e.stats = Some(stats(s));
    }
    path.reference_elpd = Some(loo.reference.elpd);
    path.reference_se = Some(loo.reference.se);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diff_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(elpd_diff(&a, &a).unwrap(), (0.0, 0.0));
        let b = [0.5, 1.5, 2.5];
        let (d, se) = elpd_diff(&a, &b).unwrap();
        assert_relative_eq!(d, 1.5, epsilon = 1e-12);
        assert!(se.abs() < 1e-12);
        assert!(elpd_diff(&a, &b[..2]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let z: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let (d, se) = elpd_diff(&x, &z).unwrap();
        let dv: Vec<f64> = x.iter().zip(&z).map(|(p, q)| p - q).collect();
        let m = dv.iter().sum::<f64>() / 30.0;
        let v = dv.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 29.0;
        assert_relative_eq!(d, 30.0 * m, epsilon = 1e-12);
        assert_relative_eq!(se, (30.0 * v).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn summary_is_additive() {
        let pw = vec![-1.0, -2.5, -0.3, -4.0];
        let s = ElpdSummary::from_pointwise(pw.clone());
        let a = ElpdSummary::from_pointwise(pw[..2].to_vec());
        let b = ElpdSummary::from_pointwise(pw[2..].to_vec());
        assert_relative_eq!(s.elpd, a.elpd + b.elpd, epsilon = 1e-12);
    }

    #[test]
    fn mixture_density_matches_direct() {
        let mu = [0.0, 1.0];
        let phi = [1.0, 2.0];
        let w = [0.3, 0.7];
        let direct = (0.3 * (-0.5f64 * 0.25).exp() / (2.0 * std::f64::consts::PI).sqrt()
            + 0.7 * (-0.5f64 * 0.0625).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt()))
        .ln();
        assert_relative_eq!(mixture_log_density(Family::Gaussian, 0.5, &mu, &phi, &w), direct, epsilon = 1e-12);
    }

    #[test]
    fn importance_weights_are_truncated() {
        let mu = nalgebra::DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.0, 2.0]);
        let r = DrawsReference::new(ReferenceFit::new(Family::Gaussian, mu, vec![1.0; 4]).unwrap(), vec![0.0]).unwrap();
        let f = r.fold(0).unwrap();
        // Raw ratios are 1, 1, 1, e²; the last is capped at 2·mean.
        let raw = 2f64.exp();
        let cap = 2.0 * (3.0 + raw) / 4.0;
        assert_relative_eq!(f.weights[3], cap / (3.0 + cap), epsilon = 1e-12);
        assert_relative_eq!(f.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
