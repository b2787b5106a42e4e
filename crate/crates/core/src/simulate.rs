//! Simulation harness: the multilevel data-generating process, selection
//! runs over a grid of settings, and TPR/FPR evaluation against the truth.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, Factor};
use crate::design::DesignOptions;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::family::Family;
use crate::formula::{ModelFormula, Term};
use crate::reference::ApproxPosterior;
use crate::search::SolutionPath;
use crate::select::{select, SelectOptions};

/// How the hyperparameter spreads are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperScale {
    #[default]
    StandardDeviation,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub mu_f: f64,
    pub sigma_f: f64,
    pub mu_bf: f64,
    pub sigma_bf: f64,
    pub mu_g: f64,
    pub sigma_g: f64,
}

impl Hyper {
    pub fn defaults(family: Family) -> Self {
        match family {
            Family::Bernoulli => Self {
                mu_f: 0.0,
                sigma_f: 4.0,
                mu_bf: 0.0,
                sigma_bf: 2.0,
                mu_g: 0.0,
                sigma_g: 3.0,
            },
            _ => Self {
                mu_f: 0.0,
                sigma_f: 20.0,
                mu_bf: 5.0,
                sigma_bf: 10.0,
                mu_g: 0.0,
                sigma_g: 5.0,
            },
        }
    }
}

fn default_d() -> usize {
    5
}
fn default_v() -> f64 {
    0.33
}
fn default_one() -> usize {
    1
}
fn default_l() -> usize {
    5
}
fn default_n() -> usize {
    300
}
fn default_s() -> f64 {
    0.4
}
fn default_phi() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Number of candidate variables.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Probability that a variable also varies by group.
    #[serde(default = "default_v")]
    pub v: f64,
    /// Number of grouping factors.
    #[serde(default = "default_one")]
    pub k: usize,
    #[serde(default)]
    pub rho: f64,
    /// Levels per grouping factor.
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "gaussian")]
    pub family: Family,
    /// Probability that a variable is irrelevant.
    #[serde(default = "default_s")]
    pub s: f64,
    /// `None` uses [`Hyper::defaults`] for the family.
    #[serde(default)]
    pub hyper: Option<Hyper>,
    #[serde(default)]
    pub hyper_scale: HyperScale,
    /// Gaussian noise SD.
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default)]
    pub seed: u64,
}

fn gaussian() -> Family {
    Family::Gaussian
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d: 5,
            v: 0.33,
            k: 1,
            rho: 0.0,
            l: 5,
            n: 300,
            family: Family::Gaussian,
            s: 0.4,
            hyper: None,
            hyper_scale: HyperScale::StandardDeviation,
            phi: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.k == 0 || self.l == 0 || self.n == 0 {
            return bad("d, k, l and n must be at least 1");
        }
        if !(0.0..1.0).contains(&self.s) {
            return bad("sparsity s must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.v) {
            return bad("v must lie in [0, 1]");
        }
        if !(self.phi > 0.0) {
            return bad("phi must be positive");
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper.unwrap_or_else(|| Hyper::defaults(self.family))
    }

    fn sd(&self, spread: f64) -> f64 {
        match self.hyper_scale {
            HyperScale::StandardDeviation => spread,
            HyperScale::Variance => spread.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Truth {
    /// Relevance flags; index 0 is the intercept (always 1).
    pub z: Vec<bool>,
    /// Group-variation flags; index 0 is the group intercept (always 1).
    pub v: Vec<bool>,
    pub beta: Vec<f64>,
    /// Per factor: the mean of its level coefficients.
    pub mu_g: Vec<Vec<f64>>,
    /// Per factor and level: coefficients for the intercept and each variable.
    pub u: Vec<Vec<Vec<f64>>>,
    pub eta: Vec<f64>,
    /// Per factor: level index of each observation.
    pub groups: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct SimData {
    pub dataset: Dataset,
    pub truth: Truth,
    pub relevant_terms: Vec<Term>,
    /// Reference formula: every variable plus, for each factor, a group
    /// intercept and slopes on the variables flagged by `v`.
    pub formula: ModelFormula,
}

fn var_name(d: usize) -> String {
    format!("x{d}")
}

fn factor_name(k: usize) -> String {
    format!("g{}", k + 1)
}

pub fn generate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let h = cfg.hyper();
    let (dim, n) = (cfg.d + 1, cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let x: Vec<Vec<f64>> = (0..cfg.d).map(|_| (0..n).map(|_| std(&mut rng)).collect()).collect();
    let mut beta = vec![h.mu_f + cfg.sd(h.sigma_f) * std(&mut rng)];
    beta.extend((0..cfg.d).map(|_| h.mu_bf + cfg.sd(h.sigma_bf) * std(&mut rng)));
    let mut z = vec![true];
    z.extend((0..cfg.d).map(|_| rng.random::<f64>() < 1.0 - cfg.s));
    let groups: Vec<Vec<usize>> = (0..cfg.k).map(|_| (0..n).map(|_| rng.random_range(0..cfg.l)).collect()).collect();
    let sg = cfg.sd(h.sigma_g);
    let mu_g: Vec<Vec<f64>> = (0..cfg.k).map(|_| (0..dim).map(|_| h.mu_g + sg * std(&mut rng)).collect()).collect();
    let mut v = vec![true];
    v.extend((0..cfg.d).map(|_| rng.random::<f64>() < cfg.v));

    let sigma = DMatrix::from_fn(dim, dim, |a, b| if a == b { sg * sg } else { cfg.rho * sg * sg });
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Config(format!("group covariance with rho = {} is not positive definite", cfg.rho)))?;
    let lower = chol.l();
    let u: Vec<Vec<Vec<f64>>> = mu_g
        .iter()
        .map(|m| {
            (0..cfg.l)
                .map(|_| {
                    let e = DVector::from_fn(dim, |_, _| std(&mut rng));
                    (&lower * e).iter().zip(m).map(|(a, b)| a + b).collect()
                })
                .collect()
        })
        .collect();

    let xval = |i: usize, d: usize| if d == 0 { 1.0 } else { x[d - 1][i] };
    let eta: Vec<f64> = (0..n)
        .map(|i| {
            let mut e = 0.0;
            for d in 0..dim {
                if !z[d] {
                    continue;
                }
                e += beta[d] * xval(i, d);
                if v[d] {
                    for k in 0..cfg.k {
                        e += u[k][groups[k][i]][d] * xval(i, d);
                    }
                }
            }
            e
        })
        .collect();
    let y: Vec<f64> = match cfg.family {
        Family::Gaussian => {
            let noise = Normal::new(0.0, cfg.phi).map_err(|e| Error::Config(e.to_string()))?;
            eta.iter().map(|e| e + noise.sample(&mut rng)).collect()
        }
        Family::Bernoulli => eta.iter().map(|e| (rng.random::<f64>() < cfg.family.mean(*e)) as u8 as f64).collect(),
        Family::Poisson => eta
            .iter()
            .map(|e| Poisson::new(cfg.family.mean(*e)).map(|p| p.sample(&mut rng)).map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_>>()?,
    };

    let mut cols = IndexMap::new();
    for (d, xd) in x.into_iter().enumerate() {
        cols.insert(var_name(d + 1), Column::Continuous(xd));
    }
    for (k, g) in groups.iter().enumerate() {
        cols.insert(factor_name(k), Column::Factor(Factor::from_codes(g.clone(), cfg.l)));
    }
    let dataset = Dataset::new("y", y, cols)?;

    let mut terms: Vec<Term> = (1..dim).map(|d| Term::population(&var_name(d))).collect();
    let mut relevant: Vec<Term> = (1..dim).filter(|d| z[*d]).map(|d| Term::population(&var_name(d))).collect();
    for k in 0..cfg.k {
        let f = factor_name(k);
        terms.push(Term::group_intercept(&f));
        relevant.push(Term::group_intercept(&f));
        for d in (1..dim).filter(|d| v[*d]) {
            terms.push(Term::group_slope(&var_name(d), &f));
            if z[d] {
                relevant.push(Term::group_slope(&var_name(d), &f));
            }
        }
    }
    let formula = ModelFormula {
        response: "y".into(),
        terms,
        family: cfg.family,
    };
    Ok(SimData {
        dataset,
        truth: Truth {
            z,
            v,
            beta,
            mu_g,
            u,
            eta,
            groups,
        },
        relevant_terms: relevant,
        formula,
    })
}

/// Internal stand-in for an MCMC reference posterior: the full model's
/// Gaussian approximation at its mode.
pub fn approx_reference_posterior(sim: &SimData, full: &ModelFormula, n_draws: usize, seed: u64) -> Result<ApproxPosterior> {
    ApproxPosterior::fit(&sim.dataset, full, &DesignOptions::default(), n_draws, seed, 1.0)
}

/// Type-7 sample quantile of unsorted data.
pub fn quantile(values: &[f64], t: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * t.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub t: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// ELPD gain of each path entry over the previous size.
pub fn improvements(path: &SolutionPath) -> Result<Vec<f64>> {
    (1..=path.len())
        .map(|s| match (path.stats_at(s), path.stats_at(s - 1)) {
            (Some(a), Some(b)) => Ok(a.elpd - b.elpd),
            _ => Err(Error::Config("path has no LOO summaries attached".into())),
        })
        .collect()
}

/// Selects terms whose ELPD improvement exceeds the `t` quantile of all
/// improvements (everything at `t = 0`) and scores them against `truth`.
pub fn tpr_fpr_curve(path: &SolutionPath, truth: &[Term], thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    let imp = improvements(path)?;
    let terms: Vec<&Term> = path.entries.iter().map(|e| &e.term).collect();
    let n_true = terms.iter().filter(|t| truth.contains(t)).count();
    let n_false = terms.len() - n_true;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0usize, 0usize);
            if !imp.is_empty() {
                let q = quantile(&imp, t);
                for (term, gain) in terms.iter().zip(&imp) {
                    if t <= 0.0 || *gain > q {
                        if truth.contains(term) {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
            }
            RocPoint {
                t,
                tpr: (n_true > 0).then(|| tp as f64 / n_true as f64),
                fpr: (n_false > 0).then(|| fp as f64 / n_false as f64),
            }
        })
        .collect())
}

/// Thresholds 0, 1/m, …, 1.
pub fn threshold_grid(m: usize) -> Vec<f64> {
    (0..=m).map(|i| i as f64 / m as f64).collect()
}

/// Averages curves threshold by threshold, skipping undefined rates.
pub fn pool_curves(curves: &[Vec<RocPoint>]) -> Vec<RocPoint> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    (0..first.len())
        .map(|j| RocPoint {
            t: first[j].t,
            tpr: mean(curves.iter().filter_map(|c| c[j].tpr).collect()),
            fpr: mean(curves.iter().filter_map(|c| c[j].fpr).collect()),
        })
        .collect()
}

/// Trapezoidal area under the (fpr, tpr) points, which are sorted by fpr.
pub fn auc(curve: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().filter_map(|p| Some((p.fpr?, p.tpr?))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub n_draws: usize,
    pub select: SelectOptions,
    pub thresholds: Vec<f64>,
    pub exec: Exec,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            n_draws: 200,
            select: SelectOptions::default(),
            thresholds: threshold_grid(20),
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Replicate {
    pub cell: usize,
    pub replicate: usize,
    pub seed: u64,
    pub suggested_size: usize,
    pub total_terms: usize,
    pub elpd_ref: f64,
    pub elpd_at_suggested: f64,
    pub diff_at_suggested: f64,
    pub diff_se_at_suggested: f64,
    pub terms: Vec<Term>,
    pub admissible: bool,
    pub roc: Vec<RocPoint>,
}

impl Replicate {
    pub fn relative_size(&self) -> f64 {
        self.suggested_size as f64 / self.total_terms as f64
    }

    /// ELPD at the suggested size is within one SE of the reference.
    pub fn within_one_se(&self) -> bool {
        self.diff_at_suggested + self.diff_se_at_suggested >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: usize,
    pub config: SimConfig,
    pub replicates: usize,
    pub failures: usize,
    pub mean_relative_size: f64,
    pub lower: f64,
    pub upper: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Debug)]
pub struct GridResults {
    pub replicates: Vec<Replicate>,
    pub failures: Vec<(usize, usize, String)>,
    pub cells: Vec<CellSummary>,
}

/// One simulated dataset end to end.
pub fn run_replicate(cfg: &SimConfig, opts: &GridOptions, exec: Exec) -> Result<(SimData, Replicate)> {
    let sim = generate(cfg)?;
    let post = approx_reference_posterior(&sim, &sim.formula, opts.n_draws, derive_seed(cfg.seed, 1))?;
    let mut so = opts.select.clone();
    so.loo.seed = derive_seed(cfg.seed, 2);
    so.loo.search.exec = exec;
    let sel = select(&sim.formula, &post, &sim.dataset, &so)?;
    let k = sel.suggested_size;
    let at = &sel.loo.sizes[k];
    let (diff, diff_se) = at.diff_vs_reference.unwrap_or((0.0, 0.0));
    let roc = tpr_fpr_curve(&sel.path, &sim.relevant_terms, &opts.thresholds)?;
    let rep = Replicate {
        cell: 0,
        replicate: 0,
        seed: cfg.seed,
        suggested_size: k,
        total_terms: sim.formula.terms.len(),
        elpd_ref: sel.loo.reference.elpd,
        elpd_at_suggested: at.elpd,
        diff_at_suggested: diff,
        diff_se_at_suggested: diff_se,
        terms: sel.path.entries.iter().map(|e| e.term.clone()).collect(),
        admissible: sel.path.is_admissible(),
        roc,
    };
    Ok((sim, rep))
}

pub fn run_grid(grid: &[SimConfig], replicates: usize, opts: &GridOptions) -> Result<GridResults> {
    for c in grid {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..replicates).map(move |r| (c, r))).collect();
    let inner = if opts.exec.is_parallel() { Exec::Sequential } else { opts.exec };
    let outcomes = opts.exec.map(&jobs, |&(c, r)| {
        let cfg = SimConfig {
            seed: derive_seed(grid[c].seed, r as u64),
            ..grid[c].clone()
        };
        run_replicate(&cfg, opts, inner).map(|(_, mut rep)| {
            rep.cell = c;
            rep.replicate = r;
            rep
        })
    });
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for ((c, r), out) in jobs.into_iter().zip(outcomes) {
        match out {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("cell {c}, replicate {r} failed: {e}");
                failures.push((c, r, e.to_string()));
            }
        }
    }
    let cells = grid
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let mine: Vec<&Replicate> = reps.iter().filter(|r| r.cell == c).collect();
            let sizes: Vec<f64> = mine.iter().map(|r| r.relative_size()).collect();
            let curves: Vec<Vec<RocPoint>> = mine.iter().map(|r| r.roc.clone()).collect();
            let roc = pool_curves(&curves);
            let (mean, lower, upper) = if sizes.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                (sizes.iter().sum::<f64>() / sizes.len() as f64, quantile(&sizes, 0.025), quantile(&sizes, 0.975))
            };
            CellSummary {
                cell: c,
                config: cfg.clone(),
                replicates: mine.len(),
                failures: replicates - mine.len(),
                mean_relative_size: mean,
                lower,
                upper,
                auc: auc(&roc),
                roc,
            }
        })
        .collect();
    Ok(GridResults {
        replicates: reps,
        failures,
        cells,
    })
}
