//! Constrained forward search over model terms and the suggested-size rule.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{build_design, DesignOptions};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formula::{candidate_terms, is_admissible_sequence, ModelFormula, Term};
use crate::projector::{project, ProjectOptions, ProjectionResult, ReferenceFit};

#[derive(Clone, Debug, Default)]
pub struct SearchOptions {
    pub design: DesignOptions,
    pub project: ProjectOptions,
    /// Stop after this many terms; `None` searches the whole formula.
    pub max_size: Option<usize>,
    pub exec: Exec,
}

/// LOO summary of one submodel size against the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub elpd: f64,
    pub se: f64,
    pub diff: f64,
    pub diff_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub size: usize,
    pub term: Term,
    pub terms: Vec<Term>,
    pub formula: String,
    pub kl: f64,
    pub stats: Option<SizeStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub response: String,
    pub total_terms: usize,
    /// KL and LOO summary of the intercept-only model (size 0).
    pub intercept_kl: f64,
    pub intercept_stats: Option<SizeStats>,
    pub entries: Vec<PathEntry>,
    pub reference_elpd: Option<f64>,
    pub reference_se: Option<f64>,
    pub suggested_size: Option<usize>,
}

impl SolutionPath {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cumulative term set at `size` (0 = intercept only).
    pub fn terms_at(&self, size: usize) -> Vec<Term> {
        if size == 0 {
            Vec::new()
        } else {
            self.entries[size - 1].terms.clone()
        }
    }

    pub fn stats_at(&self, size: usize) -> Option<SizeStats> {
        if size == 0 {
            self.intercept_stats
        } else {
            self.entries[size - 1].stats
        }
    }

    /// Every cumulative set respects the entry order restrictions.
    pub fn is_admissible(&self) -> bool {
        let order: Vec<Term> = self.entries.iter().map(|e| e.term.clone()).collect();
        is_admissible_sequence(&order)
    }
}

fn project_terms(terms: &[Term], reference: &ReferenceFit, data: &Dataset, opts: &SearchOptions, exec: Exec) -> Result<ProjectionResult> {
    let design = build_design(data, terms, &opts.design)?;
    project(reference, &design, &opts.project, exec)
}

/// Projects every admissible candidate and returns the one with the
/// smallest KL divergence. Near-ties (relative 1e-12) go to the
/// lexicographically smallest term id.
pub fn forward_step(
    current: &[Term],
    full: &ModelFormula,
    reference: &ReferenceFit,
    data: &Dataset,
    opts: &SearchOptions,
) -> Result<(Term, ProjectionResult)> {
    let cands = candidate_terms(current, full);
    if cands.is_empty() {
        return Err(Error::Config("no admissible candidate terms left".into()));
    }
    let outcomes = opts.exec.map(&cands, |c| {
        let mut terms = current.to_vec();
        terms.push(c.clone());
        project_terms(&terms, reference, data, opts, Exec::Sequential)
    });
    let mut best: Option<(Term, ProjectionResult)> = None;
    let mut failures = Vec::new();
    for (c, out) in cands.into_iter().zip(outcomes) {
        match out {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some((bt, br)) => {
                        let tol = 1e-12 * (1.0 + br.kl.abs());
                        r.kl < br.kl - tol || ((r.kl - br.kl).abs() <= tol && c.id() < bt.id())
                    }
                };
                if better {
                    best = Some((c, r));
                }
            }
            Err(e) => {
                log::warn!("candidate {} failed: {e}", c.id());
                failures.push(format!("{}: {e}", c.id()));
            }
        }
    }
    best.ok_or_else(|| Error::Numerical(format!("all candidate projections failed: {}", failures.join("; "))))
}

/// Forward search from the intercept-only model.
pub fn solution_path(full: &ModelFormula, reference: &ReferenceFit, data: &Dataset, opts: &SearchOptions) -> Result<SolutionPath> {
    let limit = opts.max_size.unwrap_or(full.terms.len()).min(full.terms.len());
    let base = project_terms(&[], reference, data, opts, opts.exec)?;
    let mut current: Vec<Term> = Vec::new();
    let mut entries = Vec::new();
    while current.len() < limit {
        let (term, res) = forward_step(&current, full, reference, data, opts)?;
        current.push(term.clone());
        log::info!("size {}: + {} (kl {:.6})", current.len(), term.id(), res.kl);
        entries.push(PathEntry {
            size: current.len(),
            term,
            terms: current.clone(),
            formula: ModelFormula::render_terms(&full.response, &current),
            kl: res.kl,
            stats: None,
        });
    }
    Ok(SolutionPath {
        response: full.response.clone(),
        total_terms: full.terms.len(),
        intercept_kl: base.kl,
        intercept_stats: None,
        entries,
        reference_elpd: None,
        reference_se: None,
        suggested_size: None,
    })
}

/// Smallest size ≥ 1 whose ELPD difference to the reference is within
/// `se_multiplier` standard errors (diff + k·se ≥ 0); the path length if no
/// size qualifies or no LOO summaries are attached.
pub fn suggest_size(path: &SolutionPath, se_multiplier: f64) -> usize {
    path.entries
        .iter()
        .find(|e| e.stats.is_some_and(|s| s.diff + se_multiplier * s.diff_se >= 0.0))
        .map(|e| e.size)
        .unwrap_or(path.len())
}
