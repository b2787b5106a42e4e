//! End-to-end selection: cluster the reference draws, search, score sizes
//! by LOO and suggest a size.

use crate::data::Dataset;
use crate::error::Result;
use crate::exec::derive_seed;
use crate::formula::ModelFormula;
use crate::projector::cluster_draws;
use crate::search::{solution_path, suggest_size, SearchOptions, SolutionPath};
use crate::validate::{attach_stats, loo_elpd_path, LooOptions, LooResult, LooReference};

#[derive(Clone, Debug)]
pub struct SelectOptions {
    pub loo: LooOptions,
    pub se_multiplier: f64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            loo: LooOptions::default(),
            se_multiplier: 1.0,
        }
    }
}

impl SelectOptions {
    pub fn search(&self) -> &SearchOptions {
        &self.loo.search
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub path: SolutionPath,
    pub loo: LooResult,
    pub suggested_size: usize,
}

pub fn select(full: &ModelFormula, reference: &dyn LooReference, data: &Dataset, opts: &SelectOptions) -> Result<Selection> {
    let search_fit = cluster_draws(reference.full(), opts.loo.search_clusters, derive_seed(opts.loo.seed, 0))?;
    let mut path = solution_path(full, &search_fit, data, opts.search())?;
    let loo = loo_elpd_path(full, reference, data, &path, &opts.loo)?;
    attach_stats(&mut path, &loo);
    let suggested_size = suggest_size(&path, opts.se_multiplier);
    path.suggested_size = Some(suggested_size);
    Ok(Selection { path, loo, suggested_size })
}
