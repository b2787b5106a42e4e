//! Population and group design matrices for a term set, and the relative
//! covariance factor Λ(θ) of the group coefficients.
//!
//! Group coefficients are `b = Λ(θ) u` with spherical `u`. Λ is block
//! diagonal: block `k` repeats a `d_k × d_k` lower-triangular template once
//! per level, and Z columns are laid out level-major within each block
//! (`offset + level * d_k + j`).

pub mod spline;

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::formula::Term;
pub use spline::{bspline_basis, smooth_to_mixed, MixedSmooth, SmoothBasis, SmoothSpec};

/// Below this many columns Z is kept dense.
pub const DENSE_Z_MAX_COLS: usize = 64;

/// Magnitude cap on every θ entry during optimisation.
pub const THETA_BOUND: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    /// Full lower-triangular template: `d(d+1)/2` parameters.
    Full,
    /// Diagonal template: `d` parameters.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// Group terms sharing a grouping factor form one correlated block.
    pub correlated: bool,
    pub smooth: SmoothSpec,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            correlated: true,
            smooth: SmoothSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupBlock {
    /// Grouping factor name, or the smooth id for penalized spline parts.
    pub label: String,
    pub terms: Vec<Term>,
    pub n_levels: usize,
    pub dim: usize,
    pub cov: CovStructure,
    pub col_offset: usize,
    pub theta_offset: usize,
    pub dim_names: Vec<String>,
}

impl GroupBlock {
    pub fn n_cols(&self) -> usize {
        self.n_levels * self.dim
    }

    pub fn n_theta(&self) -> usize {
        match self.cov {
            CovStructure::Full => self.dim * (self.dim + 1) / 2,
            CovStructure::Diagonal => self.dim,
        }
    }

    /// Whether each θ entry of this block is a diagonal (scale) entry.
    fn theta_is_diag(&self) -> Vec<bool> {
        match self.cov {
            CovStructure::Diagonal => vec![true; self.dim],
            CovStructure::Full => {
                let mut v = Vec::with_capacity(self.n_theta());
                for j in 0..self.dim {
                    for i in j..self.dim {
                        v.push(i == j);
                    }
                }
                v
            }
        }
    }

    /// The `d × d` template for this block's slice of θ (column-major lower
    /// triangle for full blocks).
    pub fn template(&self, theta: &[f64]) -> DMatrix<f64> {
        let t = &theta[self.theta_offset..self.theta_offset + self.n_theta()];
        let mut m = DMatrix::zeros(self.dim, self.dim);
        match self.cov {
            CovStructure::Diagonal => {
                for j in 0..self.dim {
                    m[(j, j)] = t[j];
                }
            }
            CovStructure::Full => {
                let mut k = 0;
                for j in 0..self.dim {
                    for i in j..self.dim {
                        m[(i, j)] = t[k];
                        k += 1;
                    }
                }
            }
        }
        m
    }
}

/// Minimal compressed-sparse-column matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                m[(self.row_idx[k], j)] = self.values[k];
            }
        }
        m
    }

    /// Structural entries grouped by row.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[k]].push((j, self.values[k]));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroupMatrix {
    Dense(DMatrix<f64>),
    Sparse(CscMatrix),
}

impl GroupMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            GroupMatrix::Dense(m) => m.nrows(),
            GroupMatrix::Sparse(s) => s.nrows,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            GroupMatrix::Dense(m) => m.ncols(),
            GroupMatrix::Sparse(s) => s.ncols,
        }
    }

    pub fn dense(&self) -> Cow<'_, DMatrix<f64>> {
        match self {
            GroupMatrix::Dense(m) => Cow::Borrowed(m),
            GroupMatrix::Sparse(s) => Cow::Owned(s.to_dense()),
        }
    }

    /// Structural nonzeros of one row.
    pub fn row_nnz(&self, i: usize) -> usize {
        match self {
            GroupMatrix::Dense(m) => m.row(i).iter().filter(|v| **v != 0.0).count(),
            GroupMatrix::Sparse(s) => (0..s.ncols)
                .map(|j| s.row_idx[s.col_ptr[j]..s.col_ptr[j + 1]].iter().filter(|&&r| r == i).count())
                .sum(),
        }
    }

    /// `Z·Λ(θ)` as a dense matrix.
    pub fn mul_lambda(&self, lambda: &Lambda) -> DMatrix<f64> {
        match self {
            GroupMatrix::Dense(m) => lambda.right_mul(m),
            GroupMatrix::Sparse(s) => {
                let mut out = DMatrix::zeros(s.nrows, s.ncols);
                for (b, t) in lambda.blocks.iter().zip(&lambda.templates) {
                    for l in 0..b.n_levels {
                        let base = b.col_offset + l * b.dim;
                        for src in 0..b.dim {
                            let col = base + src;
                            for k in s.col_ptr[col]..s.col_ptr[col + 1] {
                                let (r, v) = (s.row_idx[k], s.values[k]);
                                for dst in 0..=src {
                                    let f = t[(src, dst)];
                                    if f != 0.0 {
                                        out[(r, base + dst)] += v * f;
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Relative covariance factor Λ(θ) for a set of blocks.
#[derive(Clone, Debug)]
pub struct Lambda<'a> {
    blocks: &'a [GroupBlock],
    templates: Vec<DMatrix<f64>>,
    q: usize,
}

impl<'a> Lambda<'a> {
    pub fn new(blocks: &'a [GroupBlock], theta: &[f64]) -> Self {
        let templates = blocks.iter().map(|b| b.template(theta)).collect();
        let q = blocks.iter().map(GroupBlock::n_cols).sum();
        Self { blocks, templates, q }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.q, self.q);
        for (b, t) in self.blocks.iter().zip(&self.templates) {
            for l in 0..b.n_levels {
                let o = b.col_offset + l * b.dim;
                m.view_mut((o, o), (b.dim, b.dim)).copy_from(t);
            }
        }
        m
    }

    /// `M·Λ` for `M` with q columns.
    pub fn right_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (b, t) in self.blocks.iter().zip(&self.templates) {
            for l in 0..b.n_levels {
                let o = b.col_offset + l * b.dim;
                let prod = m.columns(o, b.dim) * t;
                out.columns_mut(o, b.dim).copy_from(&prod);
            }
        }
        out
    }

    /// `Λᵀ·G·Λ` for a q × q matrix.
    pub fn sandwich(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let gl = self.right_mul(g);
        self.right_mul(&gl.transpose()).transpose()
    }

    /// `Λᵀ·v`.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.q);
        for (b, t) in self.blocks.iter().zip(&self.templates) {
            for l in 0..b.n_levels {
                let o = b.col_offset + l * b.dim;
                let r = t.transpose() * v.rows(o, b.dim);
                out.rows_mut(o, b.dim).copy_from(&r);
            }
        }
        out
    }

    /// `Λ·u`.
    pub fn mul_vec(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.q);
        for (b, t) in self.blocks.iter().zip(&self.templates) {
            for l in 0..b.n_levels {
                let o = b.col_offset + l * b.dim;
                let r = t * u.rows(o, b.dim);
                out.rows_mut(o, b.dim).copy_from(&r);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DesignMatrices {
    pub terms: Vec<Term>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z: GroupMatrix,
    pub blocks: Vec<GroupBlock>,
}

impl DesignMatrices {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn has_groups(&self) -> bool {
        !self.blocks.is_empty()
    }

    pub fn theta_len(&self) -> usize {
        self.blocks.iter().map(GroupBlock::n_theta).sum()
    }

    /// Lower bounds: 0 for scale entries, unbounded for off-diagonals.
    pub fn theta_lower(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.theta_is_diag())
            .map(|d| if d { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Box upper bounds; mirror of [`THETA_BOUND`] on each entry.
    pub fn theta_upper(&self) -> Vec<f64> {
        vec![THETA_BOUND; self.theta_len()]
    }

    /// Lower bounds with off-diagonals boxed at `-THETA_BOUND`.
    pub fn theta_lower_boxed(&self) -> Vec<f64> {
        self.theta_lower().into_iter().map(|l| l.max(-THETA_BOUND)).collect()
    }

    /// Scales 1, off-diagonals 0.
    pub fn theta_init(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.theta_is_diag())
            .map(|d| if d { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn lambda<'a>(&'a self, theta: &[f64]) -> Lambda<'a> {
        Lambda::new(&self.blocks, theta)
    }
}

struct NamedCol {
    name: String,
    values: Vec<f64>,
}

/// Expansion of one variable: itself if continuous, treatment dummies (first
/// level dropped) if categorical.
fn variable_columns(data: &Dataset, var: &str) -> Result<Vec<NamedCol>> {
    match data.column(var)? {
        Column::Continuous(v) => Ok(vec![NamedCol {
            name: var.to_string(),
            values: v.clone(),
        }]),
        Column::Factor(f) => Ok((1..f.n_levels())
            .map(|l| NamedCol {
                name: format!("{var}{}", f.levels[l]),
                values: f.codes.iter().map(|&c| if c == l { 1.0 } else { 0.0 }).collect(),
            })
            .collect()),
    }
}

enum BlockSource<'a> {
    Factor {
        factor: &'a str,
        terms: Vec<&'a Term>,
    },
    Smooth {
        term: &'a Term,
        z_part: DMatrix<f64>,
    },
}

/// Builds X (intercept plus population, interaction and smooth null-space
/// columns, in term order) and Z (one block per grouping factor, or per group
/// term when uncorrelated, plus one block per smooth).
pub fn build_design(data: &Dataset, terms: &[Term], opts: &DesignOptions) -> Result<DesignMatrices> {
    let n = data.n_obs();
    let mut x_cols: Vec<NamedCol> = vec![NamedCol {
        name: "(Intercept)".into(),
        values: vec![1.0; n],
    }];
    let mut sources: Vec<BlockSource> = Vec::new();
    for term in terms {
        match term {
            Term::Intercept => {}
            Term::Population { var, partner: None } => x_cols.extend(variable_columns(data, var)?),
            Term::Population {
                var,
                partner: Some(b),
            } => {
                let ca = variable_columns(data, var)?;
                let cb = variable_columns(data, b)?;
                for a in &ca {
                    for c in &cb {
                        x_cols.push(NamedCol {
                            name: format!("{}:{}", a.name, c.name),
                            values: a.values.iter().zip(&c.values).map(|(p, q)| p * q).collect(),
                        });
                    }
                }
            }
            Term::Smooth { var } => {
                let xv = data.continuous(var)?;
                let basis = spline::bspline_basis_named(var, xv, opts.smooth.n_basis, opts.smooth.order)?;
                let mixed = smooth_to_mixed(&basis)?;
                for (j, col) in mixed.x_part.column_iter().enumerate() {
                    x_cols.push(NamedCol {
                        name: format!("s({var}).null{}", j + 1),
                        values: col.iter().copied().collect(),
                    });
                }
                sources.push(BlockSource::Smooth {
                    term,
                    z_part: mixed.z_part,
                });
            }
            Term::GroupIntercept { factor } | Term::GroupSlope { factor, .. } => {
                data.factor(factor)?;
                if let Term::GroupSlope { var, .. } = term {
                    data.column(var)?;
                }
                let existing = sources.iter_mut().find_map(|s| match s {
                    BlockSource::Factor { factor: f, terms } if opts.correlated && *f == factor => Some(terms),
                    _ => None,
                });
                match existing {
                    Some(ts) => ts.push(term),
                    None => sources.push(BlockSource::Factor {
                        factor,
                        terms: vec![term],
                    }),
                }
            }
        }
    }

    let x = DMatrix::from_fn(n, x_cols.len(), |i, j| x_cols[j].values[i]);
    let x_names = x_cols.into_iter().map(|c| c.name).collect();

    // Per-block (levels, dim, per-observation level code and values).
    let mut blocks = Vec::new();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let (mut col_offset, mut theta_offset) = (0, 0);
    for src in &sources {
        let block = match src {
            BlockSource::Factor { factor, terms } => {
                let f = data.factor(factor)?;
                let mut vals: Vec<NamedCol> = Vec::new();
                for t in terms {
                    match t {
                        Term::GroupIntercept { .. } => vals.push(NamedCol {
                            name: "(Intercept)".into(),
                            values: vec![1.0; n],
                        }),
                        Term::GroupSlope { var, .. } => vals.extend(variable_columns(data, var)?),
                        _ => unreachable!(),
                    }
                }
                let dim = vals.len();
                for (i, &code) in f.codes.iter().enumerate() {
                    for (j, c) in vals.iter().enumerate() {
                        triplets.push((i, col_offset + code * dim + j, c.values[i]));
                    }
                }
                GroupBlock {
                    label: factor.to_string(),
                    terms: terms.iter().map(|t| (*t).clone()).collect(),
                    n_levels: f.n_levels(),
                    dim,
                    cov: if opts.correlated {
                        CovStructure::Full
                    } else {
                        CovStructure::Diagonal
                    },
                    col_offset,
                    theta_offset,
                    dim_names: vals.into_iter().map(|c| c.name).collect(),
                }
            }
            BlockSource::Smooth { term, z_part } => {
                for i in 0..n {
                    for l in 0..z_part.ncols() {
                        triplets.push((i, col_offset + l, z_part[(i, l)]));
                    }
                }
                GroupBlock {
                    label: term.id(),
                    terms: vec![(*term).clone()],
                    n_levels: z_part.ncols(),
                    dim: 1,
                    cov: CovStructure::Diagonal,
                    col_offset,
                    theta_offset,
                    dim_names: vec![term.id()],
                }
            }
        };
        col_offset += block.n_cols();
        theta_offset += block.n_theta();
        blocks.push(block);
    }
    let q = col_offset;
    let z = if q < DENSE_Z_MAX_COLS {
        let mut m = DMatrix::zeros(n, q);
        for (i, j, v) in triplets {
            m[(i, j)] = v;
        }
        GroupMatrix::Dense(m)
    } else {
        GroupMatrix::Sparse(csc_from_triplets(n, q, triplets))
    };
    Ok(DesignMatrices {
        terms: terms.to_vec(),
        x,
        x_names,
        z,
        blocks,
    })
}

fn csc_from_triplets(nrows: usize, ncols: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix {
    t.sort_by_key(|&(i, j, _)| (j, i));
    let mut col_ptr = vec![0; ncols + 1];
    for &(_, j, _) in &t {
        col_ptr[j + 1] += 1;
    }
    for j in 0..ncols {
        col_ptr[j + 1] += col_ptr[j];
    }
    CscMatrix {
        nrows,
        ncols,
        col_ptr,
        row_idx: t.iter().map(|e| e.0).collect(),
        values: t.iter().map(|e| e.2).collect(),
    }
}

/// Validates that every term of `terms` can be built from `data`.
pub fn check_terms(data: &Dataset, terms: &[Term]) -> Result<()> {
    for t in terms {
        for v in t.variables() {
            data.column(v)?;
        }
        if let Some(f) = t.grouping_factor() {
            data.factor(f)?;
        }
        if let Term::Smooth { var } = t {
            data.continuous(var)?;
        }
    }
    if data.n_obs() == 0 {
        return Err(Error::Data("dataset has no rows".into()));
    }
    Ok(())
}
