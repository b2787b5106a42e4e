//! Penalized B-spline bases and their mixed-model representation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Evaluated B-spline basis with a second-order difference penalty.
#[derive(Clone, Debug)]
pub struct SmoothBasis {
    pub variable: String,
    pub knots: Vec<f64>,
    pub order: usize,
    /// n_obs × K basis evaluations.
    pub basis: DMatrix<f64>,
    /// K × K penalty `DᵀD`.
    pub penalty: DMatrix<f64>,
    pub null_dim: usize,
}

impl SmoothBasis {
    pub fn n_basis(&self) -> usize {
        self.basis.ncols()
    }
}

/// Number of basis functions and spline order (4 = cubic) for `s()` terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SmoothSpec {
    pub n_basis: usize,
    pub order: usize,
}

impl Default for SmoothSpec {
    fn default() -> Self {
        Self {
            n_basis: 10,
            order: 4,
        }
    }
}

/// Cox–de Boor evaluation of all `n_basis` B-splines of the given order at
/// `x`, on equally spaced knots over `[min x, max x]` extended by `order - 1`
/// knots on each side.
pub fn bspline_basis(x: &[f64], n_basis: usize, order: usize) -> Result<SmoothBasis> {
    bspline_basis_named("", x, n_basis, order)
}

pub(crate) fn bspline_basis_named(
    variable: &str,
    x: &[f64],
    n_basis: usize,
    order: usize,
) -> Result<SmoothBasis> {
    if order < 1 || n_basis < order.max(3) {
        return Err(Error::Design(format!(
            "need n_basis >= order and >= 3, got n_basis={n_basis}, order={order}"
        )));
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Design(format!(
            "smooth over `{variable}` needs at least two distinct finite values"
        )));
    }
    let degree = order - 1;
    let segments = n_basis - degree;
    let dx = (hi - lo) / segments as f64;
    let knots: Vec<f64> = (0..n_basis + order)
        .map(|j| lo + dx * (j as f64 - degree as f64))
        .collect();
    let mut basis = DMatrix::zeros(x.len(), n_basis);
    for (i, &xi) in x.iter().enumerate() {
        // Locate the knot span, with the right end point in the last span.
        let span = (((xi - lo) / dx).floor() as isize).clamp(0, segments as isize - 1) as usize + degree;
        let row = de_boor_row(&knots, span, xi, order);
        for (k, v) in row.into_iter().enumerate() {
            basis[(i, span - degree + k)] = v;
        }
    }
    let diff = difference_matrix(n_basis, 2);
    let penalty = diff.transpose() * &diff;
    Ok(SmoothBasis {
        variable: variable.to_string(),
        knots,
        order,
        basis,
        penalty,
        null_dim: 2,
    })
}

/// Values of the `order` nonzero B-splines `span-degree ..= span` at `x`.
fn de_boor_row(knots: &[f64], span: usize, x: f64, order: usize) -> Vec<f64> {
    let mut n = vec![0.0; order];
    n[0] = 1.0;
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    for j in 1..order {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    n
}

/// `(k - d) × k` matrix of d-th order differences.
pub fn difference_matrix(k: usize, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::identity(k, k);
    for _ in 0..d {
        let r = m.nrows();
        m = DMatrix::from_fn(r - 1, k, |i, j| m[(i + 1, j)] - m[(i, j)]);
    }
    m
}

/// A smooth split into an unpenalized part (for X) and a penalized part with
/// identity penalty (for Z).
#[derive(Clone, Debug)]
pub struct MixedSmooth {
    /// Null-space columns other than the constant.
    pub x_part: DMatrix<f64>,
    pub z_part: DMatrix<f64>,
    /// K × (null_dim − 1) map from null-space coefficients to γ.
    pub null_map: DMatrix<f64>,
    /// K × (K − null_dim) map `U₊ Λ₊^{-1/2}` from penalized coordinates to γ.
    pub penalized_map: DMatrix<f64>,
}

/// Reparameterizes a penalized basis so the penalty becomes `‖u‖²`.
pub fn smooth_to_mixed(basis: &SmoothBasis) -> Result<MixedSmooth> {
    let k = basis.n_basis();
    let eig = SymmetricEigen::new(basis.penalty.clone());
    let max = eig.eigenvalues.amax();
    let tol = 1e-8 * max.max(f64::MIN_POSITIVE);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Numerical(format!("penalty is indefinite (eigenvalue {bad})")));
    }
    let mut null_cols = Vec::new();
    let mut pos = Vec::new();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() <= tol {
            null_cols.push(j);
        } else {
            pos.push((j, l));
        }
    }
    if null_cols.len() != basis.null_dim {
        return Err(Error::Numerical(format!(
            "penalty null space has dimension {}, expected {}",
            null_cols.len(),
            basis.null_dim
        )));
    }
    // B·1 = 1, so the constant direction is absorbed by the global intercept;
    // keep the null-space directions orthogonal to it.
    let ones = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for &j in &null_cols {
        let mut v = eig.eigenvectors.column(j).into_owned();
        v -= &ones * ones.dot(&v);
        for q in &kept {
            v -= q * q.dot(&v);
        }
        let n = v.norm();
        if n > 1e-8 {
            kept.push(v / n);
        }
    }
    kept.truncate(basis.null_dim - 1);
    let null_map = DMatrix::from_columns(&kept);
    // Sort penalized directions by eigenvalue for a stable column order.
    pos.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let penalized_map = DMatrix::from_columns(
        &pos.iter()
            .map(|&(j, l)| eig.eigenvectors.column(j) / l.sqrt())
            .collect::<Vec<_>>(),
    );
    Ok(MixedSmooth {
        x_part: &basis.basis * &null_map,
        z_part: &basis.basis * &penalized_map,
        null_map,
        penalized_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64 * 3.0 - 1.0).collect()
    }

    #[test]
    fn partition_of_unity() {
        let b = bspline_basis(&grid(50), 10, 4).unwrap();
        for row in b.basis.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn penalty_null_space_and_rank() {
        let b = bspline_basis(&grid(50), 10, 4).unwrap();
        let lin = DVector::from_fn(10, |k, _| 0.3 + 1.7 * k as f64);
        assert!((lin.transpose() * &b.penalty * &lin)[(0, 0)].abs() < 1e-10);
        let eig = SymmetricEigen::new(b.penalty.clone());
        let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-8 * eig.eigenvalues.amax()).count();
        assert_eq!(rank, 8);
        assert!((&b.penalty - b.penalty.transpose()).amax() == 0.0);
    }

    #[test]
    fn matches_direct_cox_de_boor_recursion() {
        // Textbook recursion on the same knots, evaluated independently.
        fn bspl(knots: &[f64], j: usize, m: usize, x: f64) -> f64 {
            if m == 1 {
                return if knots[j] <= x && x < knots[j + 1] { 1.0 } else { 0.0 };
            }
            let a = (x - knots[j]) / (knots[j + m - 1] - knots[j]);
            let b = (knots[j + m] - x) / (knots[j + m] - knots[j + 1]);
            a * bspl(knots, j, m - 1, x) + b * bspl(knots, j + 1, m - 1, x)
        }
        let x = [-1.0, -0.3, 0.0, 0.77, 1.5, 1.99];
        let b = bspline_basis(&x, 8, 4).unwrap();
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..8 {
                assert!((b.basis[(i, j)] - bspl(&b.knots, j, 4, xi)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_input_rejected() {
        assert!(bspline_basis(&[1.0, 1.0, 1.0], 10, 4).is_err());
        assert!(bspline_basis(&grid(10), 3, 4).is_err());
    }

    #[test]
    fn mixed_form_reproduces_fits_and_penalty() {
        let b = bspline_basis(&grid(50), 10, 4).unwrap();
        let m = smooth_to_mixed(&b).unwrap();
        assert_eq!(m.x_part.ncols(), 1);
        assert_eq!(m.z_part.ncols(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gamma = DVector::from_fn(10, |_, _| rng.random_range(-2.0..2.0));
            // Coordinates: intercept a, null-space c, penalized u.
            let u = m.penalized_map.transpose() * &b.penalty * &gamma;
            let pen = (gamma.transpose() * &b.penalty * &gamma)[(0, 0)];
            assert!((pen - u.norm_squared()).abs() < 1e-8 * pen.max(1.0));
            let resid = &gamma - &m.penalized_map * &u;
            let c = (m.null_map.transpose() * &resid)[(0, 0)];
            let a = resid.mean();
            let fit = &b.basis * &gamma;
            let re = m.x_part.column(0) * c + &m.z_part * &u + DVector::from_element(50, a);
            assert!((fit - re).amax() < 1e-8);
        }
    }
}
