//! Box-constrained Nelder–Mead used for the variance-component search.

#[derive(Clone, Debug, PartialEq)]
pub struct NelderMead {
    pub initial_step: f64,
    /// Absolute tolerance on the spread of objective values in the simplex.
    pub f_tol: f64,
    /// Tolerance on the simplex diameter (max coordinate distance to best).
    pub x_tol: f64,
    pub max_evals: usize,
}

impl NelderMead {
    /// Defaults for a problem of dimension `dim`: step 0.5, f-tolerance 1e-6,
    /// evaluation cap `200 * dim`.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            initial_step: 0.5,
            f_tol: 1e-6,
            x_tol: 1e-6,
            max_evals: 200 * dim.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimises `f` over the box `[lower, upper]`, projecting trial points onto
/// the box. Non-finite objective values are treated as +∞. After the first
/// convergence the simplex is rebuilt once around the best point, which
/// guards against premature collapse.
pub fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &NelderMead) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut start = x0.to_vec();
    clamp(&mut start, lower, upper);
    if n == 0 {
        let v = eval(&start, &mut evals);
        return Minimum {
            x: start,
            f: v,
            evals,
            converged: true,
        };
    }

    let mut best = (start.clone(), f64::INFINITY);
    let mut converged = false;
    for restart in 0..2 {
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let v0 = eval(&start, &mut evals);
        simplex.push((start.clone(), v0));
        for i in 0..n {
            let mut p = start.clone();
            let step = opts.initial_step * if restart == 0 { 1.0 } else { 0.2 };
            p[i] += step;
            if p[i] > upper[i] {
                p[i] = start[i] - step;
            }
            clamp(&mut p, lower, upper);
            if p == start {
                p[i] = (start[i] + step).min(upper[i]);
            }
            let v = eval(&p, &mut evals);
            simplex.push((p, v));
        }
        converged = false;
        while evals < opts.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            let diam = simplex[1..]
                .iter()
                .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (spread.is_finite() && spread <= opts.f_tol && diam <= opts.x_tol.max(opts.f_tol))
                || diam == 0.0
            {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for (p, _) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / n as f64;
                }
            }
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> {
                let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect();
                clamp(&mut p, lower, upper);
                p
            };
            let xr = along(1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(2.0);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst.1 {
                    let xc = along(0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = along(-0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < worst.1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let b = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let mut p: Vec<f64> = b.iter().zip(&item.0).map(|(a, c)| a + 0.5 * (c - a)).collect();
                        clamp(&mut p, lower, upper);
                        let v = eval(&p, &mut evals);
                        *item = (p, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let improved = best.1 - simplex[0].1;
        if simplex[0].1 < best.1 {
            best = simplex[0].clone();
        }
        if !converged || (restart == 1 && improved <= opts.f_tol) {
            break;
        }
        start = best.0.clone();
    }
    Minimum {
        x: best.0,
        f: best.1,
        evals,
        converged,
    }
}
