//! Exponential-family observation models with canonical links.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Linear predictors are clamped to this magnitude before `exp`/logistic.
pub const ETA_CLAMP: f64 = 30.0;

/// Working weights below this are floored.
pub const MIN_WEIGHT: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// Working response and weight of one observation for an IRLS step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoData {
    pub z: f64,
    pub w: f64,
    /// The raw weight underflowed and was floored at [`MIN_WEIGHT`].
    pub floored: bool,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    /// Only the Gaussian model carries a free dispersion; the others fix it at 1.
    pub fn has_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    fn clamp_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            _ => eta.clamp(-ETA_CLAMP, ETA_CLAMP),
        }
    }

    /// Inverse link.
    pub fn mean(self, eta: f64) -> f64 {
        let eta = self.clamp_eta(eta);
        match self {
            Family::Gaussian => eta,
            Family::Bernoulli => 1.0 / (1.0 + (-eta).exp()),
            Family::Poisson => eta.exp(),
        }
    }

    /// Link function. Means on the boundary of the domain map to `±ETA_CLAMP`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Bernoulli => {
                let lo = self.mean(-ETA_CLAMP);
                let m = mu.clamp(lo, 1.0 - lo);
                (m / (1.0 - m)).ln()
            }
            Family::Poisson => mu.max(self.mean(-ETA_CLAMP)).ln(),
        }
    }

    /// dμ/dη at `eta`.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => {
                let mu = self.mean(eta);
                mu * (1.0 - mu)
            }
            Family::Poisson => self.mean(eta),
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    /// Natural parameter ξ(μ); equal to the link for canonical links.
    pub fn natural_param(self, mu: f64) -> f64 {
        self.link(mu)
    }

    /// Cumulant function B(ξ), with B'(ξ(μ)) = μ.
    pub fn cumulant(self, xi: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * xi * xi,
            Family::Bernoulli => {
                if xi > 0.0 {
                    xi + (-xi).exp().ln_1p()
                } else {
                    xi.exp().ln_1p()
                }
            }
            Family::Poisson => xi.exp(),
        }
    }

    /// Whether `mu` lies in the mean domain.
    pub fn valid_mean(self, mu: f64) -> bool {
        match self {
            Family::Gaussian => mu.is_finite(),
            Family::Bernoulli => mu > 0.0 && mu < 1.0,
            Family::Poisson => mu > 0.0 && mu.is_finite(),
        }
    }

    /// Whether `y` is an admissible (possibly soft) response.
    pub fn valid_response(self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Bernoulli => (0.0..=1.0).contains(&y),
            Family::Poisson => y >= 0.0 && y.is_finite(),
        }
    }

    /// Starting mean for iterative fits, pulled into the interior of the domain.
    pub fn initial_mean(self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Bernoulli => (y + 0.5) / 2.0,
            Family::Poisson => y + 0.1,
        }
    }

    /// Log density (mass) of `y` given mean `mu`. `phi` is the Gaussian
    /// standard deviation and ignored otherwise. Bernoulli accepts y in [0, 1].
    pub fn log_lik(self, y: f64, mu: f64, phi: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let r = (y - mu) / phi;
                -0.5 * LN_2PI - phi.ln() - 0.5 * r * r
            }
            Family::Bernoulli => xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu),
            Family::Poisson => xlogy(y, mu) - mu - ln_gamma(y + 1.0),
        }
    }

    /// Checked version of [`Family::log_lik`] over a vector.
    pub fn log_lik_all(self, y: &[f64], mu: &[f64], phi: f64) -> Result<Vec<f64>> {
        if y.len() != mu.len() {
            return Err(Error::Data(format!(
                "response has {} entries but mean has {}",
                y.len(),
                mu.len()
            )));
        }
        if self.has_dispersion() && !(phi > 0.0) {
            return Err(Error::Data(format!("dispersion must be positive, got {phi}")));
        }
        y.iter()
            .zip(mu)
            .enumerate()
            .map(|(i, (&yi, &mi))| {
                if !self.valid_response(yi) {
                    return Err(Error::Data(format!(
                        "observation {i}: response {yi} outside the {} domain",
                        self.name()
                    )));
                }
                if !self.valid_mean(mi) {
                    return Err(Error::Data(format!(
                        "observation {i}: mean {mi} outside the {} domain",
                        self.name()
                    )));
                }
                Ok(self.log_lik(yi, mi, phi))
            })
            .collect()
    }

    /// Unit deviance 2·(ℓ(y; y) − ℓ(y; μ)) with unit dispersion.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Bernoulli => {
                2.0 * (xlogy(y, y) - xlogy(y, mu) + xlogy(1.0 - y, 1.0 - y)
                    - xlogy(1.0 - y, 1.0 - mu))
            }
            Family::Poisson => 2.0 * (xlogy(y, y) - xlogy(y, mu) - (y - mu)),
        }
    }

    /// Working response and weight from a second-order expansion of the
    /// log-likelihood at `eta`.
    pub fn pseudo_data(self, y: f64, eta: f64) -> PseudoData {
        let eta = self.clamp_eta(eta);
        let mu = self.mean(eta);
        let d = self.mu_eta(eta);
        let raw = d * d / self.variance(mu);
        let floored = !(raw >= MIN_WEIGHT);
        let w = if floored { MIN_WEIGHT } else { raw };
        let d = d.max(MIN_WEIGHT);
        PseudoData {
            z: eta + (y - mu) / d,
            w,
            floored,
        }
    }

    /// KL divergence between two predictive distributions of one observation,
    /// from the one with mean `mu_ref` (sd `phi_ref`) to the one with mean
    /// `mu_proj` (sd `phi_proj`). Dispersions are ignored without dispersion.
    pub fn kl(self, mu_ref: f64, mu_proj: f64, phi_ref: f64, phi_proj: f64) -> f64 {
        match self {
            Family::Gaussian => {
                let r = phi_ref * phi_ref / (phi_proj * phi_proj);
                let m = (mu_ref - mu_proj) * (mu_ref - mu_proj) / (phi_proj * phi_proj);
                0.5 * (r - 1.0 - r.ln() + m)
            }
            Family::Bernoulli => {
                xlogy(mu_ref, mu_ref) - xlogy(mu_ref, mu_proj) + xlogy(1.0 - mu_ref, 1.0 - mu_ref)
                    - xlogy(1.0 - mu_ref, 1.0 - mu_proj)
            }
            Family::Poisson => {
                xlogy(mu_ref, mu_ref) - xlogy(mu_ref, mu_proj) - mu_ref + mu_proj
            }
        }
    }
}

/// x·ln(y) with the convention 0·ln(0) = 0.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}
