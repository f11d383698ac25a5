//! Convex potentials and the Bregman losses they generate.
//!
//! Every built-in potential is coordinate-separable, so its Hessian is
//! diagonal. The curvature constants `(alpha, beta)` are certified only on the
//! declared [`Domain`]; evaluation outside it is refused.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::dot;

/// Slack used when testing domain membership of computed points.
pub const DOMAIN_TOL: f64 = 1e-10;

/// Built-in potential families, named in config files by `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    /// `phi(u) = |u|^2 / 2`.
    SquaredL2,
    /// `phi(p) = sum_j -sqrt(p_j) - sqrt(1 - p_j)` on `[eps0, 1 - eps0]^d`.
    SqrtBernoulli { eps0: f64 },
    /// Negative entropy `sum_j p_j ln p_j` on the simplex clipped at `eta0`.
    ClippedSimplexKl { eta0: f64 },
}

impl PotentialKind {
    pub fn name(&self) -> &'static str {
        match self {
            PotentialKind::SquaredL2 => "squared_l2",
            PotentialKind::SqrtBernoulli { .. } => "sqrt_bernoulli",
            PotentialKind::ClippedSimplexKl { .. } => "clipped_simplex_kl",
        }
    }
}

/// Region on which a potential's curvature constants hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    Unbounded,
    /// The same interval `[lo, hi]` in every coordinate.
    Box { lo: f64, hi: f64 },
    /// `{p : p_j >= eta, sum_j p_j = 1}`.
    ClippedSimplex { eta: f64 },
}

impl Domain {
    pub fn contains(&self, u: &[f64]) -> bool {
        match *self {
            Domain::Unbounded => u.iter().all(|v| v.is_finite()),
            Domain::Box { lo, hi } => u
                .iter()
                .all(|&v| v >= lo - DOMAIN_TOL && v <= hi + DOMAIN_TOL),
            Domain::ClippedSimplex { eta } => {
                let sum: f64 = u.iter().sum();
                (sum - 1.0).abs() <= 1e3 * DOMAIN_TOL
                    && u.iter().all(|&v| v >= eta - DOMAIN_TOL)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    kind: PotentialKind,
    dim: usize,
    alpha: f64,
    beta: f64,
    domain: Domain,
}

impl Potential {
    pub fn builtin(kind: PotentialKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("potential dimension must be at least 1"));
        }
        let (alpha, beta, domain) = match kind {
            PotentialKind::SquaredL2 => (1.0, 1.0, Domain::Unbounded),
            PotentialKind::SqrtBernoulli { eps0 } => {
                if !(eps0 > 0.0 && eps0 < 0.5) {
                    return Err(Error::invalid(format!(
                        "sqrt_bernoulli requires 0 < eps0 < 0.5, got {eps0}"
                    )));
                }
                // phi'' = (p^{-3/2} + (1-p)^{-3/2}) / 4 is minimised at p = 1/2
                // and bounded by eps0^{-3/2} / 2 on the clipped interval.
                (
                    2f64.sqrt(),
                    1.0 / (2.0 * eps0.powf(1.5)),
                    Domain::Box {
                        lo: eps0,
                        hi: 1.0 - eps0,
                    },
                )
            }
            PotentialKind::ClippedSimplexKl { eta0 } => {
                if dim < 2 {
                    return Err(Error::invalid("clipped_simplex_kl requires dim >= 2"));
                }
                if !(eta0 > 0.0 && eta0 < 1.0 / dim as f64) {
                    return Err(Error::invalid(format!(
                        "clipped_simplex_kl requires 0 < eta0 < 1/d, got {eta0} with d = {dim}"
                    )));
                }
                // Hessian diag(1/p_j) with eta0 <= p_j <= 1.
                (1.0, 1.0 / eta0, Domain::ClippedSimplex { eta: eta0 })
            }
        };
        Ok(Potential {
            kind,
            dim,
            alpha,
            beta,
            domain,
        })
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn check_domain(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::invalid(format!(
                "expected a {}-vector, got length {}",
                self.dim,
                u.len()
            )));
        }
        if !self.domain.contains(u) {
            return Err(Error::Domain(format!(
                "{:?} is outside the {} domain {:?}",
                u,
                self.kind.name(),
                self.domain
            )));
        }
        Ok(())
    }

    pub fn value(&self, u: &[f64]) -> Result<f64> {
        self.check_domain(u)?;
        Ok(self.value_unchecked(u))
    }

    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(u)?;
        Ok(self.gradient_unchecked(u))
    }

    /// Diagonal of the Hessian at `u`.
    pub fn hessian_diag(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(u)?;
        Ok(u.iter().map(|&v| self.second_derivative(v)).collect())
    }

    pub(crate) fn value_unchecked(&self, u: &[f64]) -> f64 {
        match self.kind {
            PotentialKind::SquaredL2 => 0.5 * dot(u, u),
            PotentialKind::SqrtBernoulli { .. } => {
                u.iter().map(|&p| -p.sqrt() - (1.0 - p).sqrt()).sum()
            }
            PotentialKind::ClippedSimplexKl { .. } => u.iter().map(|&p| p * p.ln()).sum(),
        }
    }

    pub(crate) fn gradient_unchecked(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&v| self.first_derivative(v)).collect()
    }

    fn first_derivative(&self, v: f64) -> f64 {
        match self.kind {
            PotentialKind::SquaredL2 => v,
            PotentialKind::SqrtBernoulli { .. } => {
                -0.5 / v.sqrt() + 0.5 / (1.0 - v).sqrt()
            }
            PotentialKind::ClippedSimplexKl { .. } => v.ln() + 1.0,
        }
    }

    fn second_derivative(&self, v: f64) -> f64 {
        match self.kind {
            PotentialKind::SquaredL2 => 1.0,
            PotentialKind::SqrtBernoulli { .. } => {
                0.25 * (v.powf(-1.5) + (1.0 - v).powf(-1.5))
            }
            PotentialKind::ClippedSimplexKl { .. } => 1.0 / v,
        }
    }

    /// Nearest point of the domain (Euclidean), used to keep wild responses
    /// well-posed for restricted potentials.
    pub fn project_to_domain(&self, u: &[f64]) -> Vec<f64> {
        match self.domain {
            Domain::Unbounded => u.to_vec(),
            Domain::Box { lo, hi } => u.iter().map(|v| v.clamp(lo, hi)).collect(),
            Domain::ClippedSimplex { eta } => crate::design::project_clipped_simplex(u, eta),
        }
    }
}

/// The loss `l(x, y) = D_phi(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BregmanLoss {
    potential: Potential,
    c0: f64,
}

impl BregmanLoss {
    pub fn new(potential: Potential) -> Self {
        let c0 = (potential.beta / potential.alpha).sqrt();
        BregmanLoss { potential, c0 }
    }

    pub fn builtin(kind: PotentialKind, dim: usize) -> Result<Self> {
        Ok(Self::new(Potential::builtin(kind, dim)?))
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn alpha(&self) -> f64 {
        self.potential.alpha
    }

    pub fn beta(&self) -> f64 {
        self.potential.beta
    }

    /// Quasi-triangle constant `sqrt(beta / alpha)`.
    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn dim(&self) -> usize {
        self.potential.dim
    }

    /// `phi(x) - phi(y) - <grad phi(y), x - y>`, clamped at zero against
    /// round-off.
    pub fn divergence(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.potential.check_domain(x)?;
        self.potential.check_domain(y)?;
        Ok(self.divergence_unchecked(x, y))
    }

    pub(crate) fn divergence_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = &self.potential;
        let grad_y = p.gradient_unchecked(y);
        let lin: f64 = grad_y
            .iter()
            .zip(x.iter().zip(y))
            .map(|(g, (a, b))| g * (a - b))
            .sum();
        (p.value_unchecked(x) - p.value_unchecked(y) - lin).max(0.0)
    }

    /// Gradient in the first argument: `grad phi(x) - grad phi(y)`.
    pub fn grad1_divergence(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.potential.check_domain(x)?;
        self.potential.check_domain(y)?;
        Ok(self.grad1_unchecked(x, y))
    }

    pub(crate) fn grad1_unchecked(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let p = &self.potential;
        x.iter()
            .zip(y)
            .map(|(&a, &b)| p.first_derivative(a) - p.first_derivative(b))
            .collect()
    }

    /// Gradient in the second argument: `H(y) (y - x)`.
    pub(crate) fn grad2_unchecked(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let p = &self.potential;
        x.iter()
            .zip(y)
            .map(|(&a, &b)| p.second_derivative(b) * (b - a))
            .collect()
    }
}
