//! Excess-risk certificates in fixed and random design, and the oracle
//! optimism quantities used to validate them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, PotentialKind};
use crate::complexity::{deviation_term, RadiusReport};
use crate::design::{CompactSet, PredictionMatrix};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::wildfit::{wild_optimism, WildRefitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    FixedDesign,
    RandomDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCertificate {
    pub training_error: f64,
    pub wild_optimism_abs: f64,
    pub pilot: f64,
    pub deviation: f64,
    pub stability_addend: f64,
    pub total: f64,
    pub delta: f64,
    pub failure_budget: f64,
    pub mode: DesignMode,
    pub provenance: BTreeMap<String, String>,
}

impl RiskCertificate {
    /// Recomputes the total from the stored components.
    pub fn assembled_total(&self) -> f64 {
        self.training_error
            + 2.0 * (self.wild_optimism_abs + self.pilot + self.deviation)
            + self.stability_addend
    }

    /// The intermediate optimism bound `|Opt~| + A_n + B_n`.
    pub fn optimism_bound(&self) -> f64 {
        self.wild_optimism_abs + self.pilot + self.deviation
    }
}

/// Plug-in choices for the terms that depend on unobservable quantities.
/// `None` means "not supplied": the pilot and misspecification terms then
/// default to 0 and `|w|_inf` to the largest residue, and the certificate
/// is marked as plug-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateInputs {
    pub delta: f64,
    pub pilot: Option<f64>,
    pub misspec: Option<f64>,
    pub w_inf: Option<f64>,
    /// True when the supplied values are exact oracle quantities.
    pub oracle: bool,
    /// Relative tolerance on the calibration precondition.
    pub calibration_tol: f64,
}

impl CertificateInputs {
    pub fn plug_in(delta: f64) -> Self {
        CertificateInputs {
            delta,
            pilot: None,
            misspec: None,
            w_inf: None,
            oracle: false,
            calibration_tol: 2e-3,
        }
    }
}

fn source(value: Option<f64>, oracle: bool, default: &str) -> String {
    match (value, oracle) {
        (Some(_), true) => "oracle".into(),
        (Some(_), false) => "supplied".into(),
        (None, _) => default.into(),
    }
}

pub fn fixed_design_certificate(
    loss: &BregmanLoss,
    refit: &WildRefitResult,
    radius: &RadiusReport,
    inputs: &CertificateInputs,
) -> Result<RiskCertificate> {
    let delta = inputs.delta;
    if !(delta > 0.0 && delta < 0.125) {
        return Err(Error::invalid(format!(
            "fixed-design certificate needs 0 < delta < 1/8, got {delta}"
        )));
    }
    for (name, v) in [("pilot", inputs.pilot), ("misspec", inputs.misspec), ("w_inf", inputs.w_inf)] {
        if let Some(v) = v {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
    }
    let wild_radius = refit.wild_radius(loss)?;
    let target = 3.0 * loss.c0() * radius.r_certified;
    if !((wild_radius - target).abs() <= inputs.calibration_tol * target) {
        return Err(Error::invalid(format!(
            "wild radius {wild_radius:.6e} does not match 3 sqrt(beta/alpha) r = {target:.6e}"
        )));
    }
    let training_error = refit.training_error(loss)?;
    let wild_optimism_abs = wild_optimism(loss, refit)?.abs();
    let pilot = inputs.pilot.unwrap_or(0.0);
    let misspec = inputs.misspec.unwrap_or(0.0);
    let w_inf = inputs.w_inf.unwrap_or_else(|| refit.residues.max_abs());
    let deviation = deviation_term(
        loss,
        misspec,
        radius.r_certified,
        w_inf,
        refit.n(),
        loss.dim(),
        delta,
    )?;

    let mut provenance = BTreeMap::new();
    let plug_in = !inputs.oracle || inputs.pilot.is_none() || inputs.misspec.is_none() || inputs.w_inf.is_none();
    provenance.insert("grade".into(), if plug_in { "plug_in" } else { "theorem" }.into());
    provenance.insert("pilot".into(), source(inputs.pilot, inputs.oracle, "default_zero"));
    provenance.insert("misspec".into(), source(inputs.misspec, inputs.oracle, "default_zero"));
    provenance.insert("w_inf".into(), source(inputs.w_inf, inputs.oracle, "max_abs_residue"));
    provenance.insert("radius_method".into(), radius.method.label().into());
    provenance.insert("deviation_t".into(), "sqrt(log(1/delta))".into());
    provenance.insert("clipping".into(), format!("{} rows", refit.clipped_rows));

    let mut cert = RiskCertificate {
        training_error,
        wild_optimism_abs,
        pilot,
        deviation,
        stability_addend: 0.0,
        total: 0.0,
        delta,
        failure_budget: 8.0 * delta,
        mode: DesignMode::FixedDesign,
        provenance,
    };
    cert.total = cert.assembled_total();
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    /// Upper bound on `D_phi` over the set.
    pub m: f64,
    /// Upper bound on `|grad phi|` over the set.
    pub l: f64,
    pub alpha: f64,
    /// `2 L^2 / (alpha (n - 1))`.
    pub eps_sta: f64,
}

impl StabilityConstants {
    pub fn new(m: f64, l: f64, alpha: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("stability constants need n >= 2"));
        }
        if !(m >= 0.0 && l >= 0.0 && alpha > 0.0) {
            return Err(Error::invalid("stability constants need M, L >= 0 and alpha > 0"));
        }
        Ok(StabilityConstants {
            m,
            l,
            alpha,
            eps_sta: 2.0 * l * l / (alpha * (n - 1) as f64),
        })
    }
}

fn vertices(set: &CompactSet) -> Vec<Vec<f64>> {
    match set {
        CompactSet::Box { lo, hi } => {
            let d = lo.len();
            (0..1usize << d)
                .map(|mask| (0..d).map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }).collect())
                .collect()
        }
        CompactSet::ClippedSimplex { dim, eta } => (0..*dim)
            .map(|k| {
                (0..*dim)
                    .map(|j| if j == k { 1.0 - (*dim as f64 - 1.0) * eta } else { *eta })
                    .collect()
            })
            .collect(),
    }
}

const GRID_POINTS: usize = 1001;

/// `M` and `L` for the built-in potentials on their natural sets.
///
/// Analytic where the geometry allows it (the squared loss everywhere,
/// vertex pairs for the jointly convex entropy divergence, endpoint
/// maxima for monotone coordinate gradients); a certified one-dimensional
/// grid for the separable `M` of the sqrt-Bernoulli potential.
pub fn stability_constants(loss: &BregmanLoss, set: &CompactSet, n: usize) -> Result<StabilityConstants> {
    set.check_compatible(loss)?;
    let alpha = loss.alpha();
    let (m, l) = match (loss.potential().kind(), set) {
        (PotentialKind::SquaredL2, _) => {
            // |u| and |x - y|^2 are convex, so both maxima sit at vertices.
            let vs = vertices(set);
            let l = vs.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max);
            let diam = set.diameter();
            (0.5 * diam * diam, l)
        }
        (PotentialKind::SqrtBernoulli { .. }, CompactSet::Box { lo, hi }) => {
            let mut m = 0.0;
            let mut l2 = 0.0;
            for j in 0..lo.len() {
                let (a, b) = (lo[j], hi[j]);
                // phi' is increasing, so |phi'| peaks at an endpoint.
                let ga = loss.potential().gradient_unchecked(&vec![a; 1])[0];
                let gb = loss.potential().gradient_unchecked(&vec![b; 1])[0];
                l2 += ga.abs().max(gb.abs()).powi(2);
                m += separable_m_1d(loss, a, b);
            }
            (m, l2.sqrt())
        }
        (PotentialKind::ClippedSimplexKl { .. }, CompactSet::ClippedSimplex { dim, eta }) => {
            // KL is jointly convex: its maximum over the polytope pair is at
            // a vertex pair. Each ln u_j + 1 lies in [ln eta + 1, ln top + 1].
            let vs = vertices(set);
            let mut m = 0.0f64;
            for x in &vs {
                for y in &vs {
                    m = m.max(loss.divergence_unchecked(x, y));
                }
            }
            let top = 1.0 - (*dim as f64 - 1.0) * eta;
            let per = (eta.ln() + 1.0).abs().max((top.ln() + 1.0).abs());
            (m, per * (*dim as f64).sqrt())
        }
        (kind, set) => {
            return Err(Error::Unsupported(format!(
                "no stability constants for {} on {set:?}",
                kind.name()
            )))
        }
    };
    StabilityConstants::new(m, l, alpha, n)
}

/// `max_{x, y in [a, b]} D(x, y)` for a one-dimensional coordinate of a
/// separable potential. `D(., y)` is convex so `x` is an endpoint; `y` is
/// scanned on a grid and the result inflated by the Lipschitz modulus
/// `beta (b - a)` times half the grid spacing.
fn separable_m_1d(loss: &BregmanLoss, a: f64, b: f64) -> f64 {
    let p = loss.potential();
    let beta = loss.beta();
    let h = (b - a) / (GRID_POINTS - 1) as f64;
    let d1 = |x: f64, y: f64| {
        p.value_unchecked(&[x]) - p.value_unchecked(&[y]) - p.gradient_unchecked(&[y])[0] * (x - y)
    };
    let mut best = 0.0f64;
    for k in 0..GRID_POINTS {
        let y = a + h * k as f64;
        best = best.max(d1(a, y)).max(d1(b, y));
    }
    best + beta * (b - a) * 0.5 * h
}

/// Grid-search `M` and `L` over a box of dimension at most 3, inflated to
/// certified upper bounds.
pub fn stability_constants_grid(loss: &BregmanLoss, set: &CompactSet, n: usize) -> Result<StabilityConstants> {
    set.check_compatible(loss)?;
    let (lo, hi) = match set {
        CompactSet::Box { lo, hi } if lo.len() <= 3 => (lo, hi),
        _ => {
            return Err(Error::Unsupported(
                "grid stability constants need a box of dimension at most 3".into(),
            ))
        }
    };
    let d = lo.len();
    // Keep the grid near 5e5 points in three dimensions.
    let per_axis = GRID_POINTS.min((5e5f64).powf(1.0 / d as f64) as usize).max(2);
    let steps: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / (per_axis - 1) as f64).collect();
    let corners = vertices(set);
    let beta = loss.beta();
    let diam = set.diameter();
    let mut m = 0.0f64;
    let mut l = 0.0f64;
    let mut idx = vec![0usize; d];
    let mut y = vec![0.0; d];
    loop {
        for j in 0..d {
            y[j] = lo[j] + steps[j] * idx[j] as f64;
        }
        let g = loss.potential().gradient_unchecked(&y);
        l = l.max(dot(&g, &g).sqrt());
        for x in &corners {
            m = m.max(loss.divergence_unchecked(x, &y));
        }
        let mut j = 0;
        while j < d {
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == d {
            break;
        }
    }
    let half_diag = 0.5 * steps.iter().map(|s| s * s).sum::<f64>().sqrt();
    StabilityConstants::new(m + beta * diam * half_diag, l + beta * half_diag, loss.alpha(), n)
}

/// `sqrt((M^2 + 36 M L^2 / alpha) / (2 n delta)) + M sqrt(log(2/delta) / (2n))`.
pub fn random_design_addend(consts: &StabilityConstants, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0 / 11.0) || n == 0 {
        return Err(Error::invalid(format!(
            "random-design terms need n > 0 and 0 < delta < 1/11, got n = {n}, delta = {delta}"
        )));
    }
    let (m, l, a) = (consts.m, consts.l, consts.alpha);
    let nf = n as f64;
    Ok(((m * m + 36.0 * m * l * l / a) / (2.0 * nf * delta)).sqrt()
        + m * ((2.0 / delta).ln() / (2.0 * nf)).sqrt())
}

pub fn random_design_certificate(
    fixed: &RiskCertificate,
    consts: &StabilityConstants,
    n: usize,
    delta: f64,
) -> Result<RiskCertificate> {
    if fixed.mode != DesignMode::FixedDesign {
        return Err(Error::invalid("random-design certificate extends a fixed-design one"));
    }
    let addend = random_design_addend(consts, n, delta)?;
    let mut cert = fixed.clone();
    cert.stability_addend = addend;
    cert.total = fixed.total + addend;
    cert.delta = delta;
    cert.failure_budget = 11.0 * delta;
    cert.mode = DesignMode::RandomDesign;
    cert.provenance.insert("iid_sampling".into(), "assumed, not verified".into());
    cert.provenance.insert("stability_m".into(), format!("{:e}", consts.m));
    cert.provenance.insert("stability_l".into(), format!("{:e}", consts.l));
    Ok(cert)
}

fn optimism(loss: &BregmanLoss, fhat: &PredictionMatrix, anchor: &Matrix, noise: &Matrix) -> Result<f64> {
    fhat.values().ensure_same_shape(anchor)?;
    fhat.values().ensure_same_shape(noise)?;
    let n = noise.nrows();
    if n == 0 {
        return Err(Error::invalid("optimism needs at least one row"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let g = loss.grad1_divergence(anchor.row(i), fhat.row(i))?;
        total += dot(&g, noise.row(i));
    }
    Ok(total / n as f64)
}

/// `(1/n) sum <grad phi(f*_i) - grad phi(fhat_i), w_i>`.
pub fn true_optimism_oracle(
    loss: &BregmanLoss,
    fhat: &PredictionMatrix,
    fstar_preds: &Matrix,
    noise: &Matrix,
) -> Result<f64> {
    optimism(loss, fhat, fstar_preds, noise)
}

/// As [`true_optimism_oracle`] with the noiseless fit as anchor.
pub fn dagger_optimism_oracle(
    loss: &BregmanLoss,
    fhat: &PredictionMatrix,
    fdagger_preds: &Matrix,
    noise: &Matrix,
) -> Result<f64> {
    optimism(loss, fhat, fdagger_preds, noise)
}
