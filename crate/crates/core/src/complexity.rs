//! Local empirical-process quantities around a fitted predictor, and the
//! radius solvers built on them.
//!
//! Every complexity here is a value of
//! `sup { (1/n) sum_i <grad phi(c_i) - grad phi(u_i), z_i> : u_i in C, L_n(c, U) <= r^2 }`
//! for some centre `c` and multiplier matrix `Z`. The solver works on the
//! Lagrangian: for a multiplier `1/t` the per-row problem
//! `max_u -<grad phi(u), z> - D(c, u) / t` has an exact maximiser (clamping
//! `c - t z` for separable potentials on boxes, Euclidean projection for the
//! squared loss, water-filling for the entropy on the clipped simplex), and
//! the constraint value is nondecreasing in `t`. Bisection on `t` then gives
//! a feasible value together with a weak-duality upper bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, PotentialKind};
use crate::design::{CompactSet, PredictionMatrix, SignMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative duality gap below which a solution is reported as stationary.
const GAP_TOL: f64 = 1e-6;
const MAX_BISECT: usize = 200;
const MAX_DOUBLINGS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WnSolution {
    /// Objective at a feasible point: a lower bound on the supremum.
    pub value: f64,
    /// Weak-duality upper bound on the supremum.
    pub upper: f64,
    /// `L_n(c, U)` at the returned point.
    pub constraint: f64,
    /// Multiplier `t = 1/lambda` of the returned point (infinite when the
    /// ball constraint is slack).
    pub t: f64,
    /// True when `upper - value` is within the solver tolerance.
    pub stationary: bool,
}

/// The map `r -> sup` for a fixed centre and multiplier matrix.
#[derive(Debug, Clone)]
pub struct WildNoiseComplexity<'a> {
    loss: &'a BregmanLoss,
    set: &'a CompactSet,
    center: Matrix,
    z: Matrix,
    center_grad: Matrix,
}

impl<'a> WildNoiseComplexity<'a> {
    pub fn new(
        loss: &'a BregmanLoss,
        set: &'a CompactSet,
        center: &PredictionMatrix,
        z: &Matrix,
    ) -> Result<Self> {
        set.check_compatible(loss)?;
        center.values().ensure_same_shape(z)?;
        if center.d() != loss.dim() {
            return Err(Error::invalid("centre dimension does not match the loss"));
        }
        if !z.is_finite() {
            return Err(Error::invalid("multiplier matrix has non-finite entries"));
        }
        for row in center.values().rows_iter() {
            if !set.contains(row) {
                return Err(Error::Domain(format!("centre row {row:?} is outside the set")));
            }
        }
        let center = center.values().clone();
        let mut center_grad = Matrix::zeros(center.nrows(), center.ncols());
        for i in 0..center.nrows() {
            let g = loss.potential().gradient_unchecked(center.row(i));
            center_grad.row_mut(i).copy_from_slice(&g);
        }
        Ok(WildNoiseComplexity {
            loss,
            set,
            center,
            z: z.clone(),
            center_grad,
        })
    }

    pub fn n(&self) -> usize {
        self.center.nrows()
    }

    pub fn multipliers(&self) -> &Matrix {
        &self.z
    }

    /// Feasible value of the supremum at radius `r`.
    pub fn eval(&self, r: f64) -> Result<f64> {
        Ok(self.solve(r)?.value)
    }

    pub fn solve(&self, r: f64) -> Result<WnSolution> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::invalid(format!("radius must be finite and >= 0, got {r}")));
        }
        let zero = WnSolution {
            value: 0.0,
            upper: 0.0,
            constraint: 0.0,
            t: 0.0,
            stationary: true,
        };
        if r == 0.0 || self.z.max_abs() == 0.0 || self.n() == 0 {
            return Ok(zero);
        }
        let r2 = r * r;
        let nf = self.n() as f64;
        // Exact for the squared loss when the ball stays inside the set.
        let mut t = r * (2.0 * nf).sqrt() / self.z.frobenius_norm();
        let mut at = self.lagrangian_point(t);

        let (mut lo, mut hi);
        if at.0 <= r2 {
            lo = (t, at);
            let mut doublings = 0;
            loop {
                let next_t = 2.0 * t;
                let next = self.lagrangian_point(next_t);
                if next.0 > r2 {
                    hi = (next_t, next);
                    break;
                }
                // The maximiser no longer moves: the ball constraint is slack.
                let settled = (next.1 - lo.1 .1).abs() <= 1e-14 * next.1.abs();
                if settled || doublings >= MAX_DOUBLINGS {
                    return Ok(WnSolution {
                        value: next.1,
                        upper: next.1,
                        constraint: next.0,
                        t: f64::INFINITY,
                        stationary: settled,
                    });
                }
                t = next_t;
                lo = (t, next);
                doublings += 1;
            }
        } else {
            hi = (t, at);
            loop {
                t *= 0.5;
                at = self.lagrangian_point(t);
                if at.0 <= r2 {
                    lo = (t, at);
                    break;
                }
                hi = (t, at);
                if t < f64::MIN_POSITIVE {
                    return Ok(zero);
                }
            }
        }
        for _ in 0..MAX_BISECT {
            if hi.0 - lo.0 <= 1e-15 * hi.0 {
                break;
            }
            let mid = 0.5 * (lo.0 + hi.0);
            let p = self.lagrangian_point(mid);
            if p.0 <= r2 {
                lo = (mid, p);
            } else {
                hi = (mid, p);
            }
        }
        let (t_lo, (c_lo, g_lo)) = lo;
        let (t_hi, (c_hi, g_hi)) = hi;
        let dual_lo = g_lo - (c_lo - r2) / t_lo;
        let dual_hi = g_hi - (c_hi - r2) / t_hi;
        let upper = dual_lo.min(dual_hi).max(g_lo);
        Ok(WnSolution {
            value: g_lo,
            upper,
            constraint: c_lo,
            t: t_lo,
            stationary: upper - g_lo <= GAP_TOL * g_lo.abs().max(1e-300),
        })
    }

    /// Returns `(L_n(c, U(t)), objective(U(t)))` for the Lagrangian maximiser.
    fn lagrangian_point(&self, t: f64) -> (f64, f64) {
        let mut c_sum = 0.0;
        let mut g_sum = 0.0;
        let mut u = vec![0.0; self.center.ncols()];
        for i in 0..self.n() {
            let c = self.center.row(i);
            let z = self.z.row(i);
            self.row_maximiser(c, z, t, &mut u);
            c_sum += self.loss.divergence_unchecked(c, &u);
            let gu = self.loss.potential().gradient_unchecked(&u);
            let cg = self.center_grad.row(i);
            g_sum += cg.iter().zip(&gu).zip(z).map(|((a, b), zz)| (a - b) * zz).sum::<f64>();
        }
        let nf = self.n() as f64;
        (c_sum / nf, g_sum / nf)
    }

    fn row_maximiser(&self, c: &[f64], z: &[f64], t: f64, out: &mut [f64]) {
        let a: Vec<f64> = c.iter().zip(z).map(|(c, z)| c - t * z).collect();
        match (self.set, self.loss.potential().kind()) {
            (CompactSet::Box { lo, hi }, _) => {
                for (j, v) in out.iter_mut().enumerate() {
                    *v = a[j].clamp(lo[j], hi[j]);
                }
            }
            (CompactSet::ClippedSimplex { eta, .. }, PotentialKind::ClippedSimplexKl { .. }) => {
                entropy_water_fill(&a, *eta, out);
            }
            (set @ CompactSet::ClippedSimplex { .. }, _) => {
                out.copy_from_slice(&set.project(&a));
            }
        }
    }

    /// A radius beyond which the ball covers the whole set, so the map is
    /// constant from there on.
    pub fn radius_cap(&self) -> f64 {
        let diam = self.set.diameter();
        (0.5 * self.loss.beta()).sqrt() * diam
    }
}

/// Maximises `sum_j a_j ln u_j` over `{u_j >= eta, sum u_j = 1}`.
///
/// Coordinates with `a_j <= 0` sit at the floor; the rest follow
/// `u_j = max(eta, a_j / mu)`. With no positive coordinate the objective is
/// convex and the best vertex wins.
fn entropy_water_fill(a: &[f64], eta: f64, out: &mut [f64]) {
    let d = a.len();
    let positive: Vec<usize> = (0..d).filter(|&j| a[j] > 0.0).collect();
    if positive.is_empty() {
        let top = 1.0 - (d as f64 - 1.0) * eta;
        let score = |k: usize| {
            (0..d)
                .map(|j| a[j] * if j == k { top } else { eta }.ln())
                .sum::<f64>()
        };
        let best = (0..d)
            .max_by(|&x, &y| score(x).total_cmp(&score(y)).then(y.cmp(&x)))
            .unwrap_or(0);
        for (j, v) in out.iter_mut().enumerate() {
            *v = if j == best { top } else { eta };
        }
        return;
    }
    let mass = 1.0 - (d - positive.len()) as f64 * eta;
    // Active set: coordinates pinned at eta among the positive ones, found
    // by raising the pinned group in order of increasing a_j.
    let mut order = positive.clone();
    order.sort_by(|&x, &y| a[x].total_cmp(&a[y]));
    let mut pinned = 0;
    let mut mu;
    loop {
        let free_sum: f64 = order[pinned..].iter().map(|&j| a[j]).sum();
        let free_mass = mass - pinned as f64 * eta;
        mu = free_sum / free_mass;
        if pinned < order.len() && a[order[pinned]] / mu < eta {
            pinned += 1;
            continue;
        }
        break;
    }
    for v in out.iter_mut() {
        *v = eta;
    }
    for (k, &j) in order.iter().enumerate() {
        out[j] = if k < pinned { eta } else { a[j] / mu };
    }
}

/// The wild noise complexity at radius `r`, centred at `fhat` with
/// multipliers `Z = eps ⊙ residues`.
pub fn wn(
    loss: &BregmanLoss,
    set: &CompactSet,
    fhat: &PredictionMatrix,
    z: &Matrix,
    r: f64,
) -> Result<WnSolution> {
    WildNoiseComplexity::new(loss, set, fhat, z)?.solve(r)
}

/// The same supremum with the true noise in place of the residues.
pub fn wn_tilde_oracle(
    loss: &BregmanLoss,
    set: &CompactSet,
    fhat: &PredictionMatrix,
    noise: &Matrix,
    eps: &SignMatrix,
    r: f64,
) -> Result<WnSolution> {
    wn(loss, set, fhat, &eps.apply(noise)?, r)
}

/// Centred at the noiseless fit; all-ones signs give the unsymmetrised
/// process.
pub fn zn_eps_oracle(
    loss: &BregmanLoss,
    set: &CompactSet,
    fdagger: &PredictionMatrix,
    noise: &Matrix,
    eps: &SignMatrix,
    r: f64,
) -> Result<WnSolution> {
    wn(loss, set, fdagger, &eps.apply(noise)?, r)
}

/// Pilot error: the supremum at radius `3 sqrt(beta/alpha) r` with
/// multipliers `eps ⊙ (fhat - fstar)`.
pub fn pilot_error_oracle(
    loss: &BregmanLoss,
    set: &CompactSet,
    fhat: &PredictionMatrix,
    fstar_preds: &Matrix,
    eps: &SignMatrix,
    r: f64,
) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::invalid(format!("radius must be >= 0, got {r}")));
    }
    let gap = fhat.values().sub(fstar_preds)?;
    let z = eps.apply(&gap)?;
    Ok(wn(loss, set, fhat, &z, 3.0 * loss.c0() * r)?.value)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn check_small_delta(delta: f64) -> Result<()> {
    check_delta(delta)?;
    if delta > (-9f64).exp() * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "radius bounds need delta <= e^-9, got {delta}"
        )));
    }
    Ok(())
}

/// `B_n = (misspec + 5 r) 2 |w|_inf (beta^1.5 ∨ beta^2) sqrt(d) t / ((alpha^1.5 ∧ alpha) sqrt(n))`
/// with `t = sqrt(log(1/delta))`.
pub fn deviation_term(
    loss: &BregmanLoss,
    misspec: f64,
    r: f64,
    w_inf: f64,
    n: usize,
    d: usize,
    delta: f64,
) -> Result<f64> {
    check_delta(delta)?;
    if !(misspec >= 0.0 && r >= 0.0 && w_inf >= 0.0) || n == 0 {
        return Err(Error::invalid("deviation term needs misspec, r, w_inf >= 0 and n > 0"));
    }
    let (a, b) = (loss.alpha(), loss.beta());
    let t = (1.0 / delta).ln().sqrt();
    let num = (misspec + 5.0 * r) * 2.0 * w_inf * b.powf(1.5).max(b * b) * (d as f64).sqrt() * t;
    Ok(num / (a.powf(1.5).min(a) * (n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub grid_ratio: f64,
    pub rel_tol: f64,
    pub r_max: f64,
}

impl FixedPointOptions {
    pub fn with_cap(r_max: f64) -> Self {
        FixedPointOptions {
            grid_ratio: 1.1,
            rel_tol: 1e-4,
            r_max,
        }
    }
}

/// Smallest `r` on a geometric grid (refined by bisection) with
/// `r^2 >= W((2 + 1/log(1/delta)) r)`.
pub fn fixed_point_radius<F>(wn_eval: F, delta: f64, n: usize, opts: &FixedPointOptions) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    check_small_delta(delta)?;
    if n == 0 || !(opts.grid_ratio > 1.0) || !(opts.rel_tol > 0.0) {
        return Err(Error::invalid("fixed point search needs n > 0, ratio > 1, tol > 0"));
    }
    let log_inv = (1.0 / delta).ln();
    let scale = 2.0 + 1.0 / log_inv;
    let r_min = log_inv / (n as f64).sqrt();
    let mut trace = Vec::new();
    let passes = |r: f64, trace: &mut Vec<(f64, f64, f64)>| -> Result<bool> {
        let w = wn_eval(scale * r)?;
        trace.push((r, w, r * r));
        Ok(r * r >= w)
    };
    if passes(r_min, &mut trace)? {
        return Ok(r_min);
    }
    let r_max = opts.r_max.max(r_min);
    let mut fail = r_min;
    let mut r = r_min;
    let pass = loop {
        r *= opts.grid_ratio;
        if r > r_max * opts.grid_ratio {
            return Err(Error::UnboundedRadius { r_max, trace });
        }
        if passes(r, &mut trace)? {
            break r;
        }
        fail = r;
    };
    let (mut lo, mut hi) = (fail, pass);
    while hi - lo > opts.rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if passes(mid, &mut trace)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Inputs of the convex-class bound besides the complexity map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexBoundInputs {
    pub r_diamond: f64,
    pub delta: f64,
    pub n: usize,
    pub d: usize,
    pub w_inf: f64,
    pub pilot: f64,
}

/// Right-hand side of the self-bounding inequality for the convex class,
/// as a function of the candidate radius.
pub fn convex_bound_rhs<F>(loss: &BregmanLoss, wn_eval: &F, inp: &ConvexBoundInputs, r: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let log_inv = (1.0 / inp.delta).ln();
    let scale = loss.c0() * (2.0 + 1.0 / log_inv.sqrt());
    let k = convex_bound_slope(loss, inp);
    let w = if r > 0.0 { r / inp.r_diamond * wn_eval(scale * r)? } else { 0.0 };
    let floor = (inp.r_diamond * inp.r_diamond).max(log_inv * log_inv / inp.n as f64);
    Ok(floor.max(w) + k * r * r + inp.pilot)
}

/// `6 |w|_inf beta^1.5 sqrt(d) / (alpha sqrt(log(1/delta)))`.
pub fn convex_bound_slope(loss: &BregmanLoss, inp: &ConvexBoundInputs) -> f64 {
    let log_inv = (1.0 / inp.delta).ln();
    6.0 * inp.w_inf * loss.beta().powf(1.5) * (inp.d as f64).sqrt() / (loss.alpha() * log_inv.sqrt())
}

/// The initial upper bracket `max{r_dia, W(c r_dia) / r_dia}` with
/// `c = sqrt(beta/alpha) (2 + 1/sqrt(log(1/delta)))`.
pub fn convex_bound_bracket<F>(loss: &BregmanLoss, wn_eval: &F, inp: &ConvexBoundInputs) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let log_inv = (1.0 / inp.delta).ln();
    let scale = loss.c0() * (2.0 + 1.0 / log_inv.sqrt());
    Ok(inp.r_diamond.max(wn_eval(scale * inp.r_diamond)? / inp.r_diamond))
}

/// Largest `r` with `r^2 <= rhs(r)`: any radius satisfying the inequality,
/// the true one included, lies below it.
pub fn rhat_bound_convex<F>(
    loss: &BregmanLoss,
    wn_eval: F,
    inp: &ConvexBoundInputs,
    rel_tol: f64,
    r_max: f64,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    check_small_delta(inp.delta)?;
    if !(inp.r_diamond > 0.0) || inp.n == 0 || !(inp.w_inf >= 0.0) || !(inp.pilot >= 0.0) {
        return Err(Error::invalid(
            "convex-class bound needs r_diamond > 0, n > 0, w_inf >= 0, pilot >= 0",
        ));
    }
    let mut trace = Vec::new();
    let slack = |r: f64, trace: &mut Vec<(f64, f64, f64)>| -> Result<f64> {
        let rhs = convex_bound_rhs(loss, &wn_eval, inp, r)?;
        trace.push((r, rhs, r * r));
        Ok(rhs - r * r)
    };
    let start = convex_bound_bracket(loss, &wn_eval, inp)?.max(f64::MIN_POSITIVE);
    let (mut ok, mut bad);
    if slack(start, &mut trace)? >= 0.0 {
        ok = start;
        let mut r = start;
        loop {
            r *= 2.0;
            if r > r_max.max(start) * 2.0 {
                return Err(Error::UnboundedRadius { r_max, trace });
            }
            if slack(r, &mut trace)? < 0.0 {
                bad = r;
                break;
            }
            ok = r;
        }
    } else {
        bad = start;
        let mut r = start;
        loop {
            r *= 0.5;
            if slack(r, &mut trace)? >= 0.0 {
                ok = r;
                break;
            }
            bad = r;
        }
    }
    while bad - ok > rel_tol * bad {
        let mid = 0.5 * (ok + bad);
        if slack(mid, &mut trace)? >= 0.0 {
            ok = mid;
        } else {
            bad = mid;
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMethod {
    Oracle,
    FixedPoint,
    ConvexClassBound,
}

impl RadiusMethod {
    pub fn label(self) -> &'static str {
        match self {
            RadiusMethod::Oracle => "oracle",
            RadiusMethod::FixedPoint => "fixed_point",
            RadiusMethod::ConvexClassBound => "convex_class_bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub r_hat_n: f64,
    pub r_diamond_rho: f64,
    pub r_certified: f64,
    pub method: RadiusMethod,
    pub metadata: BTreeMap<String, String>,
}
