//! Black-box training procedures.
//!
//! Two reference trainers implement [`Trainer`]: the saturated trainer fits
//! every design point independently (the class of all functions into the
//! constraint set), and the linear trainer fits an affine map of the input
//! features. Downstream code only ever sees the fitted predictions.

use serde::{Deserialize, Serialize};

use crate::bregman::BregmanLoss;
use crate::design::{matrix_discrepancy, CompactSet, FixedDesignDataset, PredictionMatrix};
use crate::error::{Error, FitStage, Result};
use crate::matrix::{dot, norm_sq, Matrix};

pub trait Trainer: Send + Sync {
    fn fit(
        &self,
        loss: &BregmanLoss,
        set: &CompactSet,
        data: &FixedDesignDataset,
    ) -> Result<PredictionMatrix>;

    fn descriptor(&self) -> TrainerSpec;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    /// Backtracking from the previous accepted step.
    Armijo,
    /// Barzilai-Borwein trial step, safeguarded by Armijo backtracking.
    #[default]
    BarzilaiBorwein,
}

/// Trainer descriptor as written in experiment configs and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    Saturated {
        #[serde(default = "default_saturated_iters")]
        max_iters: usize,
        #[serde(default = "default_saturated_tol")]
        tol: f64,
    },
    Linear {
        #[serde(default = "default_linear_iters")]
        max_iters: usize,
        #[serde(default = "default_linear_tol")]
        tol: f64,
        #[serde(default)]
        step: StepPolicy,
        #[serde(default)]
        seed: u64,
    },
}

fn default_saturated_iters() -> usize {
    10_000
}
fn default_saturated_tol() -> f64 {
    1e-12
}
fn default_linear_iters() -> usize {
    20_000
}
fn default_linear_tol() -> f64 {
    1e-10
}

impl TrainerSpec {
    pub fn saturated() -> Self {
        TrainerSpec::Saturated {
            max_iters: default_saturated_iters(),
            tol: default_saturated_tol(),
        }
    }

    pub fn linear() -> Self {
        TrainerSpec::Linear {
            max_iters: default_linear_iters(),
            tol: default_linear_tol(),
            step: StepPolicy::default(),
            seed: 0,
        }
    }

    pub fn build(&self) -> Box<dyn Trainer> {
        match *self {
            TrainerSpec::Saturated { max_iters, tol } => {
                Box::new(SaturatedTrainer { max_iters, tol })
            }
            TrainerSpec::Linear {
                max_iters,
                tol,
                step,
                seed,
            } => Box::new(LinearTrainer {
                opts: LinearFitOptions {
                    max_iters,
                    tol,
                    step,
                    seed,
                },
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainerSpec::Saturated { .. } => "saturated",
            TrainerSpec::Linear { .. } => "linear",
        }
    }
}

// ---------------------------------------------------------------------------
// Saturated trainer
// ---------------------------------------------------------------------------

/// Pointwise minimiser of `z -> D_phi(y_i, z)` over the constraint set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturatedTrainer {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SaturatedTrainer {
    fn default() -> Self {
        SaturatedTrainer {
            max_iters: default_saturated_iters(),
            tol: default_saturated_tol(),
        }
    }
}

impl Trainer for SaturatedTrainer {
    fn fit(
        &self,
        loss: &BregmanLoss,
        set: &CompactSet,
        data: &FixedDesignDataset,
    ) -> Result<PredictionMatrix> {
        fit_saturated_with(loss, set, data, self.max_iters, self.tol)
    }

    fn descriptor(&self) -> TrainerSpec {
        TrainerSpec::Saturated {
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

pub fn fit_saturated(
    loss: &BregmanLoss,
    set: &CompactSet,
    data: &FixedDesignDataset,
) -> Result<PredictionMatrix> {
    let t = SaturatedTrainer::default();
    fit_saturated_with(loss, set, data, t.max_iters, t.tol)
}

fn fit_saturated_with(
    loss: &BregmanLoss,
    set: &CompactSet,
    data: &FixedDesignDataset,
    max_iters: usize,
    tol: f64,
) -> Result<PredictionMatrix> {
    set.check_compatible(loss)?;
    let (n, d) = (data.n(), data.d());
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let y = data.responses().row(i);
        loss.potential().check_domain(y)?;
        let z = if set.contains(y) {
            y.to_vec()
        } else {
            match saturated_row_pgd(loss, set, y, max_iters, tol) {
                Ok(z) => z,
                Err(err) if d == 1 => saturated_row_grid(loss, set, y).ok_or(err)?,
                Err(err) => return Err(err),
            }
        };
        out.row_mut(i).copy_from_slice(&z);
    }
    PredictionMatrix::new(out, set)
}

/// Projected gradient descent with Armijo backtracking on `z -> D(y, z)`.
/// Only stationarity is asserted; the map need not be convex in `z`.
fn saturated_row_pgd(
    loss: &BregmanLoss,
    set: &CompactSet,
    y: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let objective = |z: &[f64]| loss.divergence_unchecked(y, z);
    let mut z = set.project(y);
    let mut f = objective(&z);
    let mut step = 1.0 / loss.beta();
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let g = loss.grad2_unchecked(y, &z);
        residual = gradient_mapping_norm(set, &z, &g, 1.0 / loss.beta());
        trace.push(f);
        if residual <= tol * (1.0 + f.abs()) {
            return Ok(z);
        }
        let mut accepted = false;
        let mut trial_step = step * 2.0;
        while trial_step > 1e-30 {
            let cand: Vec<f64> = set.project(
                &z.iter()
                    .zip(&g)
                    .map(|(a, b)| a - trial_step * b)
                    .collect::<Vec<_>>(),
            );
            let fc = objective(&cand);
            let moved: f64 = cand.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            if fc <= f - 1e-4 / trial_step * moved {
                if moved == 0.0 {
                    // stationary to machine precision
                    return Ok(z);
                }
                z = cand;
                f = fc;
                step = trial_step;
                accepted = true;
                break;
            }
            trial_step *= 0.5;
        }
        if !accepted {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence {
        solver: "saturated projected gradient",
        iterations: max_iters,
        grad_norm: residual,
        last_iterate: z,
        objective_trace: trace,
    })
}

/// Dense grid over a one-dimensional box, refined around the best cell.
fn saturated_row_grid(loss: &BregmanLoss, set: &CompactSet, y: &[f64]) -> Option<Vec<f64>> {
    let CompactSet::Box { lo, hi } = set else {
        return None;
    };
    let (mut a, mut b) = (lo[0], hi[0]);
    let mut best = a;
    for _ in 0..6 {
        let steps = 1000;
        let mut best_val = f64::INFINITY;
        for k in 0..=steps {
            let z = a + (b - a) * k as f64 / steps as f64;
            let v = loss.divergence_unchecked(y, &[z]);
            if v < best_val {
                best_val = v;
                best = z;
            }
        }
        let h = (b - a) / steps as f64;
        a = (best - h).max(lo[0]);
        b = (best + h).min(hi[0]);
    }
    Some(vec![best])
}

/// `|z - P(z - s g)| / s`, zero exactly at constrained stationary points.
fn gradient_mapping_norm(set: &CompactSet, z: &[f64], g: &[f64], s: f64) -> f64 {
    let stepped: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - s * b).collect();
    let p = set.project(&stepped);
    p.iter()
        .zip(z)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / s
}

// ---------------------------------------------------------------------------
// Linear-class trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFitOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub step: StepPolicy,
    /// Recorded in reports; the fit itself starts from zero and uses no
    /// randomness.
    pub seed: u64,
}

impl Default for LinearFitOptions {
    fn default() -> Self {
        LinearFitOptions {
            max_iters: default_linear_iters(),
            tol: default_linear_tol(),
            step: StepPolicy::default(),
            seed: 0,
        }
    }
}

/// `x -> P_C(theta^T x + intercept)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    /// `p x d` coefficient matrix.
    pub theta: Matrix,
    pub intercept: Vec<f64>,
    pub set: CompactSet,
}

impl LinearPredictor {
    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.intercept.clone();
        for (k, &xk) in x.iter().enumerate() {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += xk * self.theta.get(k, j);
            }
        }
        v
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.set.project(&self.raw(x))
    }

    pub fn predict_matrix(&self, inputs: &Matrix) -> Result<PredictionMatrix> {
        let d = self.intercept.len();
        let mut out = Matrix::zeros(inputs.nrows(), d);
        for i in 0..inputs.nrows() {
            out.row_mut(i).copy_from_slice(&self.predict(inputs.row(i)));
        }
        PredictionMatrix::new(out, &self.set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub predictor: LinearPredictor,
    pub predictions: PredictionMatrix,
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LinearFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearTrainer {
    pub opts: LinearFitOptions,
}

impl Trainer for LinearTrainer {
    fn fit(
        &self,
        loss: &BregmanLoss,
        set: &CompactSet,
        data: &FixedDesignDataset,
    ) -> Result<PredictionMatrix> {
        Ok(self.fit_model(loss, set, data)?.predictions)
    }

    fn descriptor(&self) -> TrainerSpec {
        TrainerSpec::Linear {
            max_iters: self.opts.max_iters,
            tol: self.opts.tol,
            step: self.opts.step,
            seed: self.opts.seed,
        }
    }
}

impl LinearTrainer {
    /// Fits and fails unless the gradient tolerance was reached.
    pub fn fit_model(
        &self,
        loss: &BregmanLoss,
        set: &CompactSet,
        data: &FixedDesignDataset,
    ) -> Result<LinearFit> {
        let fit = fit_linear_class(loss, set, data, &self.opts)?;
        if !fit.converged {
            return Err(Error::NonConvergence {
                solver: "linear-class gradient descent",
                iterations: self.opts.max_iters,
                grad_norm: fit.grad_norm,
                last_iterate: fit.predictor.intercept.clone(),
                objective_trace: fit.objective_trace,
            });
        }
        Ok(fit)
    }
}

/// Gradient descent on `(theta, intercept)` for
/// `(1/n) sum_i D_phi(y_i, P_C(theta^T x_i + b))`. Returns the final iterate
/// whether or not the tolerance was met; [`LinearTrainer`] turns
/// non-convergence into an error.
pub fn fit_linear_class(
    loss: &BregmanLoss,
    set: &CompactSet,
    data: &FixedDesignDataset,
    opts: &LinearFitOptions,
) -> Result<LinearFit> {
    set.check_compatible(loss)?;
    for y in data.responses().rows_iter() {
        loss.potential().check_domain(y)?;
    }
    let problem = LinearProblem { loss, set, data };
    let (p, d) = (data.p(), data.d());
    let dim = (p + 1) * d;

    // Start from the constant predictor at the projected response mean.
    let mut params = vec![0.0; dim];
    let mut mean = vec![0.0; d];
    for y in data.responses().rows_iter() {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v / data.n() as f64;
        }
    }
    params[p * d..].copy_from_slice(&set.project(&mean));

    let (mut f, mut g) = problem.value_and_gradient(&params);
    let mut trace = vec![f];
    let mut step = 1.0 / (loss.beta() * (1.0 + problem.feature_scale()));
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut grad_norm = norm_sq(&g).sqrt();

    for _ in 0..opts.max_iters {
        if grad_norm <= opts.tol {
            converged = true;
            break;
        }
        let mut trial = match (opts.step, &prev) {
            (StepPolicy::BarzilaiBorwein, Some((px, pg))) => {
                let s: Vec<f64> = params.iter().zip(px).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 0.0 {
                    (norm_sq(&s) / sy).clamp(1e-12, 1e12)
                } else {
                    step * 2.0
                }
            }
            _ => step * 2.0,
        };
        let g2 = grad_norm * grad_norm;
        let mut accepted = None;
        while trial > 1e-30 {
            let cand: Vec<f64> = params.iter().zip(&g).map(|(a, b)| a - trial * b).collect();
            let fc = problem.value(&cand);
            if fc <= f - 1e-4 * trial * g2 {
                accepted = Some(cand);
                break;
            }
            trial *= 0.5;
        }
        let Some(cand) = accepted else {
            // No descent at any step length: numerically stationary.
            converged = grad_norm <= opts.tol.max(1e-7);
            break;
        };
        let (fc, gc) = problem.value_and_gradient(&cand);
        prev = Some((std::mem::replace(&mut params, cand), std::mem::replace(&mut g, gc)));
        f = fc;
        step = trial;
        trace.push(f);
        grad_norm = norm_sq(&g).sqrt();
        // Objective flat to rounding over a long window: accept a slightly
        // looser gradient, as the line search cannot make progress anyway.
        if trace.len() > 200 && grad_norm <= opts.tol.max(1e-7) {
            let old = trace[trace.len() - 200];
            if old - f <= 1e-14 * (1.0 + f.abs()) {
                converged = true;
                break;
            }
        }
    }
    if grad_norm <= opts.tol {
        converged = true;
    }

    let theta = Matrix::from_vec(p, d, params[..p * d].to_vec())?;
    let predictor = LinearPredictor {
        theta,
        intercept: params[p * d..].to_vec(),
        set: set.clone(),
    };
    let predictions = predictor.predict_matrix(data.inputs())?;
    Ok(LinearFit {
        predictor,
        predictions,
        objective_trace: trace,
        grad_norm,
        converged,
    })
}

struct LinearProblem<'a> {
    loss: &'a BregmanLoss,
    set: &'a CompactSet,
    data: &'a FixedDesignDataset,
}

impl LinearProblem<'_> {
    fn feature_scale(&self) -> f64 {
        let x = self.data.inputs();
        x.rows_iter().map(norm_sq).sum::<f64>() / x.nrows() as f64
    }

    fn raw_row(&self, params: &[f64], i: usize) -> Vec<f64> {
        let (p, d) = (self.data.p(), self.data.d());
        let x = self.data.inputs().row(i);
        let mut v = params[p * d..].to_vec();
        for (k, &xk) in x.iter().enumerate() {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += xk * params[k * d + j];
            }
        }
        v
    }

    fn value(&self, params: &[f64]) -> f64 {
        let n = self.data.n();
        (0..n)
            .map(|i| {
                let u = self.set.project(&self.raw_row(params, i));
                self.loss
                    .divergence_unchecked(self.data.responses().row(i), &u)
            })
            .sum::<f64>()
            / n as f64
    }

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (n, p, d) = (self.data.n(), self.data.p(), self.data.d());
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for i in 0..n {
            let v = self.raw_row(params, i);
            let u = self.set.project(&v);
            let y = self.data.responses().row(i);
            total += self.loss.divergence_unchecked(y, &u);
            let gu = self.loss.grad2_unchecked(y, &u);
            let gv = projection_jacobian_apply(self.set, &v, &u, &gu);
            let x = self.data.inputs().row(i);
            for (k, &xk) in x.iter().enumerate() {
                for j in 0..d {
                    grad[k * d + j] += xk * gv[j] / n as f64;
                }
            }
            for j in 0..d {
                grad[p * d + j] += gv[j] / n as f64;
            }
        }
        (total / n as f64, grad)
    }
}

/// Applies the (symmetric, almost-everywhere) Jacobian of the Euclidean
/// projection at `v` to `g`.
fn projection_jacobian_apply(set: &CompactSet, v: &[f64], u: &[f64], g: &[f64]) -> Vec<f64> {
    match set {
        CompactSet::Box { lo, hi } => v
            .iter()
            .zip(lo.iter().zip(hi))
            .zip(g)
            .map(|((&vj, (&a, &b)), &gj)| if vj > a && vj < b { gj } else { 0.0 })
            .collect(),
        CompactSet::ClippedSimplex { eta, .. } => {
            let free: Vec<bool> = u.iter().map(|&uj| uj > *eta).collect();
            let count = free.iter().filter(|&&f| f).count();
            if count == 0 {
                return vec![0.0; g.len()];
            }
            let mean = g
                .iter()
                .zip(&free)
                .filter(|(_, &f)| f)
                .map(|(gj, _)| gj)
                .sum::<f64>()
                / count as f64;
            g.iter()
                .zip(&free)
                .map(|(gj, &f)| if f { gj - mean } else { 0.0 })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Non-expansiveness diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonExpansiveCheck {
    /// `L_n(f_dagger, f_tilde)`.
    pub lhs: f64,
    /// `(1/n) sum_i <grad_1 l(f_dagger_i, f_tilde_i), u_i>`.
    pub rhs: f64,
    pub holds: bool,
}

/// Fits the trainer on `f*` and on `f* + noise` and compares both sides of
/// the non-expansiveness inequality.
pub fn check_nonexpansive(
    loss: &BregmanLoss,
    set: &CompactSet,
    trainer: &dyn Trainer,
    inputs: &Matrix,
    fstar_preds: &PredictionMatrix,
    noise: &Matrix,
) -> Result<NonExpansiveCheck> {
    fstar_preds.values().ensure_same_shape(noise)?;
    let noisy = fstar_preds.values().add(noise)?;
    for i in 0..noisy.nrows() {
        loss.potential().check_domain(fstar_preds.row(i))?;
        loss.potential().check_domain(noisy.row(i))?;
    }
    let clean = FixedDesignDataset::new(inputs.clone(), fstar_preds.values().clone())?;
    let noisy = FixedDesignDataset::new(inputs.clone(), noisy)?;
    let fdagger = trainer
        .fit(loss, set, &clean)
        .map_err(|e| e.at_stage(FitStage::Noiseless))?;
    let ftilde = trainer
        .fit(loss, set, &noisy)
        .map_err(|e| e.at_stage(FitStage::Initial))?;
    let lhs = matrix_discrepancy(loss, fdagger.values(), ftilde.values())?;
    let n = noise.nrows();
    let mut rhs = 0.0;
    for i in 0..n {
        // Oriented so that a perfectly interpolating trainer gives rhs = mean |u|^2.
        let g = loss.grad1_divergence(ftilde.row(i), fdagger.row(i))?;
        rhs += dot(&g, noise.row(i));
    }
    rhs /= n as f64;
    Ok(NonExpansiveCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}
