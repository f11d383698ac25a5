//! The wild-refitting procedure: fit, symmetrise residues with Rademacher
//! signs, build wild responses, refit, and measure the wild optimism.

use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, Domain};
use crate::design::{
    empirical_discrepancy, sample_sign_matrix, CompactSet, FixedDesignDataset, PredictionMatrix,
    SignMatrix,
};
use crate::error::{Error, FitStage, Result};
use crate::matrix::{norm_sq, Matrix};
use crate::trainer::Trainer;

/// Whether wild responses are projected back into the loss domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    /// Clip only for potentials with a restricted domain.
    #[default]
    Auto,
    Always,
    Never,
}

impl ClipPolicy {
    fn enabled(self, loss: &BregmanLoss) -> bool {
        match self {
            ClipPolicy::Auto => !matches!(loss.potential().domain(), Domain::Unbounded),
            ClipPolicy::Always => true,
            ClipPolicy::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WildRefitResult {
    pub responses: Matrix,
    pub fhat: PredictionMatrix,
    pub fdiamond: PredictionMatrix,
    /// `fhat - rho * (eps ⊙ residues)`, after domain clipping if enabled.
    pub wild_responses: Matrix,
    /// `y_i - fhat(x_i)`.
    pub residues: Matrix,
    pub signs: SignMatrix,
    pub rho: f64,
    pub clipping: bool,
    /// Rows of the wild responses that clipping moved.
    pub clipped_rows: usize,
}

impl WildRefitResult {
    pub fn n(&self) -> usize {
        self.residues.nrows()
    }

    /// `eps ⊙ residues`.
    pub fn symmetrized_residues(&self) -> Result<Matrix> {
        self.signs.apply(&self.residues)
    }

    /// `sqrt(L_n(fhat, fdiamond))`.
    pub fn wild_radius(&self, loss: &BregmanLoss) -> Result<f64> {
        Ok(empirical_discrepancy(loss, &self.fhat, &self.fdiamond)?.sqrt())
    }

    /// `(1/n) sum_i D_phi(y_i, fhat(x_i))`.
    pub fn training_error(&self, loss: &BregmanLoss) -> Result<f64> {
        crate::design::matrix_discrepancy(loss, &self.responses, self.fhat.values())
    }
}

/// `fhat - rho * (eps ⊙ residues)`, without clipping.
pub fn wild_responses(fhat: &Matrix, symmetrized: &Matrix, rho: f64) -> Result<Matrix> {
    fhat.zip_with(symmetrized, |f, z| f - rho * z)
}

/// Holds the initial fit and sign draw so the refit can be repeated for
/// many noise scales (calibration reuses one draw).
pub struct WildRefitter<'a> {
    loss: &'a BregmanLoss,
    set: &'a CompactSet,
    trainer: &'a dyn Trainer,
    data: &'a FixedDesignDataset,
    fhat: PredictionMatrix,
    residues: Matrix,
    signs: SignMatrix,
    symmetrized: Matrix,
    clip: ClipPolicy,
}

impl<'a> WildRefitter<'a> {
    pub fn new(
        loss: &'a BregmanLoss,
        set: &'a CompactSet,
        trainer: &'a dyn Trainer,
        data: &'a FixedDesignDataset,
        seed: u64,
        clip: ClipPolicy,
    ) -> Result<Self> {
        let fhat = trainer
            .fit(loss, set, data)
            .map_err(|e| e.at_stage(FitStage::Initial))?;
        let signs = sample_sign_matrix(data.n(), data.d(), seed);
        Self::with_fit(loss, set, trainer, data, fhat, signs, clip)
    }

    /// Starts from an existing fit and sign draw.
    pub fn with_fit(
        loss: &'a BregmanLoss,
        set: &'a CompactSet,
        trainer: &'a dyn Trainer,
        data: &'a FixedDesignDataset,
        fhat: PredictionMatrix,
        signs: SignMatrix,
        clip: ClipPolicy,
    ) -> Result<Self> {
        let residues = data.responses().sub(fhat.values())?;
        let symmetrized = signs.apply(&residues)?;
        Ok(WildRefitter {
            loss,
            set,
            trainer,
            data,
            fhat,
            residues,
            signs,
            symmetrized,
            clip,
        })
    }

    pub fn fhat(&self) -> &PredictionMatrix {
        &self.fhat
    }

    pub fn residues(&self) -> &Matrix {
        &self.residues
    }

    pub fn signs(&self) -> &SignMatrix {
        &self.signs
    }

    pub fn symmetrized_residues(&self) -> &Matrix {
        &self.symmetrized
    }

    pub fn refit(&self, rho: f64) -> Result<WildRefitResult> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("noise scale must be positive, got {rho}")));
        }
        let mut wild = wild_responses(self.fhat.values(), &self.symmetrized, rho)?;
        let clipping = self.clip.enabled(self.loss);
        let mut clipped_rows = 0;
        if clipping {
            for i in 0..wild.nrows() {
                let projected = self.loss.potential().project_to_domain(wild.row(i));
                if projected.as_slice() != wild.row(i) {
                    clipped_rows += 1;
                    wild.row_mut(i).copy_from_slice(&projected);
                }
            }
        }
        let refit_data = self.data.with_responses(wild.clone())?;
        let fdiamond = self
            .trainer
            .fit(self.loss, self.set, &refit_data)
            .map_err(|e| e.at_stage(FitStage::Refit))?;
        Ok(WildRefitResult {
            responses: self.data.responses().clone(),
            fhat: self.fhat.clone(),
            fdiamond,
            wild_responses: wild,
            residues: self.residues.clone(),
            signs: self.signs.clone(),
            rho,
            clipping,
            clipped_rows,
        })
    }

    pub fn radius_at(&self, rho: f64) -> Result<(f64, WildRefitResult)> {
        let result = self.refit(rho)?;
        Ok((result.wild_radius(self.loss)?, result))
    }
}

pub fn wild_refit(
    loss: &BregmanLoss,
    set: &CompactSet,
    trainer: &dyn Trainer,
    data: &FixedDesignDataset,
    rho: f64,
    seed: u64,
    clip: ClipPolicy,
) -> Result<WildRefitResult> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("noise scale must be positive, got {rho}")));
    }
    WildRefitter::new(loss, set, trainer, data, seed, clip)?.refit(rho)
}

/// The wild optimism
/// `(1/(n rho)) sum l(fhat_i, fdia_i) - (1/(n rho)) sum l(y_dia_i, fdia_i)
///  + (1/n) sum beta rho |eps_i ⊙ w_i|^2`, with the certified `beta`.
pub fn wild_optimism(loss: &BregmanLoss, result: &WildRefitResult) -> Result<f64> {
    let rho = result.rho;
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("noise scale must be positive, got {rho}")));
    }
    let n = result.n();
    let z = result.symmetrized_residues()?;
    let mut first = 0.0;
    let mut second = 0.0;
    let mut third = 0.0;
    for i in 0..n {
        first += loss.divergence(result.fhat.row(i), result.fdiamond.row(i))?;
        second += loss.divergence(result.wild_responses.row(i), result.fdiamond.row(i))?;
        third += norm_sq(z.row(i));
    }
    let nf = n as f64;
    Ok(first / (nf * rho) - second / (nf * rho) + loss.beta() * rho * third / nf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub tol_rel: f64,
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub max_bisect: usize,
    /// Points in the fallback grid scan of the final bracket.
    pub grid_points: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            tol_rel: 1e-3,
            rho_lo: 1e-6,
            rho_hi: 1e6,
            max_bisect: 200,
            grid_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rho: f64,
    pub achieved_radius: f64,
    pub target_radius: f64,
    pub result: WildRefitResult,
    /// Every sampled `(rho, radius)` pair in evaluation order.
    pub trace: Vec<(f64, f64)>,
    /// Set when the sampled radius map was not monotone.
    pub non_monotone: bool,
}

/// Finds `rho` with `|sqrt(L_n(fhat, fdiamond_rho)) - target| <= tol_rel * target`
/// using one fixed sign draw for every candidate.
pub fn calibrate_rho(
    refitter: &WildRefitter<'_>,
    target_radius: f64,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if !(target_radius > 0.0 && target_radius.is_finite()) {
        return Err(Error::invalid(format!(
            "target radius must be positive, got {target_radius}"
        )));
    }
    if !(opts.rho_lo > 0.0 && opts.rho_lo < opts.rho_hi) {
        return Err(Error::invalid("calibration needs 0 < rho_lo < rho_hi"));
    }
    let mut trace: Vec<(f64, f64)> = Vec::new();
    let eval = |rho: f64, trace: &mut Vec<(f64, f64)>| -> Result<(f64, WildRefitResult)> {
        let (r, res) = refitter.radius_at(rho)?;
        trace.push((rho, r));
        Ok((r, res))
    };
    let close = |r: f64| (r - target_radius).abs() <= opts.tol_rel * target_radius;
    let finish = |rho, r, result, trace: Vec<(f64, f64)>| {
        let non_monotone = !is_monotone(&trace);
        Ok(Calibration {
            rho,
            achieved_radius: r,
            target_radius,
            result,
            trace,
            non_monotone,
        })
    };

    // Bracket by doubling / halving from rho = 1 (clamped into range).
    let mut rho = 1f64.clamp(opts.rho_lo, opts.rho_hi);
    let (r0, res0) = eval(rho, &mut trace)?;
    if close(r0) {
        return finish(rho, r0, res0, trace);
    }
    let (mut below, mut above);
    if r0 < target_radius {
        below = (rho, r0);
        loop {
            if rho >= opts.rho_hi {
                return Err(Error::Calibration {
                    reason: format!(
                        "radius stays below {target_radius:.4e} up to rho = {}",
                        opts.rho_hi
                    ),
                    trace,
                });
            }
            rho = (rho * 2.0).min(opts.rho_hi);
            let (r, res) = eval(rho, &mut trace)?;
            if close(r) {
                return finish(rho, r, res, trace);
            }
            if r > target_radius {
                above = (rho, r);
                break;
            }
            below = (rho, r);
        }
    } else {
        above = (rho, r0);
        loop {
            if rho <= opts.rho_lo {
                return Err(Error::Calibration {
                    reason: format!(
                        "radius stays above {target_radius:.4e} down to rho = {}",
                        opts.rho_lo
                    ),
                    trace,
                });
            }
            rho = (rho / 2.0).max(opts.rho_lo);
            let (r, res) = eval(rho, &mut trace)?;
            if close(r) {
                return finish(rho, r, res, trace);
            }
            if r < target_radius {
                below = (rho, r);
                break;
            }
            above = (rho, r);
        }
    }

    // Bisection on the bracket; the radius map need not be monotone, only
    // continuous, for a sign change to persist.
    for _ in 0..opts.max_bisect {
        let mid = 0.5 * (below.0 + above.0);
        let (r, res) = eval(mid, &mut trace)?;
        if close(r) {
            return finish(mid, r, res, trace);
        }
        if r < target_radius {
            below = (mid, r);
        } else {
            above = (mid, r);
        }
        if (above.0 - below.0).abs() <= f64::EPSILON * above.0.max(below.0) {
            break;
        }
    }

    // Grid fallback over the final bracket.
    let (a, b) = (below.0.min(above.0), below.0.max(above.0));
    let mut best: Option<(f64, f64, WildRefitResult)> = None;
    for k in 0..=opts.grid_points {
        let rho = a + (b - a) * k as f64 / opts.grid_points.max(1) as f64;
        let (r, res) = eval(rho, &mut trace)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, br, _)| (r - target_radius).abs() < (br - target_radius).abs());
        if better {
            best = Some((rho, r, res));
        }
    }
    match best {
        Some((rho, r, res)) if close(r) => finish(rho, r, res, trace),
        _ => Err(Error::Calibration {
            reason: format!(
                "no rho in [{a:.4e}, {b:.4e}] reaches radius {target_radius:.4e} within {}",
                opts.tol_rel
            ),
            trace,
        }),
    }
}

fn is_monotone(trace: &[(f64, f64)]) -> bool {
    let mut sorted = trace.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12 * w[0].1.abs())
}
