//! Synthetic ground truth and Monte Carlo coverage runs for the
//! certificates, the radius bounds and the deterministic wild-optimism
//! inequality.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, PotentialKind};
use crate::certify::{
    fixed_design_certificate, random_design_certificate, stability_constants,
    true_optimism_oracle, CertificateInputs,
};
use crate::complexity::{
    convex_bound_slope, fixed_point_radius, pilot_error_oracle, ConvexBoundInputs,
    FixedPointOptions, RadiusMethod, RadiusReport, WildNoiseComplexity,
};
use crate::design::{
    derive_seed, empirical_discrepancy, matrix_discrepancy, sample_sign_matrix, CompactSet,
    FixedDesignDataset, PredictionMatrix,
};
use crate::error::{Error, FitStage, Result};
use crate::matrix::Matrix;
use crate::trainer::{LinearFitOptions, LinearTrainer, Trainer, TrainerSpec};
use crate::wildfit::{calibrate_rho, wild_optimism, CalibrationOptions, ClipPolicy, WildRefitter};

const STREAM_MODEL: u64 = 1;
const STREAM_DESIGN: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SIGNS: u64 = 4;
const STREAM_HOLDOUT: u64 = 5;
const STREAM_REP: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Covariates drawn once from the model seed and shared by every draw.
    #[default]
    Fixed,
    /// Covariates redrawn i.i.d. with every sample.
    Random,
}

/// Regression function families. Features are uniform on `[-1, 1]^p`; the
/// linear and nonlinear maps stay within `mid ± scale` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FstarFamily {
    Constant { mid: f64 },
    Linear { mid: f64, scale: f64 },
    Nonlinear { mid: f64, scale: f64 },
}

/// Coordinate-wise symmetric, mean-zero noise laws. On the simplex every
/// row is centred so responses keep unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseFamily {
    Uniform { a: f64 },
    ScaledRademacher { a: f64 },
    Heteroskedastic { a: Vec<f64> },
}

impl NoiseFamily {
    fn amplitude(&self, j: usize) -> f64 {
        match self {
            NoiseFamily::Uniform { a } | NoiseFamily::ScaledRademacher { a } => *a,
            NoiseFamily::Heteroskedastic { a } => a[j],
        }
    }

    fn draw(&self, j: usize, rng: &mut ChaCha8Rng) -> f64 {
        let a = self.amplitude(j);
        match self {
            NoiseFamily::ScaledRademacher { .. } => {
                if rng.gen::<bool>() {
                    a
                } else {
                    -a
                }
            }
            _ if a == 0.0 => 0.0,
            _ => rng.gen_range(-a..=a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default)]
    pub design: DesignKind,
    pub fstar: FstarFamily,
    pub noise: NoiseFamily,
    pub potential: PotentialKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_p() -> usize {
    2
}

/// Ground truth available in synthetic mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleContext {
    pub fstar_preds: PredictionMatrix,
    pub noise: Matrix,
    /// Fit on the noiseless responses, once a trainer is chosen.
    pub fdagger_preds: Option<PredictionMatrix>,
    pub w_inf: f64,
}

impl OracleContext {
    pub fn attach_dagger(
        &mut self,
        loss: &BregmanLoss,
        set: &CompactSet,
        trainer: &dyn Trainer,
        data: &FixedDesignDataset,
    ) -> Result<&PredictionMatrix> {
        let clean = data.with_responses(self.fstar_preds.values().clone())?;
        let fit = trainer
            .fit(loss, set, &clean)
            .map_err(|e| e.at_stage(FitStage::Noiseless))?;
        Ok(self.fdagger_preds.insert(fit))
    }

    fn dagger(&self) -> Result<&PredictionMatrix> {
        self.fdagger_preds
            .as_ref()
            .ok_or_else(|| Error::invalid("noiseless fit has not been attached"))
    }
}

/// The data-generating process behind a [`SyntheticSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticSpec,
    loss: BregmanLoss,
    /// `p x d` coefficients of the linear and nonlinear families.
    theta: Matrix,
    fixed_inputs: Matrix,
}

impl SyntheticModel {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        if spec.n == 0 || spec.d == 0 {
            return Err(Error::invalid("synthetic data needs n > 0 and d > 0"));
        }
        let loss = BregmanLoss::builtin(spec.potential, spec.d)?;
        match &spec.noise {
            NoiseFamily::Heteroskedastic { a } if a.len() != spec.d => {
                return Err(Error::invalid("heteroskedastic amplitudes need one entry per coordinate"))
            }
            _ => {}
        }
        if (0..spec.d).any(|j| !(spec.noise.amplitude(j) >= 0.0)) {
            return Err(Error::invalid("noise amplitudes must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_MODEL, 0));
        let theta = Matrix::from_fn(spec.p, spec.d, |_, _| rng.gen_range(-1.0..1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_DESIGN, 0));
        let fixed_inputs = Matrix::from_fn(spec.n, spec.p, |_, _| rng.gen_range(-1.0..1.0));
        Ok(SyntheticModel {
            spec: spec.clone(),
            loss,
            theta,
            fixed_inputs,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn loss(&self) -> &BregmanLoss {
        &self.loss
    }

    fn simplex(&self) -> bool {
        matches!(self.spec.potential, PotentialKind::ClippedSimplexKl { .. })
    }

    /// `f*(x)`.
    pub fn regression(&self, x: &[f64]) -> Vec<f64> {
        let d = self.spec.d;
        let p = self.spec.p.max(1) as f64;
        let proj = |j: usize| -> f64 {
            x.iter().enumerate().map(|(k, xk)| xk * self.theta.get(k, j)).sum::<f64>() / p
        };
        let mut g: Vec<f64> = match &self.spec.fstar {
            FstarFamily::Constant { mid } => vec![*mid; d],
            FstarFamily::Linear { mid, scale } => (0..d).map(|j| mid + scale * proj(j)).collect(),
            FstarFamily::Nonlinear { mid, scale } => (0..d)
                .map(|j| mid + scale * (std::f64::consts::PI * proj(j)).sin())
                .collect(),
        };
        if self.simplex() {
            // Centre the map and place it around the barycenter.
            let mean = g.iter().sum::<f64>() / d as f64;
            for v in g.iter_mut() {
                *v = 1.0 / d as f64 + (*v - mean);
            }
        }
        g
    }

    fn noise_row(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.spec.d;
        let mut w: Vec<f64> = (0..d).map(|j| self.spec.noise.draw(j, rng)).collect();
        if self.simplex() {
            let mean = w.iter().sum::<f64>() / d as f64;
            for v in w.iter_mut() {
                *v -= mean;
            }
        }
        w
    }

    /// Draws a dataset of the spec's size. Fixed designs reuse the model's
    /// covariates; random designs draw fresh ones from `seed`.
    pub fn sample(&self, seed: u64) -> Result<(FixedDesignDataset, OracleContext)> {
        let n = self.spec.n;
        let inputs = match self.spec.design {
            DesignKind::Fixed => self.fixed_inputs.clone(),
            DesignKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DESIGN, 0));
                Matrix::from_fn(n, self.spec.p, |_, _| rng.gen_range(-1.0..1.0))
            }
        };
        self.sample_at(inputs, derive_seed(seed, STREAM_NOISE, 0))
    }

    /// Draws `m` fresh i.i.d. pairs, regardless of the design kind.
    pub fn sample_iid(&self, m: usize, seed: u64) -> Result<(FixedDesignDataset, OracleContext)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DESIGN, 1));
        let inputs = Matrix::from_fn(m, self.spec.p, |_, _| rng.gen_range(-1.0..1.0));
        self.sample_at(inputs, derive_seed(seed, STREAM_NOISE, 1))
    }

    fn sample_at(&self, inputs: Matrix, noise_seed: u64) -> Result<(FixedDesignDataset, OracleContext)> {
        let (n, d) = (inputs.nrows(), self.spec.d);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut fstar = Matrix::zeros(n, d);
        let mut noise = Matrix::zeros(n, d);
        for i in 0..n {
            fstar.row_mut(i).copy_from_slice(&self.regression(inputs.row(i)));
            noise.row_mut(i).copy_from_slice(&self.noise_row(&mut rng));
        }
        let responses = fstar.add(&noise)?;
        for i in 0..n {
            let pot = self.loss.potential();
            if pot.check_domain(fstar.row(i)).is_err() || pot.check_domain(responses.row(i)).is_err() {
                return Err(Error::invalid(format!(
                    "synthetic configuration leaves the {} domain (row {i}: f* = {:?}, y = {:?})",
                    self.spec.potential.name(),
                    fstar.row(i),
                    responses.row(i)
                )));
            }
        }
        let w_inf = noise.max_abs();
        let data = FixedDesignDataset::new(inputs, responses)?;
        Ok((
            data,
            OracleContext {
                fstar_preds: PredictionMatrix::unchecked(fstar),
                noise,
                fdagger_preds: None,
                w_inf,
            },
        ))
    }
}

/// Dataset and ground truth for `spec`, deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FixedDesignDataset, OracleContext)> {
    SyntheticModel::new(spec)?.sample(spec.seed)
}

/// `(1/n) sum D(y_i, fhat_i) - (1/n) sum D(y_i, f*_i)`.
pub fn realized_excess_risk(
    loss: &BregmanLoss,
    data: &FixedDesignDataset,
    fhat: &PredictionMatrix,
    oracle: &OracleContext,
) -> Result<f64> {
    let y = data.responses();
    Ok(matrix_discrepancy(loss, y, fhat.values())?
        - matrix_discrepancy(loss, y, oracle.fstar_preds.values())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// `W_n(r_dia) <= Opt~` on every draw.
    #[serde(rename = "lemma_5_1")]
    WildOptimismDominates,
    /// `|Opt*| <= |Opt~| + A_n + B_n`.
    #[serde(rename = "thm_5_1_optimism")]
    FixedDesignOptimism,
    /// Empirical excess risk below the fixed-design certificate.
    #[serde(rename = "thm_5_1_excess")]
    FixedDesignExcess,
    /// The self-bounding inequality for the noiseless estimation error.
    #[serde(rename = "thm_6_1_rhat")]
    NoiselessRadius,
    /// Population excess risk below the random-design certificate.
    #[serde(rename = "thm_5_2_excess")]
    RandomDesignExcess,
}

impl Theorem {
    pub fn label(self) -> &'static str {
        match self {
            Theorem::WildOptimismDominates => "lemma_5_1",
            Theorem::FixedDesignOptimism => "thm_5_1_optimism",
            Theorem::FixedDesignExcess => "thm_5_1_excess",
            Theorem::NoiselessRadius => "thm_6_1_rhat",
            Theorem::RandomDesignExcess => "thm_5_2_excess",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown theorem {s:?}")))
    }

    fn deterministic(self) -> bool {
        self == Theorem::WildOptimismDominates
    }

    /// Multiple of delta allowed to fail.
    fn budget(self) -> f64 {
        match self {
            Theorem::WildOptimismDominates => 0.0,
            Theorem::FixedDesignOptimism | Theorem::FixedDesignExcess => 8.0,
            Theorem::NoiselessRadius => 4.0,
            Theorem::RandomDesignExcess => 11.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusPolicy {
    /// `r = sqrt(L_n(f_dagger, fhat))`.
    #[default]
    Oracle,
    /// The fixed-point radius of the wild noise complexity at `delta = e^-9`.
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    /// Output file stem; the theorem label when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub theorem: Theorem,
    pub reps: usize,
    pub delta: f64,
    pub spec: SyntheticSpec,
    pub trainer: TrainerSpec,
    /// The constraint set; defaults to the loss domain or a cube.
    #[serde(default)]
    pub set: Option<CompactSet>,
    #[serde(default)]
    pub radius_policy: RadiusPolicy,
    /// Noise scales evaluated per draw in the deterministic check.
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    /// Held-out sample size for population risks.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_rhos() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0]
}

fn default_holdout() -> usize {
    100_000
}

impl Experiment {
    fn set(&self, loss: &BregmanLoss) -> Result<CompactSet> {
        match &self.set {
            Some(s) => {
                s.check_compatible(loss)?;
                Ok(s.clone())
            }
            None => CompactSet::default_for(loss, 10.0),
        }
    }

    pub fn target_coverage(&self) -> f64 {
        1.0 - self.theorem.budget() * self.delta
    }

    pub fn stem(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.theorem.label().to_string())
    }

    /// The desk-scale design used for each claim.
    pub fn default_for(theorem: Theorem) -> Self {
        let base = SyntheticSpec {
            n: 200,
            d: 2,
            p: 2,
            design: DesignKind::Fixed,
            fstar: FstarFamily::Linear { mid: 0.0, scale: 1.0 },
            noise: NoiseFamily::Uniform { a: 0.5 },
            potential: PotentialKind::SquaredL2,
            seed: 0,
        };
        let cube = |d: usize, h: f64| CompactSet::cube(d, -h, h).ok();
        let mut exp = Experiment {
            name: None,
            theorem,
            reps: 500,
            delta: 0.05,
            spec: base,
            trainer: TrainerSpec::linear(),
            set: cube(2, 10.0),
            radius_policy: RadiusPolicy::Oracle,
            rhos: default_rhos(),
            holdout: default_holdout(),
        };
        match theorem {
            Theorem::WildOptimismDominates => {
                // Responses overshoot the box so the saturated fit has residues.
                exp.spec.n = 100;
                exp.spec.noise = NoiseFamily::Uniform { a: 1.0 };
                exp.trainer = TrainerSpec::saturated();
                exp.set = cube(2, 1.0);
            }
            Theorem::FixedDesignOptimism | Theorem::FixedDesignExcess => {}
            Theorem::NoiselessRadius => {
                exp.reps = 200;
                exp.delta = (-9f64).exp();
                exp.spec.fstar = FstarFamily::Linear { mid: 0.0, scale: 0.5 };
                exp.spec.noise = NoiseFamily::Uniform { a: 1.0 };
                exp.trainer = TrainerSpec::saturated();
                exp.set = cube(2, 1.0);
            }
            Theorem::RandomDesignExcess => {
                exp.reps = 300;
                exp.spec.d = 1;
                exp.spec.design = DesignKind::Random;
                exp.spec.noise = NoiseFamily::Uniform { a: 1.0 };
                exp.set = cube(1, 2.0);
            }
        }
        exp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub theorem: Theorem,
    pub root_seed: u64,
    pub delta: f64,
    /// Replications that completed without error.
    pub replications: usize,
    pub successes: usize,
    pub errored: usize,
    pub empirical_coverage: f64,
    pub target_coverage: f64,
    /// Coverage threshold after the two-sigma binomial allowance.
    pub threshold: f64,
    pub pass: bool,
    pub per_replication: Vec<ReplicationRecord>,
}

/// Deterministic-mode tolerance on the per-draw inequality.
const LEMMA_TOL: f64 = 1e-8;

/// Runs every replication (in parallel; records come back in order) and
/// summarises coverage.
pub fn run_coverage(exp: &Experiment, root_seed: u64) -> Result<CoverageReport> {
    if exp.reps == 0 {
        return Err(Error::invalid("coverage runs need at least one replication"));
    }
    if !(exp.delta > 0.0 && exp.delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", exp.delta)));
    }
    let mut spec = exp.spec.clone();
    spec.seed = root_seed;
    let model = SyntheticModel::new(&spec)?;
    let set = exp.set(model.loss())?;
    let trainer = exp.trainer.build();
    let records: Vec<ReplicationRecord> = (0..exp.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(root_seed, STREAM_REP, rep as u64);
            match replicate(exp, &model, &set, trainer.as_ref(), seed) {
                Ok((lhs, rhs)) => {
                    let tol = if exp.theorem.deterministic() { LEMMA_TOL } else { 0.0 };
                    ReplicationRecord {
                        rep,
                        seed,
                        lhs,
                        rhs,
                        holds: lhs <= rhs + tol,
                        error: None,
                    }
                }
                Err(e) => ReplicationRecord {
                    rep,
                    seed,
                    lhs: f64::NAN,
                    rhs: f64::NAN,
                    holds: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(summarise(exp, root_seed, records))
}

fn summarise(exp: &Experiment, root_seed: u64, records: Vec<ReplicationRecord>) -> CoverageReport {
    let errored = records.iter().filter(|r| r.error.is_some()).count();
    let replications = records.len() - errored;
    let successes = records.iter().filter(|r| r.error.is_none() && r.holds).count();
    let empirical_coverage = if replications > 0 {
        successes as f64 / replications as f64
    } else {
        0.0
    };
    let target = exp.target_coverage();
    let threshold = if exp.theorem.deterministic() {
        1.0
    } else {
        target - 2.0 * (target * (1.0 - target) / exp.reps as f64).sqrt()
    };
    CoverageReport {
        theorem: exp.theorem,
        root_seed,
        delta: exp.delta,
        replications,
        successes,
        errored,
        empirical_coverage,
        target_coverage: target,
        threshold,
        pass: errored == 0 && replications > 0 && empirical_coverage >= threshold,
        per_replication: records,
    }
}

/// Returns `(lhs, rhs)` of the target claim for one draw.
fn replicate(
    exp: &Experiment,
    model: &SyntheticModel,
    set: &CompactSet,
    trainer: &dyn Trainer,
    seed: u64,
) -> Result<(f64, f64)> {
    let loss = model.loss();
    let (data, mut oracle) = model.sample(seed)?;
    let signs = sample_sign_matrix(data.n(), data.d(), derive_seed(seed, STREAM_SIGNS, 0));

    if exp.theorem == Theorem::RandomDesignExcess {
        return random_design_replicate(exp, model, set, &data, &mut oracle, signs, seed);
    }

    let fhat = trainer
        .fit(loss, set, &data)
        .map_err(|e| e.at_stage(FitStage::Initial))?;
    let refitter = WildRefitter::with_fit(loss, set, trainer, &data, fhat, signs, ClipPolicy::Auto)?;

    match exp.theorem {
        Theorem::WildOptimismDominates => {
            // Worst margin over the configured noise scales.
            let z = refitter.symmetrized_residues().clone();
            let wn = WildNoiseComplexity::new(loss, set, refitter.fhat(), &z)?;
            let mut worst: Option<(f64, f64)> = None;
            for &rho in &exp.rhos {
                let res = refitter.refit(rho)?;
                let lhs = wn.solve(res.wild_radius(loss)?)?.upper;
                let rhs = wild_optimism(loss, &res)?;
                if worst.is_none_or(|(l, r)| rhs - lhs < r - l) {
                    worst = Some((lhs, rhs));
                }
            }
            worst.ok_or_else(|| Error::invalid("deterministic check needs at least one rho"))
        }
        Theorem::FixedDesignOptimism | Theorem::FixedDesignExcess => {
            oracle.attach_dagger(loss, set, trainer, &data)?;
            let (cert, fhat) = certify_draw(exp, loss, set, &refitter, &oracle)?;
            if exp.theorem == Theorem::FixedDesignOptimism {
                let opt = true_optimism_oracle(loss, &fhat, oracle.fstar_preds.values(), &oracle.noise)?;
                Ok((opt.abs(), cert.optimism_bound()))
            } else {
                Ok((realized_excess_risk(loss, &data, &fhat, &oracle)?, cert.total))
            }
        }
        Theorem::NoiselessRadius => {
            let fdagger = oracle.attach_dagger(loss, set, trainer, &data)?.clone();
            let fhat = refitter.fhat();
            let r_hat = empirical_discrepancy(loss, &fdagger, fhat)?.sqrt();
            let log_inv = (1.0 / exp.delta).ln();
            let wn = WildNoiseComplexity::new(loss, set, fhat, refitter.symmetrized_residues())?;
            let w = wn.eval((2.0 + 1.0 / log_inv) * r_hat)?;
            let inp = ConvexBoundInputs {
                r_diamond: 1.0,
                delta: exp.delta,
                n: data.n(),
                d: data.d(),
                w_inf: oracle.w_inf,
                pilot: 0.0,
            };
            let k = convex_bound_slope(loss, &inp);
            let pilot = pilot_error_oracle(
                loss,
                set,
                fhat,
                oracle.fstar_preds.values(),
                refitter.signs(),
                r_hat,
            )?;
            let rhs = (log_inv * log_inv / data.n() as f64).max(w) + k * r_hat * r_hat + pilot;
            Ok((r_hat * r_hat, rhs))
        }
        Theorem::RandomDesignExcess => unreachable!("handled above"),
    }
}

/// Calibrates the wild refit to the policy radius and assembles the
/// oracle-grade fixed-design certificate. Returns it with `fhat`.
fn certify_draw(
    exp: &Experiment,
    loss: &BregmanLoss,
    set: &CompactSet,
    refitter: &WildRefitter<'_>,
    oracle: &OracleContext,
) -> Result<(crate::certify::RiskCertificate, PredictionMatrix)> {
    let fhat = refitter.fhat().clone();
    let fdagger = oracle.dagger()?;
    let r_hat = empirical_discrepancy(loss, fdagger, &fhat)?.sqrt();
    let (r, method) = match exp.radius_policy {
        RadiusPolicy::Oracle => (r_hat, RadiusMethod::Oracle),
        RadiusPolicy::FixedPoint => {
            let wn = WildNoiseComplexity::new(loss, set, &fhat, refitter.symmetrized_residues())?;
            let r = fixed_point_radius(
                |q| wn.eval(q),
                (-9f64).exp(),
                fhat.n(),
                &FixedPointOptions::with_cap(wn.radius_cap()),
            )?;
            (r, RadiusMethod::FixedPoint)
        }
    };
    if !(r > 0.0) {
        return Err(Error::invalid("certified radius is zero; the draw has no noise"));
    }
    let target = 3.0 * loss.c0() * r;
    let cal = calibrate_rho(refitter, target, &CalibrationOptions::default())?;
    let pilot = pilot_error_oracle(loss, set, &fhat, oracle.fstar_preds.values(), refitter.signs(), r)?;
    let misspec = empirical_discrepancy(loss, &oracle.fstar_preds, fdagger)?.sqrt();
    let report = RadiusReport {
        r_hat_n: r_hat,
        r_diamond_rho: cal.achieved_radius,
        r_certified: r,
        method,
        metadata: Default::default(),
    };
    let inputs = CertificateInputs {
        delta: exp.delta,
        pilot: Some(pilot),
        misspec: Some(misspec),
        w_inf: Some(oracle.w_inf),
        oracle: true,
        calibration_tol: 2e-3,
    };
    Ok((fixed_design_certificate(loss, &cal.result, &report, &inputs)?, fhat))
}

fn random_design_replicate(
    exp: &Experiment,
    model: &SyntheticModel,
    set: &CompactSet,
    data: &FixedDesignDataset,
    oracle: &mut OracleContext,
    signs: crate::design::SignMatrix,
    seed: u64,
) -> Result<(f64, f64)> {
    let loss = model.loss();
    let opts = match exp.trainer {
        TrainerSpec::Linear { max_iters, tol, step, seed } => LinearFitOptions {
            max_iters,
            tol,
            step,
            seed,
        },
        _ => {
            return Err(Error::Unsupported(
                "population risk needs a trainer that predicts off the design (linear)".into(),
            ))
        }
    };
    let trainer = LinearTrainer { opts };
    let fit = trainer
        .fit_model(loss, set, data)
        .map_err(|e| e.at_stage(FitStage::Initial))?;
    oracle.attach_dagger(loss, set, &trainer, data)?;
    let refitter = WildRefitter::with_fit(
        loss,
        set,
        &trainer,
        data,
        fit.predictions.clone(),
        signs,
        ClipPolicy::Auto,
    )?;
    let (cert, _) = certify_draw(exp, loss, set, &refitter, oracle)?;
    let consts = stability_constants(loss, set, data.n())?;
    let cert = random_design_certificate(&cert, &consts, data.n(), exp.delta)?;

    let (holdout, truth) = model.sample_iid(exp.holdout, derive_seed(seed, STREAM_HOLDOUT, 0))?;
    let mut gap = 0.0;
    for i in 0..holdout.n() {
        let y = holdout.responses().row(i);
        let pred = fit.predictor.predict(holdout.inputs().row(i));
        gap += loss.divergence(y, &pred)? - loss.divergence(y, truth.fstar_preds.row(i))?;
    }
    Ok((gap / holdout.n() as f64, cert.total))
}

/// Writes `<stem>_coverage.json`, `<stem>_replications.csv` and
/// `<stem>_summary.txt` into `dir`.
pub fn write_report(report: &CoverageReport, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{stem}_coverage.json")),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}_replications.csv")))?;
    w.write_record(["rep", "seed", "lhs", "rhs", "holds", "error"])?;
    for r in &report.per_replication {
        w.write_record([
            r.rep.to_string(),
            r.seed.to_string(),
            format!("{:?}", r.lhs),
            format!("{:?}", r.rhs),
            r.holds.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join(format!("{stem}_summary.txt")), summary(report))?;
    Ok(())
}

pub fn summary(report: &CoverageReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "theorem:   {}", report.theorem.label());
    let _ = writeln!(s, "seed:      {}", report.root_seed);
    let _ = writeln!(s, "delta:     {}", report.delta);
    let _ = writeln!(
        s,
        "coverage:  {}/{} = {:.4} (target {:.4}, threshold {:.4})",
        report.successes,
        report.replications,
        report.empirical_coverage,
        report.target_coverage,
        report.threshold
    );
    let _ = writeln!(s, "errored:   {}", report.errored);
    let _ = writeln!(s, "result:    {}", if report.pass { "PASS" } else { "FAIL" });
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: NoiseFamily) -> SyntheticSpec {
        SyntheticSpec {
            n: 50,
            d: 2,
            p: 2,
            design: DesignKind::Fixed,
            fstar: FstarFamily::Linear { mid: 0.0, scale: 1.0 },
            noise,
            potential: PotentialKind::SquaredL2,
            seed: 3,
        }
    }

    #[test]
    fn responses_reconstruct_and_zero_noise() {
        let (data, oracle) = generate_synthetic(&spec(NoiseFamily::Uniform { a: 0.5 })).unwrap();
        assert_eq!(
            data.responses(),
            &oracle.fstar_preds.values().add(&oracle.noise).unwrap()
        );
        let (data, oracle) = generate_synthetic(&spec(NoiseFamily::Uniform { a: 0.0 })).unwrap();
        assert_eq!(data.responses(), oracle.fstar_preds.values());
        assert_eq!(oracle.w_inf, 0.0);
    }

    #[test]
    fn rademacher_noise_has_constant_magnitude() {
        let (_, oracle) = generate_synthetic(&spec(NoiseFamily::ScaledRademacher { a: 0.3 })).unwrap();
        assert!(oracle.noise.as_slice().iter().all(|v| v.abs() == 0.3));
        assert_eq!(oracle.w_inf, 0.3);
    }

    #[test]
    fn domain_overflow_is_rejected() {
        let mut s = spec(NoiseFamily::Uniform { a: 0.3 });
        s.potential = PotentialKind::SqrtBernoulli { eps0: 0.05 };
        s.fstar = FstarFamily::Constant { mid: 0.9 };
        assert!(generate_synthetic(&s).is_err());
        s.fstar = FstarFamily::Constant { mid: 0.5 };
        assert!(generate_synthetic(&s).is_ok());
    }

    #[test]
    fn simplex_rows_keep_unit_mass() {
        let mut s = spec(NoiseFamily::Heteroskedastic { a: vec![0.05, 0.1, 0.02] });
        s.d = 3;
        s.potential = PotentialKind::ClippedSimplexKl { eta0: 0.01 };
        s.fstar = FstarFamily::Nonlinear { mid: 0.0, scale: 0.1 };
        let (data, _) = generate_synthetic(&s).unwrap();
        for row in data.responses().rows_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_design_shares_covariates_across_draws() {
        let model = SyntheticModel::new(&spec(NoiseFamily::Uniform { a: 0.2 })).unwrap();
        let (a, _) = model.sample(1).unwrap();
        let (b, _) = model.sample(2).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_ne!(a.responses(), b.responses());
        let mut s = spec(NoiseFamily::Uniform { a: 0.2 });
        s.design = DesignKind::Random;
        let model = SyntheticModel::new(&s).unwrap();
        assert_ne!(model.sample(1).unwrap().0.inputs(), model.sample(2).unwrap().0.inputs());
    }

    #[test]
    fn excess_risk_of_the_truth_is_zero() {
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, 2).unwrap();
        let (data, oracle) = generate_synthetic(&spec(NoiseFamily::Uniform { a: 0.4 })).unwrap();
        assert_eq!(realized_excess_risk(&loss, &data, &oracle.fstar_preds, &oracle).unwrap(), 0.0);
        // An interpolating fit has zero training error.
        let fhat = PredictionMatrix::unchecked(data.responses().clone());
        assert!(realized_excess_risk(&loss, &data, &fhat, &oracle).unwrap() <= 0.0);
    }

    #[test]
    fn theorem_labels_round_trip() {
        for t in [
            Theorem::WildOptimismDominates,
            Theorem::FixedDesignOptimism,
            Theorem::FixedDesignExcess,
            Theorem::NoiselessRadius,
            Theorem::RandomDesignExcess,
        ] {
            assert_eq!(Theorem::parse(t.label()).unwrap(), t);
        }
        assert!(Theorem::parse("thm_9").is_err());
    }

    #[test]
    fn zero_reps_rejected() {
        let exp = Experiment {
            name: None,
            theorem: Theorem::WildOptimismDominates,
            reps: 0,
            delta: 0.05,
            spec: spec(NoiseFamily::Uniform { a: 0.5 }),
            trainer: TrainerSpec::saturated(),
            set: None,
            radius_policy: RadiusPolicy::Oracle,
            rhos: default_rhos(),
            holdout: 10,
        };
        assert!(run_coverage(&exp, 1).is_err());
    }

    #[test]
    fn small_deterministic_run_passes_and_is_reproducible() {
        let exp = Experiment {
            name: None,
            theorem: Theorem::WildOptimismDominates,
            reps: 8,
            delta: 0.05,
            spec: spec(NoiseFamily::Uniform { a: 1.0 }),
            trainer: TrainerSpec::saturated(),
            set: Some(CompactSet::cube(2, -1.0, 1.0).unwrap()),
            radius_policy: RadiusPolicy::Oracle,
            rhos: default_rhos(),
            holdout: 10,
        };
        let a = run_coverage(&exp, 42).unwrap();
        assert!(a.pass, "{}", summary(&a));
        assert_eq!(a, run_coverage(&exp, 42).unwrap());
    }
}
