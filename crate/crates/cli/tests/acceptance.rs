//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line (visible with `--nocapture`) before asserting.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildrefit::certify::{random_design_addend, random_design_certificate, DesignMode, RiskCertificate, StabilityConstants};
use wildrefit::complexity::{wn, WildNoiseComplexity};
use wildrefit::design::sample_sign_matrix;
use wildrefit::harness::{
    generate_synthetic, run_coverage, write_report, CoverageReport, DesignKind, Experiment, FstarFamily,
    NoiseFamily, SyntheticSpec, Theorem,
};
use wildrefit::trainer::{LinearTrainer, SaturatedTrainer};
use wildrefit::wildfit::{calibrate_rho, CalibrationOptions, ClipPolicy, WildRefitter};
use wildrefit::{
    BregmanLoss, CompactSet, FixedDesignDataset, Matrix, PotentialKind, PredictionMatrix, Trainer, TrainerSpec,
};

const ROOT_SEED: u64 = 0;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} {detail}");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn potentials() -> [PotentialKind; 3] {
    [
        PotentialKind::SquaredL2,
        PotentialKind::SqrtBernoulli { eps0: 0.05 },
        PotentialKind::ClippedSimplexKl { eta0: 0.02 },
    ]
}

fn random_point(kind: PotentialKind, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        PotentialKind::SquaredL2 => (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        PotentialKind::SqrtBernoulli { eps0 } => (0..d).map(|_| rng.gen_range(eps0..1.0 - eps0)).collect(),
        PotentialKind::ClippedSimplexKl { eta0 } => {
            let e: Vec<f64> = (0..d).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
            let s: f64 = e.iter().sum();
            let free = 1.0 - d as f64 * eta0;
            e.iter().map(|v| eta0 + free * v / s).collect()
        }
    }
}

fn dim_for(kind: PotentialKind, rng: &mut ChaCha8Rng) -> usize {
    match kind {
        PotentialKind::ClippedSimplexKl { .. } => rng.gen_range(2..=4),
        _ => rng.gen_range(1..=4),
    }
}

/// Default experiments for every claim, run once and shared.
fn default_reports() -> &'static BTreeMap<String, (Experiment, CoverageReport)> {
    static CELL: OnceLock<BTreeMap<String, (Experiment, CoverageReport)>> = OnceLock::new();
    CELL.get_or_init(|| {
        [
            Theorem::WildOptimismDominates,
            Theorem::FixedDesignOptimism,
            Theorem::FixedDesignExcess,
            Theorem::NoiselessRadius,
            Theorem::RandomDesignExcess,
        ]
        .into_iter()
        .map(|t| {
            let exp = Experiment::default_for(t);
            let rep = run_coverage(&exp, ROOT_SEED).expect("coverage run");
            (exp.stem(), (exp, rep))
        })
        .collect()
    })
}

fn coverage_line(r: &CoverageReport) -> String {
    format!(
        "{}/{} = {:.4} (threshold {:.4}, errored {})",
        r.successes, r.replications, r.empirical_coverage, r.threshold, r.errored
    )
}

#[test]
fn criterion_01_bregman_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    for kind in potentials() {
        let mut bad = [0usize; 5];
        for _ in 0..1000 {
            let d = dim_for(kind, &mut rng);
            let loss = BregmanLoss::builtin(kind, d).unwrap();
            let (x, y, z) = (
                random_point(kind, d, &mut rng),
                random_point(kind, d, &mut rng),
                random_point(kind, d, &mut rng),
            );
            let dv = |a: &[f64], b: &[f64]| loss.divergence(a, b).unwrap();

            // Three-point equality.
            let gy = loss.potential().gradient(&y).unwrap();
            let gz = loss.potential().gradient(&z).unwrap();
            let cross: f64 = (0..d).map(|j| (gy[j] - gz[j]) * (x[j] - y[j])).sum();
            let (lhs, rhs) = (dv(&x, &z), dv(&x, &y) + dv(&y, &z) + cross);
            let scale = dv(&x, &z).abs() + dv(&x, &y).abs() + dv(&y, &z).abs() + cross.abs();
            if (lhs - rhs).abs() > 1e-9 * scale.max(1e-300) {
                bad[0] += 1;
            }

            // Smoothness of the first-argument gradient.
            let g1 = loss.grad1_divergence(&x, &y).unwrap();
            let g2 = loss.grad1_divergence(&z, &y).unwrap();
            let diff: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
            let step: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            if norm(&diff) > loss.beta() * norm(&step) * (1.0 + 1e-9) + 1e-9 {
                bad[1] += 1;
            }

            // Polyak-Lojasiewicz.
            let pl_lhs = 0.5 * norm(&g1).powi(2);
            let pl_rhs = loss.alpha().powi(2) / loss.beta() * dv(&x, &y);
            if pl_lhs < pl_rhs * (1.0 - 1e-9) - 1e-9 {
                bad[2] += 1;
            }

            // Quasi-triangle.
            if dv(&x, &y).sqrt() > loss.c0() * (dv(&x, &z).sqrt() + dv(&z, &y).sqrt()) + 1e-9 {
                bad[3] += 1;
            }

            // Empirical quasi-triangle on small prediction matrices.
            let n = rng.gen_range(1..=8);
            let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| random_point(kind, d, rng)).collect() };
            let (f, g, h) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
            let ln = |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().zip(b).map(|(u, v)| dv(u, v)).sum::<f64>() / n as f64;
            let b4_rhs = 2f64.sqrt() * loss.c0() * (ln(&f, &h).sqrt() + ln(&h, &g).sqrt());
            if ln(&f, &g).sqrt() > b4_rhs + 1e-9 {
                bad[4] += 1;
            }
        }
        if bad.iter().any(|&b| b > 0) {
            failures.push(format!("{}: {:?}", kind.name(), bad));
        }
    }
    let ok = failures.is_empty();
    report(1, "Bregman identities", ok, &format!("3 potentials x 1000 instances; failures {failures:?}"));
    assert!(ok);
}

#[test]
fn criterion_02_wn_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=200);
        let d = rng.gen_range(1..=4);
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, d).unwrap();
        let set = CompactSet::cube(d, -1e3, 1e3).unwrap();
        let center = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let fhat = PredictionMatrix::new(center, &set).unwrap();
        let z = Matrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
        let r = rng.gen_range(0.01..2.0);
        let exact = r * (2.0 / n as f64).sqrt() * z.frobenius_norm();
        let got = wn(&loss, &set, &fhat, &z, r).unwrap().value;
        worst = worst.max(((got - exact) / exact).abs());
    }
    let ok = worst <= 1e-6;
    report(2, "W_n closed form", ok, &format!("100 instances, worst relative error {worst:.3e}"));
    assert!(ok);
}

#[test]
fn criterion_03_wild_optimism_dominates() {
    let saturated = &default_reports()["lemma_5_1"].1;
    let mut linear_exp = Experiment::default_for(Theorem::WildOptimismDominates);
    linear_exp.name = Some("lemma_5_1_linear".into());
    linear_exp.trainer = TrainerSpec::linear();
    linear_exp.set = Some(CompactSet::cube(2, -10.0, 10.0).unwrap());
    let linear = run_coverage(&linear_exp, ROOT_SEED).unwrap();
    let ok = saturated.pass && linear.pass && saturated.replications == 500 && linear.replications == 500;
    report(
        3,
        "wild optimism dominates W_n",
        ok,
        &format!("saturated {}; linear {}", coverage_line(saturated), coverage_line(&linear)),
    );
    assert!(ok);
}

#[test]
fn criterion_04_scale_concavity() {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (n, d) = (rng.gen_range(10..=100), rng.gen_range(1..=3));
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, d).unwrap();
        let c0 = loss.c0();
        let z = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let fro = z.frobenius_norm();
        let exact = |r: f64| r * (2.0 / n as f64).sqrt() * fro;
        // A tight box so the numerical solver saturates on the upper grid.
        let set = CompactSet::cube(d, -1.0, 1.0).unwrap();
        let fhat =
            PredictionMatrix::new(Matrix::from_fn(n, d, |_, _| rng.gen_range(-0.5..0.5)), &set).unwrap();
        let cx = WildNoiseComplexity::new(&loss, &set, &fhat, &z).unwrap();
        let grid: Vec<f64> = (0..10).map(|k| 0.01 * 2f64.powi(k)).collect();
        let solved: Vec<f64> = grid.iter().map(|&r| cx.eval(r).unwrap()).collect();
        let solved_c0: Vec<f64> = grid.iter().map(|&r| cx.eval(c0 * r).unwrap()).collect();
        for (i, &u) in grid.iter().enumerate() {
            for (j, &v) in grid.iter().enumerate().skip(i) {
                worst = worst.max(exact(v) / v - exact(c0 * u) / u);
                worst = worst.max(solved[j] / v - solved_c0[i] / u);
            }
        }
    }
    let ok = worst <= 1e-8;
    report(4, "scale concavity", ok, &format!("50 seeds, worst excess {worst:.3e}"));
    assert!(ok);
}

#[test]
fn criterion_05_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = CalibrationOptions::default();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let (n, d) = (rng.gen_range(20..=80), rng.gen_range(1..=3));
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, d).unwrap();
        let set = CompactSet::cube(d, -10.0, 10.0).unwrap();
        let x = Matrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = Matrix::from_fn(n, d, |r, _| x.get(r, 0) - 0.5 * x.get(r, 1) + rng.gen_range(-0.5..0.5));
        let data = FixedDesignDataset::new(x, y).unwrap();
        let trainer = LinearTrainer::default();
        let refitter = WildRefitter::new(&loss, &set, &trainer, &data, i, ClipPolicy::Auto).unwrap();
        let target = rng.gen_range(0.02..0.3);
        let cal = calibrate_rho(&refitter, target, &opts).unwrap();
        worst = worst.max((cal.achieved_radius - target).abs() / target);
    }

    // Saturated refit around an external fit: radius = rho * c exactly.
    let mut worst_rho: f64 = 0.0;
    for i in 0..10u64 {
        let n = 40;
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, 2).unwrap();
        let set = CompactSet::cube(2, -100.0, 100.0).unwrap();
        let x = Matrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = Matrix::from_fn(n, 2, |r, c| x.get(r, c) + rng.gen_range(-0.3..0.3));
        let data = FixedDesignDataset::new(x, y).unwrap();
        let fhat = LinearTrainer::default().fit(&loss, &set, &data).unwrap();
        let sat = SaturatedTrainer::default();
        let refitter =
            WildRefitter::with_fit(&loss, &set, &sat, &data, fhat, sample_sign_matrix(n, 2, i), ClipPolicy::Never)
                .unwrap();
        let w = refitter.residues();
        let c = (w.rows_iter().map(|r| norm(r).powi(2)).sum::<f64>() / (2.0 * n as f64)).sqrt();
        let target = rng.gen_range(0.05..0.5);
        let cal = calibrate_rho(&refitter, target, &opts).unwrap();
        worst_rho = worst_rho.max(((cal.rho - target / c) / (target / c)).abs());
    }
    let ok = worst <= 1e-3 && worst_rho <= 1e-3;
    report(
        5,
        "calibration",
        ok,
        &format!("worst radius error {worst:.3e} over 100; worst analytic rho error {worst_rho:.3e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_fixed_design_coverage() {
    let reps = default_reports();
    let opt = &reps["thm_5_1_optimism"].1;
    let exc = &reps["thm_5_1_excess"].1;
    let ok = opt.pass && exc.pass && opt.empirical_coverage >= 0.95 && exc.empirical_coverage >= 0.95;
    report(
        6,
        "fixed-design coverage",
        ok,
        &format!("optimism {}; excess {}", coverage_line(opt), coverage_line(exc)),
    );
    assert!(ok);
}

#[test]
fn criterion_07_noiseless_radius_coverage() {
    let r = &default_reports()["thm_6_1_rhat"].1;
    let ok = r.pass && r.replications == 200;
    report(7, "noiseless radius coverage", ok, &coverage_line(r));
    assert!(ok);
}

#[test]
fn criterion_08_random_design() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/addend_oracle.csv"))
        .unwrap();
    let mut worst: f64 = 0.0;
    let mut assembly_ok = true;
    let mut points = 0;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (m, l, alpha, n, delta, expected) = (f[0], f[1], f[2], f[3] as usize, f[4], f[5]);
        let consts = StabilityConstants::new(m, l, alpha, n).unwrap();
        let got = random_design_addend(&consts, n, delta).unwrap();
        worst = worst.max(((got - expected) / expected).abs());

        let fixed = RiskCertificate {
            training_error: 0.1,
            wild_optimism_abs: 0.2,
            pilot: 0.0,
            deviation: 0.05,
            stability_addend: 0.0,
            total: 0.1 + 2.0 * 0.25,
            delta,
            failure_budget: 8.0 * delta,
            mode: DesignMode::FixedDesign,
            provenance: BTreeMap::new(),
        };
        let random = random_design_certificate(&fixed, &consts, n, delta).unwrap();
        assembly_ok &= ((random.total - (fixed.total + expected)) / random.total).abs() <= 1e-12;
        points += 1;
    }
    let cov = &default_reports()["thm_5_2_excess"].1;
    let ok = points == 20 && worst <= 1e-12 && assembly_ok && cov.pass && cov.replications == 300;
    report(
        8,
        "random-design assembly and coverage",
        ok,
        &format!("{points} points, worst relative error {worst:.3e}, assembly {assembly_ok}; {}", coverage_line(cov)),
    );
    assert!(ok);
}

#[test]
fn criterion_09_conditional_mean() {
    let n = 100_000;
    let mut details = Vec::new();
    let mut ok = true;
    for (noise, amps) in [
        (NoiseFamily::Uniform { a: 0.5 }, [0.5, 0.5]),
        (NoiseFamily::ScaledRademacher { a: 0.3 }, [0.3, 0.3]),
        (NoiseFamily::Heteroskedastic { a: vec![0.2, 0.8] }, [0.2, 0.8]),
    ] {
        let spec = SyntheticSpec {
            n,
            d: 2,
            p: 2,
            design: DesignKind::Fixed,
            fstar: FstarFamily::Nonlinear { mid: 0.0, scale: 1.0 },
            noise,
            potential: PotentialKind::SquaredL2,
            seed: 9,
        };
        let (data, oracle) = generate_synthetic(&spec).unwrap();
        for (j, a) in amps.into_iter().enumerate() {
            let band = 4.0 * a / (n as f64).sqrt();
            let mean = (0..n)
                .map(|i| data.responses().get(i, j) - oracle.fstar_preds.values().get(i, j))
                .sum::<f64>()
                / n as f64;
            ok &= mean.abs() <= band;
            details.push(format!("{mean:+.2e}/{band:.2e}"));
        }
    }
    report(9, "conditional mean", ok, &details.join(" "));
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let in_process = tempfile::tempdir().unwrap();
    for (exp, rep) in default_reports().values() {
        write_report(rep, in_process.path(), &exp.stem()).unwrap();
    }
    let cli = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_wildrefit"))
        .args(["validate", "--seed", &ROOT_SEED.to_string(), "--out"])
        .arg(cli.path())
        .output()
        .unwrap();
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for entry in std::fs::read_dir(in_process.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let ext = Path::new(&name).extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "csv" && ext != "json" {
            continue;
        }
        let a = std::fs::read(in_process.path().join(&name)).unwrap();
        let b = std::fs::read(cli.path().join(&name)).unwrap_or_default();
        compared += 1;
        if a != b {
            mismatched.push(name.to_string_lossy().into_owned());
        }
    }
    let ok = status.status.success() && compared == 10 && mismatched.is_empty();
    report(
        10,
        "determinism",
        ok,
        &format!("{compared} files compared, exit {:?}, mismatched {mismatched:?}", status.status.code()),
    );
    assert!(ok);
}
