use proptest::prelude::*;
use wildrefit::complexity::WildNoiseComplexity;
use wildrefit::design::sample_sign_matrix;
use wildrefit::harness::{generate_synthetic, DesignKind, FstarFamily, NoiseFamily, SyntheticSpec};
use wildrefit::{BregmanLoss, CompactSet, Matrix, PotentialKind, PredictionMatrix};

fn simplex_point(raw: &[f64], eta: f64) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    let free = 1.0 - raw.len() as f64 * eta;
    raw.iter().map(|v| eta + free * v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn divergence_is_nonnegative_and_zero_on_diagonal(
        x in prop::collection::vec(0.05f64..0.95, 3),
        y in prop::collection::vec(0.05f64..0.95, 3),
    ) {
        let loss = BregmanLoss::builtin(PotentialKind::SqrtBernoulli { eps0: 0.05 }, 3).unwrap();
        prop_assert!(loss.divergence(&x, &y).unwrap() >= 0.0);
        prop_assert!(loss.divergence(&x, &x).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_divergence_is_nonnegative(
        a in prop::collection::vec(0.01f64..1.0, 4),
        b in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let loss = BregmanLoss::builtin(PotentialKind::ClippedSimplexKl { eta0: 0.01 }, 4).unwrap();
        let (p, q) = (simplex_point(&a, 0.01), simplex_point(&b, 0.01));
        prop_assert!(loss.divergence(&p, &q).unwrap() >= -1e-15);
    }

    #[test]
    fn projection_lands_in_set_and_is_idempotent(z in prop::collection::vec(-3.0f64..3.0, 3)) {
        for set in [CompactSet::cube(3, -1.0, 1.0).unwrap(), CompactSet::clipped_simplex(3, 0.05).unwrap()] {
            let p = set.project(&z);
            prop_assert!(set.contains(&p));
            let pp = set.project(&p);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sign_matrix_entries_are_unit(n in 1usize..50, d in 1usize..5, seed in any::<u64>()) {
        let s = sample_sign_matrix(n, d, seed);
        prop_assert!(s.values().as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        let again = sample_sign_matrix(n, d, seed);
        prop_assert_eq!(s.values().as_slice(), again.values().as_slice());
    }

    #[test]
    fn wn_is_nondecreasing_in_radius(seed in 0u64..1000, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let n = 20;
        let loss = BregmanLoss::builtin(PotentialKind::ClippedSimplexKl { eta0: 0.02 }, 3).unwrap();
        let set = CompactSet::clipped_simplex(3, 0.02).unwrap();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| simplex_point(&[next() + 0.1, next() + 0.1, next() + 0.1], 0.02)).collect();
        let fhat = PredictionMatrix::new(Matrix::from_rows(&rows, 3).unwrap(), &set).unwrap();
        let z = Matrix::from_fn(n, 3, |_, _| next() - 0.5);
        let cx = WildNoiseComplexity::new(&loss, &set, &fhat, &z).unwrap();
        let (a, b) = (cx.solve(lo).unwrap(), cx.solve(hi).unwrap());
        prop_assert!(a.value <= b.upper + 1e-9);
        prop_assert!(a.value <= a.upper + 1e-12);
    }
}

#[test]
fn zero_noise_gives_exact_regression() {
    let spec = SyntheticSpec {
        n: 50,
        d: 2,
        p: 2,
        design: DesignKind::Fixed,
        fstar: FstarFamily::Linear { mid: 0.0, scale: 1.0 },
        noise: NoiseFamily::Uniform { a: 0.0 },
        potential: PotentialKind::SquaredL2,
        seed: 1,
    };
    let (data, oracle) = generate_synthetic(&spec).unwrap();
    assert_eq!(data.responses(), oracle.fstar_preds.values());
    assert_eq!(oracle.w_inf, 0.0);
}

#[test]
fn rademacher_noise_has_constant_magnitude() {
    let spec = SyntheticSpec {
        n: 200,
        d: 3,
        p: 2,
        design: DesignKind::Random,
        fstar: FstarFamily::Constant { mid: 0.0 },
        noise: NoiseFamily::ScaledRademacher { a: 0.4 },
        potential: PotentialKind::SquaredL2,
        seed: 2,
    };
    let (_, oracle) = generate_synthetic(&spec).unwrap();
    assert!(oracle.noise.as_slice().iter().all(|v| (v.abs() - 0.4).abs() < 1e-15));
    assert!((oracle.w_inf - 0.4).abs() < 1e-15);
}
