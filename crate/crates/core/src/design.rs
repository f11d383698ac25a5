//! Fixed-design datasets, prediction matrices, the constraint set and
//! seeded sign draws.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bregman::{BregmanLoss, Domain, PotentialKind, DOMAIN_TOL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `n` design points with `d`-dimensional responses. Inputs may have zero
/// columns when only the row index matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedDesignDataset {
    inputs: Matrix,
    responses: Matrix,
}

impl FixedDesignDataset {
    pub fn new(inputs: Matrix, responses: Matrix) -> Result<Self> {
        if responses.nrows() == 0 || responses.ncols() == 0 {
            return Err(Error::invalid("dataset needs n >= 1 and d >= 1"));
        }
        if inputs.nrows() != responses.nrows() {
            return Err(Error::invalid(format!(
                "{} inputs but {} responses",
                inputs.nrows(),
                responses.nrows()
            )));
        }
        if !responses.is_finite() || !inputs.is_finite() {
            return Err(Error::invalid("dataset contains non-finite entries"));
        }
        Ok(FixedDesignDataset { inputs, responses })
    }

    /// Dataset whose design points are opaque indices.
    pub fn indexed(responses: Matrix) -> Result<Self> {
        let n = responses.nrows();
        Self::new(Matrix::zeros(n, 0), responses)
    }

    pub fn n(&self) -> usize {
        self.responses.nrows()
    }

    pub fn d(&self) -> usize {
        self.responses.ncols()
    }

    /// Number of input features.
    pub fn p(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn responses(&self) -> &Matrix {
        &self.responses
    }

    /// Same design with replaced responses.
    pub fn with_responses(&self, responses: Matrix) -> Result<Self> {
        Self::new(self.inputs.clone(), responses)
    }

    /// Writes a CSV with header `x_1..x_p, y_1..y_d`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let header: Vec<String> = (1..=self.p())
            .map(|j| format!("x_{j}"))
            .chain((1..=self.d()).map(|j| format!("y_{j}")))
            .collect();
        writer.write_record(&header)?;
        for i in 0..self.n() {
            let record: Vec<String> = self
                .inputs
                .row(i)
                .iter()
                .chain(self.responses.row(i))
                .map(|v| format!("{v:?}"))
                .collect();
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let header = reader.headers()?.clone();
        let mut x_cols = Vec::new();
        let mut y_cols = Vec::new();
        for (k, name) in header.iter().enumerate() {
            let name = name.trim();
            if name.starts_with("x_") {
                x_cols.push(k);
            } else if name.starts_with("y_") {
                y_cols.push(k);
            } else {
                return Err(Error::invalid(format!("unexpected CSV column '{name}'")));
            }
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for record in reader.records() {
            let record = record?;
            let parse = |k: usize| -> Result<f64> {
                record[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad number '{}': {e}", &record[k])))
            };
            xs.push(x_cols.iter().map(|&k| parse(k)).collect::<Result<Vec<_>>>()?);
            ys.push(y_cols.iter().map(|&k| parse(k)).collect::<Result<Vec<_>>>()?);
        }
        Self::new(
            Matrix::from_rows(&xs, x_cols.len())?,
            Matrix::from_rows(&ys, y_cols.len())?,
        )
    }
}

/// Sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub potential: PotentialKind,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// The compact set every admissible prediction row must lie in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CompactSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    ClippedSimplex { dim: usize, eta: f64 },
}

impl CompactSet {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo; dim], vec![hi; dim])
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("box bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid("box needs finite lo_j < hi_j"));
        }
        Ok(CompactSet::Box { lo, hi })
    }

    pub fn clipped_simplex(dim: usize, eta: f64) -> Result<Self> {
        if dim < 2 || !(eta >= 0.0 && eta * (dim as f64) < 1.0) {
            return Err(Error::invalid(format!(
                "clipped simplex needs d >= 2 and 0 <= eta < 1/d (d = {dim}, eta = {eta})"
            )));
        }
        Ok(CompactSet::ClippedSimplex { dim, eta })
    }

    /// The natural constraint set for a loss: its own domain, or a box of
    /// half-width `half_width` for the unbounded squared loss.
    pub fn default_for(loss: &BregmanLoss, half_width: f64) -> Result<Self> {
        let d = loss.dim();
        match loss.potential().domain() {
            Domain::Unbounded => Self::cube(d, -half_width, half_width),
            Domain::Box { lo, hi } => Self::cube(d, lo, hi),
            Domain::ClippedSimplex { eta } => Self::clipped_simplex(d, eta),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CompactSet::Box { lo, .. } => lo.len(),
            CompactSet::ClippedSimplex { dim, .. } => *dim,
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        if z.len() != self.dim() {
            return false;
        }
        match self {
            CompactSet::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&v, (&a, &b))| v >= a - DOMAIN_TOL && v <= b + DOMAIN_TOL),
            CompactSet::ClippedSimplex { eta, .. } => {
                Domain::ClippedSimplex { eta: *eta }.contains(z)
            }
        }
    }

    /// True when `z` lies in the set with every box constraint slack.
    pub fn contains_interior(&self, z: &[f64]) -> bool {
        match self {
            CompactSet::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&v, (&a, &b))| v > a && v < b),
            CompactSet::ClippedSimplex { eta, .. } => {
                self.contains(z) && z.iter().all(|&v| v > *eta)
            }
        }
    }

    /// Euclidean projection.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        match self {
            CompactSet::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&a, &b))| v.clamp(a, b))
                .collect(),
            CompactSet::ClippedSimplex { eta, .. } => project_clipped_simplex(z, *eta),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            CompactSet::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt(),
            // Distance between two vertices eta + (1 - d eta) e_k.
            CompactSet::ClippedSimplex { dim, eta } => {
                (1.0 - *dim as f64 * eta) * 2f64.sqrt()
            }
        }
    }

    /// Checks that the set sits inside the loss domain so every divergence
    /// on it is certified.
    pub fn check_compatible(&self, loss: &BregmanLoss) -> Result<()> {
        if self.dim() != loss.dim() {
            return Err(Error::invalid(format!(
                "set dimension {} does not match loss dimension {}",
                self.dim(),
                loss.dim()
            )));
        }
        let ok = match (self, loss.potential().domain()) {
            (CompactSet::Box { .. }, Domain::Unbounded) => true,
            (CompactSet::Box { lo, hi }, Domain::Box { lo: a, hi: b }) => {
                lo.iter().all(|&v| v >= a) && hi.iter().all(|&v| v <= b)
            }
            (CompactSet::ClippedSimplex { eta, .. }, Domain::ClippedSimplex { eta: e0 }) => {
                *eta >= e0
            }
            (CompactSet::ClippedSimplex { .. }, Domain::Unbounded) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "constraint set {self:?} is not contained in the {} domain",
                loss.potential().kind().name()
            )))
        }
    }
}

/// Euclidean projection onto `{p : p_j >= eta, sum p_j = 1}` by the
/// sorted-threshold rule applied to `p - eta` on a simplex of mass
/// `1 - d eta`.
pub fn project_clipped_simplex(z: &[f64], eta: f64) -> Vec<f64> {
    let d = z.len();
    let mass = 1.0 - d as f64 * eta;
    let shifted: Vec<f64> = z.iter().map(|v| v - eta).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - mass) / (k + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    shifted.iter().map(|v| (v - theta).max(0.0) + eta).collect()
}

/// The values of a predictor on the design, one row per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionMatrix(Matrix);

impl PredictionMatrix {
    /// Wraps `values`, checking every row lies in `set`.
    pub fn new(values: Matrix, set: &CompactSet) -> Result<Self> {
        if values.ncols() != set.dim() {
            return Err(Error::invalid("prediction width does not match the set dimension"));
        }
        for (i, row) in values.rows_iter().enumerate() {
            if !set.contains(row) {
                return Err(Error::invalid(format!(
                    "prediction row {i} = {row:?} lies outside the constraint set"
                )));
            }
        }
        Ok(PredictionMatrix(values))
    }

    /// Wraps values without a set check (oracle quantities such as `f*`
    /// only need to lie in the loss domain).
    pub fn unchecked(values: Matrix) -> Self {
        PredictionMatrix(values)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }
}

/// `(1/n) sum_i D_phi(F_i, G_i)`.
pub fn empirical_discrepancy(
    loss: &BregmanLoss,
    f: &PredictionMatrix,
    g: &PredictionMatrix,
) -> Result<f64> {
    matrix_discrepancy(loss, f.values(), g.values())
}

pub(crate) fn matrix_discrepancy(loss: &BregmanLoss, f: &Matrix, g: &Matrix) -> Result<f64> {
    f.ensure_same_shape(g)?;
    if f.nrows() == 0 {
        return Err(Error::invalid("empty prediction matrices"));
    }
    let mut total = 0.0;
    for i in 0..f.nrows() {
        total += loss.divergence(f.row(i), g.row(i))?;
    }
    Ok(total / f.nrows() as f64)
}

/// Rademacher signs for the wild responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignMatrix {
    values: Matrix,
    seed: u64,
}

impl SignMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `eps ⊙ m`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.values.hadamard(m)
    }

    pub fn negated(&self) -> SignMatrix {
        SignMatrix {
            values: self.values.map(|v| -v),
            seed: self.seed,
        }
    }

    /// All-ones signs, used to evaluate un-symmetrised processes.
    pub fn ones(n: usize, d: usize) -> SignMatrix {
        SignMatrix {
            values: Matrix::from_fn(n, d, |_, _| 1.0),
            seed: 0,
        }
    }

    pub fn from_matrix(values: Matrix, seed: u64) -> Result<Self> {
        if values.as_slice().iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::invalid("sign matrix entries must be exactly +1 or -1"));
        }
        Ok(SignMatrix { values, seed })
    }
}

pub fn sample_sign_matrix(n: usize, d: usize, seed: u64) -> SignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Matrix::from_fn(n, d, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
    SignMatrix { values, seed }
}

/// Mixes a root seed with a stream tag and an index (SplitMix64 finaliser),
/// so replication `k` gets the same seed regardless of execution order.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(root) ^ stream) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::PotentialKind;

    fn pm(rows: &[Vec<f64>]) -> PredictionMatrix {
        PredictionMatrix::unchecked(Matrix::from_rows(rows, rows[0].len()).unwrap())
    }

    #[test]
    fn squared_discrepancy_by_hand() {
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, 1).unwrap();
        let f = pm(&[vec![0.0], vec![0.0]]);
        let g = pm(&[vec![2.0], vec![4.0]]);
        assert!((empirical_discrepancy(&loss, &f, &g).unwrap() - 5.0).abs() < 1e-14);
        assert_eq!(empirical_discrepancy(&loss, &f, &f).unwrap(), 0.0);
    }

    #[test]
    fn sqrt_bernoulli_discrepancy_matches_row_loop() {
        let loss = BregmanLoss::builtin(PotentialKind::SqrtBernoulli { eps0: 0.1 }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = |rng: &mut ChaCha8Rng| {
            (0..20)
                .map(|_| vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)])
                .collect::<Vec<_>>()
        };
        let (a, b) = (rows(&mut rng), rows(&mut rng));
        let oracle: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(&p1, &p2): (&f64, &f64)| {
                        (p1.sqrt() - p2.sqrt()).powi(2) / (2.0 * p2.sqrt())
                            + ((1.0 - p1).sqrt() - (1.0 - p2).sqrt()).powi(2)
                                / (2.0 * (1.0 - p2).sqrt())
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 20.0;
        let got = empirical_discrepancy(&loss, &pm(&a), &pm(&b)).unwrap();
        assert!((got - oracle).abs() < 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let loss = BregmanLoss::builtin(PotentialKind::SquaredL2, 1).unwrap();
        let f = pm(&[vec![0.0], vec![0.0]]);
        let g = pm(&[vec![0.0]]);
        assert!(matches!(
            empirical_discrepancy(&loss, &f, &g),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sign_matrix_is_deterministic_and_binary() {
        let a = sample_sign_matrix(30, 3, 42);
        let b = sample_sign_matrix(30, 3, 42);
        assert_eq!(a, b);
        assert!(a.values().as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_ne!(a, sample_sign_matrix(30, 3, 43));
    }

    #[test]
    fn sign_matrix_mean_is_centred() {
        let s = sample_sign_matrix(10_000, 1, 5);
        let mean: f64 = s.values().as_slice().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() <= 4.0 / 100.0, "mean {mean}");
    }

    #[test]
    fn box_projection() {
        let set = CompactSet::cube(1, 0.0, 1.0).unwrap();
        assert_eq!(set.project(&[0.5]), vec![0.5]);
        assert_eq!(set.project(&[1.7]), vec![1.0]);
        assert_eq!(set.project(&[-3.0]), vec![0.0]);
    }

    #[test]
    fn clipped_simplex_projection_matches_grid_search() {
        let set = CompactSet::clipped_simplex(2, 0.1).unwrap();
        let z = [0.95, 0.05];
        // Brute force over the feasible segment (p, 1 - p), p in [0.1, 0.9].
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=80_000 {
            let p = 0.1 + 0.8 * k as f64 / 80_000.0;
            let dist = (z[0] - p).powi(2) + (z[1] - (1.0 - p)).powi(2);
            if dist < best.0 {
                best = (dist, p);
            }
        }
        assert!((best.1 - 0.9).abs() < 1e-4);
        let got = set.project(&z);
        assert!((got[0] - 0.9).abs() < 1e-12 && (got[1] - 0.1).abs() < 1e-12, "{got:?}");
    }

    #[test]
    fn projection_is_idempotent_on_simplex() {
        let set = CompactSet::clipped_simplex(4, 0.05).unwrap();
        let once = set.project(&[0.7, -0.2, 0.9, 0.1]);
        assert!(set.contains(&once));
        let twice = set.project(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = FixedDesignDataset::new(
            Matrix::from_rows(&[vec![0.1, -2.0], vec![1.0 / 3.0, 4.5]], 2).unwrap(),
            Matrix::from_rows(&[vec![0.7], vec![-1e-17]], 1).unwrap(),
        )
        .unwrap();
        data.save_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x_1,x_2,y_1\n"));
        assert_eq!(FixedDesignDataset::load_csv(&path).unwrap(), data);
    }

    #[test]
    fn dataset_rejects_non_finite_and_empty() {
        let bad = Matrix::from_rows(&[vec![f64::NAN]], 1).unwrap();
        assert!(FixedDesignDataset::indexed(bad).is_err());
        assert!(FixedDesignDataset::indexed(Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_index_and_stream() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }
}
