use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use wildrefit::certify::{
    fixed_design_certificate, random_design_certificate, stability_constants, CertificateInputs,
};
use wildrefit::complexity::{
    fixed_point_radius, rhat_bound_convex, ConvexBoundInputs, FixedPointOptions, RadiusMethod,
    RadiusReport, WildNoiseComplexity,
};
use wildrefit::design::DatasetManifest;
use wildrefit::harness::{
    generate_synthetic, run_coverage, summary, write_report, DesignKind, Experiment, FstarFamily,
    NoiseFamily, SyntheticSpec, Theorem,
};
use wildrefit::wildfit::{calibrate_rho, wild_optimism, CalibrationOptions, ClipPolicy, WildRefitResult, WildRefitter};
use wildrefit::{BregmanLoss, CompactSet, FixedDesignDataset, PotentialKind, TrainerSpec};

#[derive(Parser)]
#[command(name = "wildrefit", version, about = "Wild-refitting excess-risk certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Fit, symmetrise residues and refit on wild responses.
    Refit(RefitArgs),
    /// Bound the noiseless estimation error from a refit.
    Radius(RadiusArgs),
    /// Assemble an excess-risk certificate.
    Certify(CertifyArgs),
    /// Run Monte Carlo coverage checks.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FstarArg {
    Constant,
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Uniform,
    Rademacher,
    Heteroskedastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Fixed,
    Random,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// TOML file holding a full synthetic spec; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// `squared_l2`, `sqrt_bernoulli:<eps0>` or `clipped_simplex_kl:<eta0>`.
    #[arg(long, default_value = "squared_l2")]
    potential: String,
    #[arg(long, value_enum, default_value = "linear")]
    fstar: FstarArg,
    #[arg(long, default_value_t = 0.0)]
    mid: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    noise: NoiseArg,
    /// Noise amplitude; comma-separated per coordinate for heteroskedastic noise.
    #[arg(long, default_value = "0.5")]
    amplitude: String,
    #[arg(long, value_enum, default_value = "fixed")]
    design: DesignArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainerArg {
    Saturated,
    Linear,
}

#[derive(clap::Args)]
struct SetArgs {
    #[arg(long, default_value = "squared_l2")]
    potential: String,
    /// Half-width of the cube constraint set for the squared loss; other
    /// potentials use their own domain.
    #[arg(long, default_value_t = 10.0)]
    half_width: f64,
}

#[derive(clap::Args)]
struct RefitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    set: SetArgs,
    #[arg(long, value_enum, default_value = "linear")]
    trainer: TrainerArg,
    #[arg(long, conflicts_with_all = ["target_radius", "radius_report"])]
    rho: Option<f64>,
    /// Calibrate the noise scale to this wild radius.
    #[arg(long, conflicts_with = "radius_report")]
    target_radius: Option<f64>,
    /// Calibrate to `3 sqrt(beta/alpha) r` for the report's certified radius.
    #[arg(long)]
    radius_report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RadiusMode {
    FixedPoint,
    ConvexClass,
}

#[derive(clap::Args)]
struct RadiusArgs {
    #[arg(long)]
    refit_result: PathBuf,
    /// Optional dataset, checked against the refit.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = (-9f64).exp())]
    delta: f64,
    #[arg(long, value_enum, default_value = "fixed-point")]
    mode: RadiusMode,
    /// Pilot error for the convex-class bound (plug-in 0 when absent).
    #[arg(long)]
    pilot: Option<f64>,
    /// Noise sup-norm (plug-in max |residue| when absent).
    #[arg(long)]
    w_inf: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CertifyMode {
    Fixed,
    Random,
}

#[derive(clap::Args)]
struct CertifyArgs {
    #[arg(long, value_enum, default_value = "fixed")]
    mode: CertifyMode,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long)]
    refit_result: PathBuf,
    #[arg(long)]
    radius_report: PathBuf,
    #[arg(long)]
    pilot: Option<f64>,
    #[arg(long)]
    misspec: Option<f64>,
    #[arg(long)]
    w_inf: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ValidateArgs {
    /// A theorem label, or `all`.
    #[arg(long, default_value = "all")]
    theorem: String,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with `[[experiment]]` tables merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "validate-out")]
    out: PathBuf,
}

/// Everything the later subcommands need from a refit.
#[derive(Serialize, Deserialize)]
struct RefitOutput {
    potential: PotentialKind,
    set: CompactSet,
    trainer: TrainerSpec,
    seed: u64,
    wild_optimism: f64,
    wild_radius: f64,
    training_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationSummary>,
    result: WildRefitResult,
}

#[derive(Serialize, Deserialize)]
struct CalibrationSummary {
    target_radius: f64,
    achieved_radius: f64,
    non_monotone: bool,
    trace: Vec<(f64, f64)>,
}

fn parse_potential(s: &str) -> Result<PotentialKind> {
    let (name, param) = match s.split_once(':') {
        Some((a, b)) => (a, Some(b.parse::<f64>().with_context(|| format!("bad parameter in {s:?}"))?)),
        None => (s, None),
    };
    Ok(match (name, param) {
        ("squared_l2", None) => PotentialKind::SquaredL2,
        ("sqrt_bernoulli", Some(eps0)) => PotentialKind::SqrtBernoulli { eps0 },
        ("clipped_simplex_kl", Some(eta0)) => PotentialKind::ClippedSimplexKl { eta0 },
        _ => bail!(
            "unknown potential {s:?}; use squared_l2, sqrt_bernoulli:<eps0> or clipped_simplex_kl:<eta0>"
        ),
    })
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SyntheticSpec>(&text).context("parsing synthetic spec")?
        }
        None => {
            let amps: Vec<f64> = args
                .amplitude
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .context("parsing --amplitude")?;
            let noise = match args.noise {
                NoiseArg::Uniform => NoiseFamily::Uniform { a: amps[0] },
                NoiseArg::Rademacher => NoiseFamily::ScaledRademacher { a: amps[0] },
                NoiseArg::Heteroskedastic => NoiseFamily::Heteroskedastic { a: amps },
            };
            let fstar = match args.fstar {
                FstarArg::Constant => FstarFamily::Constant { mid: args.mid },
                FstarArg::Linear => FstarFamily::Linear { mid: args.mid, scale: args.scale },
                FstarArg::Nonlinear => FstarFamily::Nonlinear { mid: args.mid, scale: args.scale },
            };
            SyntheticSpec {
                n: args.n,
                d: args.d,
                p: args.p,
                design: match args.design {
                    DesignArg::Fixed => DesignKind::Fixed,
                    DesignArg::Random => DesignKind::Random,
                },
                fstar,
                noise,
                potential: parse_potential(&args.potential)?,
                seed: args.seed,
            }
        }
    };
    let (data, oracle) = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out)?;
    data.save_csv(args.out.join("data.csv"))?;
    DatasetManifest {
        n: data.n(),
        d: data.d(),
        seed: spec.seed,
        potential: spec.potential,
    }
    .save(args.out.join("manifest.json"))?;
    write_json(
        &serde_json::json!({ "spec": spec, "oracle": oracle }),
        Some(&args.out.join("oracle.json")),
    )?;
    eprintln!("wrote {} rows to {}", data.n(), args.out.display());
    Ok(())
}

fn build_set(loss: &BregmanLoss, args: &SetArgs) -> Result<CompactSet> {
    Ok(CompactSet::default_for(loss, args.half_width)?)
}

fn refit(args: RefitArgs) -> Result<()> {
    let data = FixedDesignDataset::load_csv(&args.data)?;
    let potential = parse_potential(&args.set.potential)?;
    let loss = BregmanLoss::builtin(potential, data.d())?;
    let set = build_set(&loss, &args.set)?;
    let spec = match args.trainer {
        TrainerArg::Saturated => TrainerSpec::saturated(),
        TrainerArg::Linear => TrainerSpec::linear(),
    };
    let trainer = spec.build();
    let refitter = WildRefitter::new(&loss, &set, trainer.as_ref(), &data, args.seed, ClipPolicy::Auto)?;
    let target = match (&args.radius_report, args.target_radius) {
        (Some(path), _) => {
            let report: RadiusReport = read_json(path)?;
            Some(3.0 * loss.c0() * report.r_certified)
        }
        (None, t) => t,
    };
    let (result, calibration) = match (args.rho, target) {
        (Some(rho), _) => (refitter.refit(rho)?, None),
        (None, Some(target)) => {
            let opts = CalibrationOptions {
                tol_rel: args.tol,
                ..CalibrationOptions::default()
            };
            let cal = calibrate_rho(&refitter, target, &opts)?;
            let summary = CalibrationSummary {
                target_radius: target,
                achieved_radius: cal.achieved_radius,
                non_monotone: cal.non_monotone,
                trace: cal.trace,
            };
            (cal.result, Some(summary))
        }
        (None, None) => bail!("pass --rho, --target-radius or --radius-report"),
    };
    let out = RefitOutput {
        potential,
        set,
        trainer: spec,
        seed: args.seed,
        wild_optimism: wild_optimism(&loss, &result)?,
        wild_radius: result.wild_radius(&loss)?,
        training_error: result.training_error(&loss)?,
        calibration,
        result,
    };
    write_json(&out, Some(&args.out))
}

fn radius(args: RadiusArgs) -> Result<()> {
    let refit: RefitOutput = read_json(&args.refit_result)?;
    let res = &refit.result;
    let loss = BregmanLoss::builtin(refit.potential, res.fhat.d())?;
    if let Some(path) = &args.data {
        let data = FixedDesignDataset::load_csv(path)?;
        if data.responses() != &res.responses {
            bail!("{} does not match the responses stored in the refit", path.display());
        }
    }
    let z = res.symmetrized_residues()?;
    let wn = WildNoiseComplexity::new(&loss, &refit.set, &res.fhat, &z)?;
    let r_dia = res.wild_radius(&loss)?;
    let n = res.n();
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("delta".to_string(), format!("{:e}", args.delta));
    let (r, method) = match args.mode {
        RadiusMode::FixedPoint => {
            let r = fixed_point_radius(
                |q| wn.eval(q),
                args.delta,
                n,
                &FixedPointOptions::with_cap(wn.radius_cap()),
            )?;
            (r, RadiusMethod::FixedPoint)
        }
        RadiusMode::ConvexClass => {
            let w_inf = args.w_inf.unwrap_or_else(|| res.residues.max_abs());
            let pilot = args.pilot.unwrap_or(0.0);
            metadata.insert(
                "w_inf".into(),
                if args.w_inf.is_some() { "supplied" } else { "max_abs_residue" }.into(),
            );
            metadata.insert(
                "pilot".into(),
                if args.pilot.is_some() { "supplied" } else { "default_zero" }.into(),
            );
            metadata.insert("t".into(), "sqrt(log(1/delta))".into());
            let inputs = ConvexBoundInputs {
                r_diamond: r_dia,
                delta: args.delta,
                n,
                d: res.fhat.d(),
                w_inf,
                pilot,
            };
            let cap = 1e3 * (wn.radius_cap() + r_dia);
            let r = rhat_bound_convex(&loss, |q| wn.eval(q), &inputs, 1e-4, cap)?;
            (r, RadiusMethod::ConvexClassBound)
        }
    };
    let report = RadiusReport {
        r_hat_n: r,
        r_diamond_rho: r_dia,
        r_certified: r,
        method,
        metadata,
    };
    write_json(&report, args.out.as_deref())
}

fn certify(args: CertifyArgs) -> Result<()> {
    let refit: RefitOutput = read_json(&args.refit_result)?;
    let report: RadiusReport = read_json(&args.radius_report)?;
    let loss = BregmanLoss::builtin(refit.potential, refit.result.fhat.d())?;
    let inputs = CertificateInputs {
        pilot: args.pilot,
        misspec: args.misspec,
        w_inf: args.w_inf,
        ..CertificateInputs::plug_in(args.delta)
    };
    let fixed = fixed_design_certificate(&loss, &refit.result, &report, &inputs)?;
    let cert = match args.mode {
        CertifyMode::Fixed => fixed,
        CertifyMode::Random => {
            let n = refit.result.n();
            let consts = stability_constants(&loss, &refit.set, n)?;
            random_design_certificate(&fixed, &consts, n, args.delta)?
        }
    };
    write_json(&cert, args.out.as_deref())
}

#[derive(Deserialize, Default)]
struct ValidateConfig {
    seed: Option<u64>,
    #[serde(default)]
    experiment: Vec<toml::Table>,
}

/// Recursively overlays `over` on `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn experiment_from_table(table: toml::Table) -> Result<Experiment> {
    let label = table
        .get("theorem")
        .and_then(|v| v.as_str())
        .context("every [[experiment]] needs a theorem")?;
    let theorem = Theorem::parse(label)?;
    let mut base = toml::Table::try_from(Experiment::default_for(theorem))?;
    merge(&mut base, table);
    Ok(base.try_into()?)
}

fn validate(args: ValidateArgs) -> Result<bool> {
    let config: ValidateConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).context("parsing validate config")?
        }
        None => ValidateConfig::default(),
    };
    let mut experiments: Vec<Experiment> = if config.experiment.is_empty() {
        let all = [
            Theorem::WildOptimismDominates,
            Theorem::FixedDesignOptimism,
            Theorem::FixedDesignExcess,
            Theorem::NoiselessRadius,
            Theorem::RandomDesignExcess,
        ];
        all.into_iter().map(Experiment::default_for).collect()
    } else {
        config
            .experiment
            .into_iter()
            .map(experiment_from_table)
            .collect::<Result<_>>()?
    };
    if args.theorem != "all" {
        let wanted = Theorem::parse(&args.theorem)?;
        experiments.retain(|e| e.theorem == wanted);
        if experiments.is_empty() {
            bail!("no experiment configured for {}", args.theorem);
        }
    }
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let mut all_pass = true;
    for mut exp in experiments {
        if let Some(reps) = args.reps {
            exp.reps = reps;
        }
        if let Some(delta) = args.delta {
            exp.delta = delta;
        }
        let report = run_coverage(&exp, seed)?;
        write_report(&report, &args.out, &exp.stem())?;
        print!("{}", summary(&report));
        println!();
        all_pass &= report.pass;
    }
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Refit(a) => refit(a).map(|_| true),
        Command::Radius(a) => radius(a).map(|_| true),
        Command::Certify(a) => certify(a).map(|_| true),
        Command::Validate(a) => validate(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
