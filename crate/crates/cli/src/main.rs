mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use error::CliError;
use flurlab::experiments::{run, run_timed, ExperimentConfig, ExperimentReport};
use flurlab::kernel::{asymptotic_variance, priestley_chao, KernelName, KernelSpec};
use flurlab::numerics::{with_threads, SeedTree};
use flurlab::piecewise::{asymptotic_covariance, fit, PiecewiseModel, SigmaForm};
use flurlab::process::{simulate, theoretical_acvf, ProcessSpec, RegimeClass, TemperingRegime};
use flurlab::tfbm::{sample_path_cholesky, TfbmParams};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "flurlab", version, about = "Tempered linear processes and regression under semi-long memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate X(1..n) and write `j,x` CSV.
    Simulate(ProcessArgs),
    /// Theoretical autocovariances as `lag,gamma` CSV.
    Acvf(ProcessArgs),
    /// Exact TFBMII path on an even grid of [0, t_max] as `t,value` CSV.
    Tfbm(TfbmArgs),
    /// Limiting variance of the kernel estimator, or Λ, Σ and ΛΣΛ of the knot model, as JSON.
    Variance(VarianceArgs),
    /// Priestley–Chao estimate on a grid from a CSV column.
    FitKernel(FitKernelArgs),
    /// Piecewise polynomial fit with one unknown knot, JSON out.
    FitKnot(FitKnotArgs),
    /// Run an experiment config; JSON report, optional CSV table.
    Experiment(ExperimentArgs),
    /// Quick numerical self-checks.
    Selftest,
}

/// Process parameters; `--config` supplies defaults that flags override.
#[derive(Args, Clone)]
#[command(allow_negative_numbers = true)]
struct ProcessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<f64>,
    /// Tempering λ used as is.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Path length (simulate) or number of lags + 1 (acvf).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcessFile {
    d: Option<f64>,
    lambda: Option<f64>,
    sigma: Option<f64>,
    n: Option<usize>,
    seed: Option<u64>,
}

struct ProcessSettings {
    spec: ProcessSpec,
    n: usize,
    seed: u64,
}

impl ProcessArgs {
    fn resolve(&self) -> Result<ProcessSettings, CliError> {
        let file: ProcessFile = match &self.config {
            Some(p) => read_toml(p)?,
            None => ProcessFile::default(),
        };
        let d = self.d.or(file.d).ok_or_else(|| CliError::Argument("--d is required".into()))?;
        let lambda = self.lambda.or(file.lambda).unwrap_or(0.0);
        let sigma = self.sigma.or(file.sigma).unwrap_or(1.0);
        let n = self.n.or(file.n).ok_or_else(|| CliError::Argument("--n is required".into()))?;
        let seed = self.seed.or(file.seed).unwrap_or(0);
        if n == 0 {
            return Err(CliError::Argument("--n must be >= 1".into()));
        }
        Ok(ProcessSettings { spec: ProcessSpec::new(d, lambda, sigma)?, n, seed })
    }
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TfbmArgs {
    #[arg(long)]
    d: f64,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    t_max: f64,
    /// Number of grid intervals.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Weak,
    Moderate,
    Strong,
}

impl From<CaseArg> for RegimeClass {
    fn from(c: CaseArg) -> Self {
        match c {
            CaseArg::Weak => RegimeClass::Weak,
            CaseArg::Moderate => RegimeClass::Moderate,
            CaseArg::Strong => RegimeClass::Strong,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Epanechnikov,
    Biweight,
    Triweight,
    Cosine,
}

impl From<KernelArg> for KernelName {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Epanechnikov => KernelName::Epanechnikov,
            KernelArg::Biweight => KernelName::Biweight,
            KernelArg::Triweight => KernelName::Triweight,
            KernelArg::Cosine => KernelName::Cosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaFormArg {
    Operator,
    ClosedForm,
    PrintedClosedForm,
    ProductOfIntegrals,
    WhiteNoise,
}

impl From<SigmaFormArg> for SigmaForm {
    fn from(s: SigmaFormArg) -> Self {
        match s {
            SigmaFormArg::Operator => SigmaForm::Operator,
            SigmaFormArg::ClosedForm => SigmaForm::ClosedForm,
            SigmaFormArg::PrintedClosedForm => SigmaForm::PrintedClosedForm,
            SigmaFormArg::ProductOfIntegrals => SigmaForm::ProductOfIntegrals,
            SigmaFormArg::WhiteNoise => SigmaForm::WhiteNoise,
        }
    }
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct VarianceArgs {
    #[arg(long, value_enum)]
    case: CaseArg,
    #[arg(long)]
    d: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_star: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "epanechnikov")]
    kernel: KernelArg,
    /// With --q, --p, --eta and --a: Λ, Σ and ΛΣΛ of the knot model instead.
    #[arg(long, requires_all = ["p", "eta", "a"])]
    q: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    a: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    sigma_form: Option<SigmaFormArg>,
}

#[derive(Args)]
struct FitKernelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Column to smooth; defaults to `y` when present, else the last column.
    #[arg(long)]
    column: Option<String>,
    /// Bandwidth; defaults to N^{-1/5}.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, value_enum, default_value = "epanechnikov")]
    kernel: KernelArg,
    #[arg(long, default_value_t = 101)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitKnotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    column: Option<String>,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    p: usize,
    /// Omit the coarse (η, rss) profile from the output.
    #[arg(long)]
    no_profile: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `test,statistic,target,threshold,pass` table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record wall-clock runtime in the report (breaks byte-reproducibility).
    #[arg(long)]
    timing: bool,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::ConfigNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::ConfigInvalid { path: path.to_path_buf(), message: e.to_string() })
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn csv_writer(out: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    Ok(csv::Writer::from_writer(sink(out)?))
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

fn write_json<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_column(path: &Path, column: Option<&str>) -> Result<Vec<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::InputNotFound(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::InputInvalid(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| CliError::InputInvalid(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(CliError::InputInvalid("missing header row".into()));
    }
    let idx = match column {
        Some(c) => headers.iter().position(|h| h == c).ok_or_else(|| CliError::InputInvalid(format!("no column named {c}")))?,
        None => headers.iter().position(|h| h == "y").unwrap_or(headers.len() - 1),
    };
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::InputInvalid(e.to_string()))?;
        let field = rec.get(idx).ok_or_else(|| CliError::InputInvalid(format!("row {} is short", line + 2)))?;
        let v: f64 = field.trim().parse().map_err(|_| CliError::InputInvalid(format!("row {}: not a number: {field}", line + 2)))?;
        if !v.is_finite() {
            return Err(CliError::InputInvalid(format!("row {}: value is not finite", line + 2)));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(CliError::InputInvalid("no data rows".into()));
    }
    Ok(values)
}

fn cmd_simulate(args: &ProcessArgs) -> Result<(), CliError> {
    let s = args.resolve()?;
    let path = simulate(&s.spec, &TemperingRegime::fixed(s.spec.lambda), s.n, &SeedTree::new(s.seed))?;
    let mut w = csv_writer(&args.out)?;
    w.write_record(["j", "x"]).map_err(csv_err)?;
    for (j, x) in path.values.iter().enumerate() {
        w.write_record([(j + 1).to_string(), float(*x)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_acvf(args: &ProcessArgs) -> Result<(), CliError> {
    let s = args.resolve()?;
    let g = theoretical_acvf(&s.spec, s.n - 1)?;
    let mut w = csv_writer(&args.out)?;
    w.write_record(["lag", "gamma"]).map_err(csv_err)?;
    for (h, v) in g.iter().enumerate() {
        w.write_record([h.to_string(), float(*v)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_tfbm(args: &TfbmArgs) -> Result<(), CliError> {
    if !(args.t_max > 0.0) || args.points == 0 {
        return Err(CliError::Argument("need --t-max > 0 and --points >= 1".into()));
    }
    let params = TfbmParams::new(args.d, args.lambda, args.sigma2)?;
    let times: Vec<f64> = (0..=args.points).map(|i| args.t_max * i as f64 / args.points as f64).collect();
    let path = sample_path_cholesky(&params, &times, &SeedTree::new(args.seed))?;
    let mut w = csv_writer(&args.out)?;
    w.write_record(["t", "value"]).map_err(csv_err)?;
    for (t, v) in path.times.iter().zip(&path.values) {
        w.write_record([float(*t), float(*v)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct KnotVariance {
    rate_exponent: f64,
    lambda: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
}

fn cmd_variance(args: &VarianceArgs) -> Result<(), CliError> {
    let case: RegimeClass = args.case.into();
    let sigma2 = args.sigma * args.sigma;
    if let (Some(q), Some(p), Some(eta), Some(a)) = (args.q, args.p, args.eta, args.a.clone()) {
        let model = PiecewiseModel::new(q, p, eta, a)?;
        let form = args.sigma_form.map(SigmaForm::from).unwrap_or(match case {
            RegimeClass::Strong => SigmaForm::ProductOfIntegrals,
            _ => SigmaForm::Operator,
        });
        let law = asymptotic_covariance(&model, case, form, args.d, args.lambda_star, sigma2)?;
        return write_json(
            &KnotVariance {
                rate_exponent: law.rate_exponent,
                lambda: law.lambda_matrix.to_rows(),
                sigma: law.sigma_matrix.to_rows(),
                covariance: law.covariance.to_rows(),
            },
            &None,
        );
    }
    let kernel = KernelSpec::by_name(args.kernel.into())?;
    let v = asymptotic_variance(case, args.d, args.lambda_star, sigma2, &kernel)?;
    write_json(&serde_json::json!({ "sigma2": v }), &None)
}

fn cmd_fit_kernel(args: &FitKernelArgs) -> Result<(), CliError> {
    let y = read_column(&args.input, args.column.as_deref())?;
    let n = y.len();
    let h = args.h.unwrap_or((n as f64).powf(-0.2));
    if args.points < 2 {
        return Err(CliError::Argument("--points must be >= 2".into()));
    }
    let kernel = KernelSpec::by_name(args.kernel.into())?;
    let lo = h + 1.0 / n as f64;
    let hi = 1.0 - h - 1.0 / n as f64;
    if !(lo < hi) {
        return Err(CliError::Argument(format!("bandwidth {h} leaves no interior points")));
    }
    let mut w = csv_writer(&args.out)?;
    w.write_record(["x", "m_hat"]).map_err(csv_err)?;
    for i in 0..args.points {
        let x = lo + (hi - lo) * i as f64 / (args.points - 1) as f64;
        let m = priestley_chao(&y, x, h, &kernel)?;
        w.write_record([float(x), float(m)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct KnotFitOut {
    eta_hat: f64,
    a_hat: Vec<f64>,
    rss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<Vec<[f64; 2]>>,
}

fn cmd_fit_knot(args: &FitKnotArgs) -> Result<(), CliError> {
    let y = read_column(&args.input, args.column.as_deref())?;
    let f = fit(&y, args.q, args.p)?;
    let out = KnotFitOut {
        eta_hat: f.eta_hat,
        a_hat: f.a_hat,
        rss: f.rss,
        profile: (!args.no_profile).then(|| f.eta_profile.iter().map(|&(e, r)| [e, r]).collect()),
    };
    write_json(&out, &args.out)
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let mut config: ExperimentConfig = read_toml(&args.config)?;
    if let Some(s) = args.seed {
        config.master_seed = s;
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let config = load_experiment(args)?;
    let report: ExperimentReport = if args.timing { run_timed(&config)? } else { run(&config)? };
    let mut w = sink(&args.out)?;
    writeln!(w, "{}", report.to_json())?;
    w.flush()?;
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv())?;
    }
    let failed = report.tests.iter().filter(|t| !t.pass).count();
    if failed > 0 {
        return Err(CliError::TestsFailed { failed, total: report.tests.len() });
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), CliError> {
    let checks = flurlab::selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.pass);
    }
    if failed > 0 {
        return Err(CliError::TestsFailed { failed, total: checks.len() });
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Acvf(a) => cmd_acvf(a),
        Command::Tfbm(a) => cmd_tfbm(a),
        Command::Variance(a) => cmd_variance(a),
        Command::FitKernel(a) => cmd_fit_kernel(a),
        Command::FitKnot(a) => cmd_fit_knot(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Selftest => cmd_selftest(),
    }
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("FLURLAB_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Argument(format!("FLURLAB_THREADS must be a non-negative integer, got {v}"))),
        Err(_) => Ok(0),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            eprintln!("code=usage {}", e.to_string().lines().next().unwrap_or(""));
            std::process::exit(1);
        }
    };
    let result = threads_from_env().and_then(|t| with_threads(t, || dispatch(&cli)));
    if let Err(e) = result {
        if matches!(&e, CliError::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe) {
            return;
        }
        eprintln!("code={} {e}", e.code());
        std::process::exit(e.exit_code());
    }
}
