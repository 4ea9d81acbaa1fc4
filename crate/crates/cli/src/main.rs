//! `sllcert`: train, certify and analyse feedforward ReLU classifiers.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sllcert::attack::{attacks, min_adv_radius, AttackConfig};
use sllcert::babel::BabelMode;
use sllcert::certify::{InputCertificate, InputCertifier, SecurityCurve, SparsityVector};
use sllcert::data::{load_csv, load_idx, synth_data, Dataset, SynthSpec};
use sllcert::network::{load_model, save_model, Network};
use sllcert::param::{
    constraints_from_network, flatness_radius, generalization_bound, robust_sparse_regularity,
    write_regularity_csv,
};
use sllcert::train::{accuracy, activity_report, sgd_train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sllcert",
    version,
    about = "Sparse local Lipschitz certification for ReLU networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with SGD and orthogonal frame regularization
    Train(TrainArgs),
    /// Certified radii per input
    Certify(CertifyArgs),
    /// Certified accuracy against perturbation size
    Curve(CurveArgs),
    /// Active-neuron histograms and activation flips under noise
    Activity(ActivityArgs),
    /// Robust sparse regularity over a sweep of input budgets
    Regularity(RegularityArgs),
    /// Empirical adversarial radii next to the certificates
    Attack(AttackArgs),
    /// Generalization bound and flatness radius of a zero-bias network
    Bound(BoundArgs),
    /// Summary of a model file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file (label first), or an IDX image file when --labels is given
    #[arg(long)]
    data: Option<PathBuf>,
    /// IDX label file paired with --data
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    /// Drop this many leading samples
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Keep at most this many samples after --skip
    #[arg(long)]
    limit: Option<usize>,
    /// Synthetic data generator instead of a file (blobs, spiral)
    #[arg(long, conflicts_with = "data")]
    synth: Option<String>,
    /// Synthetic sample count
    #[arg(long, default_value_t = 500)]
    synth_n: usize,
    /// Synthetic class count
    #[arg(long, default_value_t = 2)]
    synth_classes: usize,
    /// Synthetic input dimension
    #[arg(long, default_value_t = 2)]
    synth_dim: usize,
    /// Synthetic data seed
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML file with TrainConfig fields; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden widths, comma separated
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train without biases
    #[arg(long)]
    no_bias: bool,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-step losses
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Bisection tolerance
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Output CSV (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Budgets as start:stop:step (inclusive)
    #[arg(long, default_value = "0:0.5:0.01", value_parser = parse_grid)]
    grid: Grid,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ActivityArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Perturbation norms for the flip counts
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    nus: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Histogram CSV (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip-count CSV
    #[arg(long)]
    flips_out: Option<PathBuf>,
}

#[derive(Args)]
struct RegularityArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Budgets as start:stop:step (inclusive)
    #[arg(long, default_value = "0:1:0.05", value_parser = parse_grid)]
    nu_sweep: Grid,
    /// Radius threshold, or `auto` for 1/(|V|(K+1))
    #[arg(long, default_value = "auto", value_parser = parse_epsilon)]
    epsilon: Epsilon,
    /// Babel estimator (cheap, exact)
    #[arg(long, default_value = "cheap")]
    babel: BabelMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Attack strategy (pgd, random)
    #[arg(long, default_value = "pgd")]
    attack: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Step size; defaults to 2.5 ν / steps
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bisection tolerance on the adversarial radius
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Bisection tolerance on the certificate
    #[arg(long, default_value_t = 1e-6)]
    cert_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
    /// Margin threshold γ
    #[arg(long)]
    gamma: f64,
    /// Input budget ν
    #[arg(long, default_value_t = 0.0)]
    nu: f64,
    /// Confidence level α
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Sample size; defaults to the size of --data
    #[arg(long)]
    m: Option<usize>,
    /// Sparsity vector s^0;...;s^K (zeros when absent)
    #[arg(long)]
    sparsity: Option<String>,
    /// Training data for the flatness radius
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Certify this sample of --data as well
    #[arg(long, requires = "data")]
    index: Option<usize>,
}

#[derive(Debug, Clone)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, step] = parts.as_slice() else {
        return Err("expected start:stop:step".into());
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    let (a, b, step) = (num(a)?, num(b)?, num(step)?);
    if !(a.is_finite() && b.is_finite() && step > 0.0 && step.is_finite()) || a < 0.0 || b < a {
        return Err("need 0 <= start <= stop and step > 0".into());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok(Grid((0..=n).map(|i| a + i as f64 * step).collect()))
}

#[derive(Debug, Clone, Copy)]
enum Epsilon {
    Auto,
    Value(f64),
}

fn parse_epsilon(s: &str) -> Result<Epsilon, String> {
    if s == "auto" {
        return Ok(Epsilon::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Epsilon::Value(v)),
        _ => Err("expected `auto` or a positive number".into()),
    }
}

enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<sllcert::Error> for CliError {
    fn from(e: sllcert::Error) -> Self {
        match e {
            sllcert::Error::UnknownStrategy { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(format!("I/O error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} `{}` does not exist or is not a file",
            path.display()
        )))
    }
}

fn require_out_dir(path: &Option<PathBuf>) -> CliResult<()> {
    if let Some(p) = path {
        let dir = p
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(CliError::Data(format!(
                "output directory `{}` does not exist",
                dir.display()
            )));
        }
    }
    Ok(())
}

impl DataArgs {
    fn is_set(&self) -> bool {
        self.data.is_some() || self.synth.is_some()
    }

    fn validate(&self) -> CliResult<()> {
        if let Some(p) = &self.data {
            require_file(p, "data file")?;
        }
        if let Some(p) = &self.labels {
            require_file(p, "label file")?;
        }
        if !self.is_set() {
            return Err(usage("no data given; pass --data or --synth"));
        }
        Ok(())
    }

    fn load(&self) -> CliResult<Dataset> {
        let full = match (&self.data, &self.labels, &self.synth) {
            (Some(images), Some(labels), _) => load_idx(images, labels, None)?,
            (Some(csv), None, _) => load_csv(csv)?,
            (None, _, Some(kind)) => synth_data(
                kind,
                &SynthSpec {
                    n: self.synth_n,
                    classes: self.synth_classes,
                    dim: self.synth_dim,
                    seed: self.synth_seed,
                },
            )?,
            (None, _, None) => return Err(usage("no data given; pass --data or --synth")),
        };
        let start = self.skip.min(full.len());
        let end = self
            .limit
            .map_or(full.len(), |l| (start + l).min(full.len()));
        let data = full.slice(start..end);
        if data.is_empty() {
            return Err(CliError::Data("the selected data range is empty".into()));
        }
        Ok(data)
    }
}

fn load_net(path: &Path) -> CliResult<Network> {
    require_file(path, "model file")?;
    Ok(load_model(path)?)
}

fn check_compatible(net: &Network, data: &Dataset) -> CliResult<()> {
    if net.input_dim() != data.dim() {
        return Err(CliError::Data(format!(
            "model expects inputs of dimension {}, data has {}",
            net.input_dim(),
            data.dim()
        )));
    }
    if let Some(&y) = data.labels().iter().find(|&&y| y >= net.num_classes()) {
        return Err(CliError::Data(format!(
            "label {y} is out of range for a {}-class model",
            net.num_classes()
        )));
    }
    Ok(())
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn certify_all(net: &Network, data: &Dataset, tol: f64) -> CliResult<Vec<InputCertificate>> {
    let ctx = InputCertifier::with_tol(net, tol)?;
    Ok(data
        .inputs()
        .par_iter()
        .map(|x| ctx.certify(x))
        .collect::<sllcert::Result<Vec<_>>>()?)
}

fn train(a: &TrainArgs) -> CliResult<()> {
    a.data.validate()?;
    if let Some(p) = &a.config {
        require_file(p, "config file")?;
    }
    require_out_dir(&Some(a.out.clone()))?;
    require_out_dir(&a.loss_out)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::Data(format!("config `{}`: {}", p.display(), e.message())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(h) = &a.hidden {
        cfg.hidden = h.clone();
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_bias {
        cfg.bias = false;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = a.data.load()?;
    let report = sgd_train(&data, &cfg)?;
    save_model(&report.network, &a.out)?;
    if let Some(p) = &a.loss_out {
        let mut w = output(&Some(p.clone()))?;
        writeln!(w, "step,loss")?;
        for (i, l) in report.losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()?;
    }
    eprintln!(
        "trained {:?} on {} samples: accuracy {:.4}, final loss {:.6}",
        report.network.dims(),
        data.len(),
        accuracy(&report.network, &data)?,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn certify(a: &CertifyArgs) -> CliResult<()> {
    a.data.validate()?;
    require_out_dir(&a.out)?;
    let net = load_net(&a.model)?;
    let data = a.data.load()?;
    check_compatible(&net, &data)?;
    let certs = certify_all(&net, &data, a.tol)?;
    let mut w = output(&a.out)?;
    writeln!(w, "x_id,margin,r_global,r_sparse,s_hat")?;
    for (i, c) in certs.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{}",
            c.margin, c.r_global, c.r_sparse, c.s_hat
        )?;
    }
    w.flush()?;
    Ok(())
}

fn curve(a: &CurveArgs) -> CliResult<()> {
    a.data.validate()?;
    require_out_dir(&a.out)?;
    let net = load_net(&a.model)?;
    let data = a.data.load()?;
    check_compatible(&net, &data)?;
    let certs = certify_all(&net, &data, a.tol)?;
    let curve = sllcert::certify::security_curve_from(data.labels(), &certs, &a.grid.0)?;
    write_curve(&curve, &a.out)
}

fn write_curve(curve: &SecurityCurve, out: &Option<PathBuf>) -> CliResult<()> {
    let mut w = output(out)?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn activity(a: &ActivityArgs) -> CliResult<()> {
    a.data.validate()?;
    require_out_dir(&a.out)?;
    require_out_dir(&a.flips_out)?;
    let net = load_net(&a.model)?;
    let data = a.data.load()?;
    check_compatible(&net, &data)?;
    let rep = activity_report(&net, &data, &a.nus, a.seed)?;
    let mut w = output(&a.out)?;
    writeln!(w, "layer,active,count")?;
    for (k, hist) in rep.histograms.iter().enumerate() {
        for (active, count) in hist.iter().enumerate() {
            writeln!(w, "{},{active},{count}", k + 1)?;
        }
    }
    w.flush()?;
    if let Some(p) = &a.flips_out {
        let mut f = output(&Some(p.clone()))?;
        writeln!(f, "nu,mean_flips")?;
        for (nu, flips) in &rep.flips {
            writeln!(f, "{nu},{flips}")?;
        }
        f.flush()?;
    }
    for (k, frac) in rep.median_active_fraction.iter().enumerate() {
        eprintln!("layer {}: median active fraction {frac}", k + 1);
    }
    Ok(())
}

fn regularity(a: &RegularityArgs) -> CliResult<()> {
    a.data.validate()?;
    require_out_dir(&a.out)?;
    let net = load_net(&a.model)?;
    let data = a.data.load()?;
    check_compatible(&net, &data)?;
    let c = constraints_from_network(&net, a.babel)?;
    let epsilon = match a.epsilon {
        Epsilon::Auto => 1.0 / (data.len() as f64 * (net.depth() + 1) as f64),
        Epsilon::Value(v) => v,
    };
    let rows = a
        .nu_sweep
        .0
        .iter()
        .map(|&nu| robust_sparse_regularity(&net, &data, epsilon, nu, &c))
        .collect::<sllcert::Result<Vec<_>>>()?;
    let mut w = output(&a.out)?;
    write_regularity_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn attack(a: &AttackArgs) -> CliResult<()> {
    a.data.validate()?;
    require_out_dir(&a.out)?;
    let cfg = AttackConfig {
        steps: a.steps,
        step_size: a.step_size,
        restarts: a.restarts,
        seed: a.seed,
    };
    let registry = attacks(cfg).map_err(|e| usage(e.to_string()))?;
    let strategy = registry.get(&a.attack)?;
    if !(a.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    let net = load_net(&a.model)?;
    let data = a.data.load()?;
    check_compatible(&net, &data)?;
    let certs = certify_all(&net, &data, a.cert_tol)?;
    let radii = data
        .inputs()
        .par_iter()
        .map(|x| min_adv_radius(&net, x, a.tol, strategy.as_ref()))
        .collect::<sllcert::Result<Vec<_>>>()?;
    let mut w = output(&a.out)?;
    writeln!(w, "x_id,margin,r_global,r_sparse,r_adv")?;
    for (i, (c, r)) in certs.iter().zip(&radii).enumerate() {
        writeln!(w, "{i},{},{},{},{r}", c.margin, c.r_global, c.r_sparse)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_sparsity(s: &str, depth: usize) -> CliResult<SparsityVector> {
    let levels = s
        .split(';')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--sparsity `{s}`: {e}")))?;
    let v = SparsityVector::new(levels).map_err(|e| usage(e.to_string()))?;
    if v.depth() != depth {
        return Err(usage(format!("--sparsity needs {} entries", depth + 1)));
    }
    Ok(v)
}

fn bound(a: &BoundArgs) -> CliResult<()> {
    if a.data.is_set() {
        a.data.validate()?;
    }
    require_out_dir(&a.out)?;
    let net = load_net(&a.model)?;
    let s = match &a.sparsity {
        Some(text) => parse_sparsity(text, net.depth())?,
        None => SparsityVector::zeros(net.depth()),
    };
    let data = if a.data.is_set() {
        let d = a.data.load()?;
        check_compatible(&net, &d)?;
        Some(d)
    } else {
        None
    };
    let m = match (a.m, &data) {
        (Some(m), _) => m,
        (None, Some(d)) => d.len(),
        (None, None) => return Err(usage("pass --m or --data to set the sample size")),
    };
    let b = generalization_bound(&net, a.gamma, a.nu, a.alpha, m, &s)?;
    let mut w = output(&a.out)?;
    let mut header = String::from("term1,term2,total,ln_covering,bucketing_log_term");
    let mut row = format!(
        "{},{},{},{},{}",
        b.term1, b.term2, b.total, b.ln_covering, b.bucketing_log_term
    );
    if let Some(d) = &data {
        let c = constraints_from_network(&net, BabelMode::Cheap)?;
        let f = flatness_radius(&net, d, &s, a.nu, &c)?;
        if let Some(msg) = &f.diagnostic {
            eprintln!("flatness: {msg}");
        }
        header.push_str(",flatness_radius");
        row.push_str(&format!(",{}", f.radius));
    }
    writeln!(w, "{header}\n{row}")?;
    w.flush()?;
    Ok(())
}

fn inspect(a: &InspectArgs) -> CliResult<()> {
    if a.data.is_set() {
        a.data.validate()?;
    }
    let net = load_net(&a.model)?;
    let mut w = output(&None)?;
    let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
    writeln!(w, "dims: {}", dims.join(","))?;
    writeln!(w, "parameters: {}", net.num_parameters())?;
    writeln!(w, "zero bias: {}", net.has_zero_bias())?;
    for (k, l) in net.layers().iter().enumerate() {
        writeln!(
            w,
            "layer {}: spectral norm {}, group norm {}",
            k + 1,
            l.weights.spectral_norm()?,
            l.weights.group_norm()?
        )?;
    }
    writeln!(
        w,
        "classifier: spectral norm {}",
        net.classifier().spectral_norm()?
    )?;
    if a.data.is_set() {
        let data = a.data.load()?;
        check_compatible(&net, &data)?;
        writeln!(w, "accuracy: {}", accuracy(&net, &data)?)?;
        if let Some(i) = a.index {
            if i >= data.len() {
                return Err(usage(format!(
                    "--index {i} is out of range for {} samples",
                    data.len()
                )));
            }
            let (x, y) = data.get(i);
            let c = InputCertifier::new(&net)?.certify(x)?;
            writeln!(
                w,
                "sample {i}: label {y}, predicted {}, margin {}",
                c.predicted, c.margin
            )?;
            writeln!(
                w,
                "r_global {}, r_sparse {}, s_hat {}",
                c.r_global, c.r_sparse, c.s_hat
            )?;
            writeln!(
                w,
                "l_cum {} (global {}), r_cum {}",
                c.l_cum, c.l_cum_global, c.r_cum
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("SLLCERT_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            usage(format!(
                "SLLCERT_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Certify(a) => certify(a),
        Command::Curve(a) => curve(a),
        Command::Activity(a) => activity(a),
        Command::Regularity(a) => regularity(a),
        Command::Attack(a) => attack(a),
        Command::Bound(a) => bound(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
            })
        }
    }
}
