//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, Example1Config, Example1Mode, ExperimentResult, StudyConfig};
use crate::design::{self, DesignSet, Provenance};
use crate::error::{Error, Result};
use crate::estimation::{self, FitOptions, OptimizerConfig};
use crate::kernel::{KernelSpec, Smoothness, DEFAULT_NUGGET};
use crate::models::{
    self, CalibrationProblem, FittedCalibration, FnSimulator, LambdaZPolicy, ModelKind, Simulator,
    Target, ZeroSimulator,
};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SGASP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sgasp", version, about = "Calibrate mathematical models with GaSP and S-GaSP discrepancy models")]
struct Cli {
    /// Worker threads (defaults to $SGASP_THREADS, then all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit a calibration model to field data and write a model file.
    Fit(Box<FitArgs>),
    /// Predict at new inputs from a model file.
    Predict(PredictArgs),
    /// Run a simulation study.
    Bench(BenchArgs),
    /// Generate an input design.
    Design(DesignArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Gasp,
    Sgasp,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    InvSqrtLambda,
    SqrtN,
    Fixed,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Configuration file (`[section]` headers and `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observations CSV with columns x1..xp, y.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    #[arg(long = "lambda-z-policy", value_enum)]
    lambda_z_policy: Option<PolicyArg>,
    /// Fixed λ_z (implies `--lambda-z-policy fixed`).
    #[arg(long = "lambda-z")]
    lambda_z: Option<f64>,
    /// Constant c in λ_z = c·√n.
    #[arg(long = "lambda-z-scale")]
    lambda_z_scale: Option<f64>,
    /// Built-in simulator name.
    #[arg(long)]
    simulator: Option<String>,
    /// External simulator command line.
    #[arg(long = "simulator-cmd")]
    simulator_cmd: Option<String>,
    /// Number of calibration parameters of an external simulator.
    #[arg(long = "simulator-params")]
    simulator_params: Option<usize>,
    /// Parameter box as `lo:hi,lo:hi,...`.
    #[arg(long = "theta-bounds", allow_hyphen_values = true)]
    theta_bounds: Option<String>,
    /// Matérn smoothness (1/2, 3/2 or 5/2).
    #[arg(long)]
    smoothness: Option<String>,
    #[arg(long)]
    nugget: Option<f64>,
    /// Hold the range parameters fixed (comma separated).
    #[arg(long)]
    gamma: Option<String>,
    /// Hold λ fixed.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model file written by `fit`.
    #[arg(long = "model")]
    model: PathBuf,
    /// Test inputs CSV with columns x1..xp (extra columns ignored).
    #[arg(long)]
    test: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// example1, example2, example2-i..example2-iv, example3, or all.
    suite: String,
    /// Full-size sweeps and replicate counts.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    /// Example 1 mode: fixed or mle.
    #[arg(long, default_value = "fixed")]
    mode: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DesignKind {
    Grid,
    Lhs,
    Uniform,
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, value_enum, default_value = "lhs")]
    kind: DesignKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    /// Verify Latin hypercube stratification and report on standard error.
    #[arg(long)]
    check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses and runs a command line, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let result = match cli.command {
        Cmd::Fit(a) => cmd_fit(*a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Design(a) => cmd_design(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Flat `section.key → value` map from an INI-style file.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("{origin} line {}", i + 1);
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(loc(), "unterminated section header"))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(loc(), "expected `key = value`"))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| parse_err(format!("config key {key}"), format!("cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

/// Parses `lo:hi,lo:hi`.
pub fn parse_bounds(v: &str) -> Result<Vec<(f64, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| parse_err("theta bounds", format!("expected lo:hi, got {pair:?}")))?;
            Ok((parse_num("theta_bounds", lo.trim())?, parse_num("theta_bounds", hi.trim())?))
        })
        .collect()
}

/// How the model file refers to its simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorSpec {
    Builtin { name: String },
    Command { command: String, params: usize },
}

/// Built-in simulators.
pub const BUILTIN_SIMULATORS: &[(&str, usize, &str)] = &[
    ("zero", 0, "0"),
    ("constant", 1, "t1"),
    ("linear", 2, "t1 + t2*x1"),
    ("linear-x2-x3", 3, "t1 + t2*x2 + t3*x3"),
    ("sine", 2, "sin(t1*x1)*x2 + t2"),
];

pub fn builtin_simulator(name: &str) -> Result<Arc<dyn Simulator>> {
    Ok(match name {
        "zero" => Arc::new(ZeroSimulator),
        "constant" => Arc::new(FnSimulator::new(1, |_: &[f64], t: &[f64]| t[0])),
        "linear" => Arc::new(FnSimulator::new(2, |x: &[f64], t: &[f64]| t[0] + t[1] * x[0])),
        "linear-x2-x3" => Arc::new(FnSimulator::new(3, |x: &[f64], t: &[f64]| {
            t[0] + t[1] * x[1] + t[2] * x[2]
        })),
        "sine" => Arc::new(FnSimulator::new(2, |x: &[f64], t: &[f64]| (t[0] * x[0]).sin() * x[1] + t[1])),
        other => {
            let names: Vec<&str> = BUILTIN_SIMULATORS.iter().map(|b| b.0).collect();
            return Err(Error::domain(format!(
                "unknown simulator {other:?}; built-ins: {}",
                names.join(", ")
            )));
        }
    })
}

/// Simulator run as a child process.
///
/// The child first receives `p q`, then one line `x1 .. xp t1 .. tq` per
/// evaluation, and answers each with one number on its own line.
pub struct ProcessSimulator {
    q: usize,
    p: usize,
    io: Mutex<ProcessIo>,
}

struct ProcessIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessSimulator {
    pub fn spawn(command: &str, p: usize, q: usize) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::domain("empty simulator command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Simulator(format!("cannot start {program:?}: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        writeln!(stdin, "{p} {q}").map_err(|e| Error::Simulator(e.to_string()))?;
        Ok(Self {
            q,
            p,
            io: Mutex::new(ProcessIo {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl Simulator for ProcessSimulator {
    fn n_params(&self) -> usize {
        self.q
    }

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                actual: x.len(),
            });
        }
        let mut io = self.io.lock().map_err(|_| Error::Simulator("simulator lock poisoned".into()))?;
        let line: Vec<String> = x.iter().chain(theta).map(|v| format!("{v:?}")).collect();
        let sim_err = |e: std::io::Error| Error::Simulator(e.to_string());
        writeln!(io.stdin, "{}", line.join(" ")).map_err(sim_err)?;
        io.stdin.flush().map_err(sim_err)?;
        let mut reply = String::new();
        if io.stdout.read_line(&mut reply).map_err(sim_err)? == 0 {
            return Err(Error::Simulator("simulator closed its output".into()));
        }
        reply
            .trim()
            .parse()
            .map_err(|_| Error::Simulator(format!("simulator replied {:?}", reply.trim())))
    }
}

impl Drop for ProcessSimulator {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

fn make_simulator(spec: &SimulatorSpec, p: usize) -> Result<Arc<dyn Simulator>> {
    match spec {
        SimulatorSpec::Builtin { name } => builtin_simulator(name),
        SimulatorSpec::Command { command, params } => {
            Ok(Arc::new(ProcessSimulator::spawn(command, p, *params)?))
        }
    }
}

/// Field data read from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub design: DesignSet,
    pub y: Option<Vec<f64>>,
}

/// Reads a headered CSV with columns `x1..xp` and, when `need_y`, `y`.
pub fn read_dataset(path: &Path, need_y: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string(), need_y)
}

pub fn parse_dataset(text: &str, origin: &str, need_y: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(format!("{origin} header"), e.to_string()))?
        .clone();
    let mut xcols = Vec::new();
    let mut ycol = None;
    for (i, h) in headers.iter().enumerate() {
        if h == "y" {
            ycol = Some(i);
        } else if let Some(k) = h.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()) {
            xcols.push((k, i));
        }
    }
    xcols.sort();
    if xcols.is_empty() || xcols.iter().enumerate().any(|(j, (k, _))| *k != j + 1) {
        return Err(parse_err(format!("{origin} header"), "expected input columns x1..xp"));
    }
    if need_y && ycol.is_none() {
        return Err(parse_err(format!("{origin} header"), "missing response column y"));
    }
    let p = xcols.len();
    let mut values = Vec::new();
    let mut ys = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let loc = format!("{origin} row {}", row + 1);
        let rec = rec.map_err(|e| parse_err(&loc, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(
                &loc,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let field = |i: usize| -> Result<f64> {
            let s = &rec[i];
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(&loc, format!("column {}: cannot parse {s:?}", &headers[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(&loc, format!("column {}: non-finite value", &headers[i])))
            }
        };
        for (_, i) in &xcols {
            let v = field(*i)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(&loc, format!("input {v} outside [0, 1]")));
            }
            values.push(v);
        }
        if need_y {
            ys.push(field(ycol.expect("checked"))?);
        }
    }
    if values.is_empty() {
        return Err(parse_err(origin, "no data rows"));
    }
    let n = values.len() / p;
    Ok(Dataset {
        design: DesignSet::from_row_major(n, p, values, Provenance::File)?,
        y: need_y.then_some(ys),
    })
}

/// Everything needed to predict from a fitted model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub simulator: SimulatorSpec,
    pub theta_bounds: Vec<(f64, f64)>,
    pub kernel: KernelSpec,
    pub lambda_z_policy: LambdaZPolicy,
    pub design: DesignSet,
    pub observations: Vec<f64>,
    pub fit: FittedCalibration,
}

impl ModelFile {
    pub fn problem(&self) -> Result<CalibrationProblem> {
        CalibrationProblem::new(
            self.design.clone(),
            self.observations.clone(),
            make_simulator(&self.simulator, self.design.p())?,
            self.theta_bounds.clone(),
            self.kernel.clone(),
            self.fit.kind,
            self.lambda_z_policy,
        )
    }
}

/// Settings resolved from the config file and flags.
#[derive(Clone, Debug)]
struct FitSettings {
    data: PathBuf,
    out: PathBuf,
    kind: ModelKind,
    policy: LambdaZPolicy,
    simulator: SimulatorSpec,
    theta_bounds: Vec<(f64, f64)>,
    smoothness: Smoothness,
    nugget: f64,
    gamma: Option<Vec<f64>>,
    lambda: Option<f64>,
    optimizer: OptimizerConfig,
}

fn resolve_fit(a: &FitArgs) -> Result<FitSettings> {
    let (cfg, base) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            (
                parse_config(&text, &path.display().to_string())?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        }
        None => (BTreeMap::new(), PathBuf::new()),
    };
    let get = |key: &str| cfg.get(key).map(String::as_str);
    let path_of = |flag: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
        flag.clone().or_else(|| get(key).map(|v| base.join(v)))
    };
    let data = path_of(&a.data, "data.input")
        .ok_or_else(|| Error::domain("no observations given (use --data or data.input)"))?;
    let out = path_of(&a.out, "data.output").unwrap_or_else(|| PathBuf::from("model.json"));

    let kind = match a.model {
        Some(KindArg::Gasp) => ModelKind::Gasp,
        Some(KindArg::Sgasp) => ModelKind::Sgasp,
        None => match get("model.kind").unwrap_or("sgasp") {
            "gasp" => ModelKind::Gasp,
            "sgasp" => ModelKind::Sgasp,
            other => return Err(parse_err("config key model.kind", format!("unknown kind {other:?}"))),
        },
    };
    let lambda_z = match a.lambda_z {
        Some(v) => Some(v),
        None => get("model.lambda_z").map(|v| parse_num("model.lambda_z", v)).transpose()?,
    };
    let scale = match a.lambda_z_scale {
        Some(v) => v,
        None => get("model.lambda_z_scale")
            .map(|v| parse_num("model.lambda_z_scale", v))
            .transpose()?
            .unwrap_or(100.0),
    };
    let policy_name = match a.lambda_z_policy {
        Some(PolicyArg::InvSqrtLambda) => "inv-sqrt-lambda".to_string(),
        Some(PolicyArg::SqrtN) => "sqrt-n".to_string(),
        Some(PolicyArg::Fixed) => "fixed".to_string(),
        None if a.lambda_z.is_some() => "fixed".to_string(),
        None => get("model.lambda_z_policy")
            .map(str::to_string)
            .unwrap_or_else(|| if lambda_z.is_some() { "fixed".into() } else { "inv-sqrt-lambda".into() }),
    };
    let policy = match policy_name.as_str() {
        "inv-sqrt-lambda" => LambdaZPolicy::InvSqrtLambda,
        "sqrt-n" => LambdaZPolicy::SqrtN(scale),
        "fixed" => LambdaZPolicy::Fixed(
            lambda_z.ok_or_else(|| Error::domain("fixed lambda_z policy needs --lambda-z"))?,
        ),
        other => {
            return Err(parse_err(
                "config key model.lambda_z_policy",
                format!("unknown policy {other:?}"),
            ))
        }
    };

    let simulator = match (&a.simulator, &a.simulator_cmd) {
        (Some(_), Some(_)) => return Err(Error::domain("give either --simulator or --simulator-cmd")),
        (Some(name), None) => SimulatorSpec::Builtin { name: name.clone() },
        (None, Some(cmd)) => SimulatorSpec::Command {
            command: cmd.clone(),
            params: a.simulator_params.ok_or_else(|| {
                Error::domain("--simulator-cmd needs --simulator-params")
            })?,
        },
        (None, None) => match (get("simulator.builtin"), get("simulator.command")) {
            (Some(name), None) => SimulatorSpec::Builtin { name: name.to_string() },
            (None, Some(cmd)) => SimulatorSpec::Command {
                command: cmd.to_string(),
                params: parse_num(
                    "simulator.params",
                    get("simulator.params").ok_or_else(|| Error::domain("simulator.command needs simulator.params"))?,
                )?,
            },
            (None, None) => return Err(Error::domain("no simulator given (use --simulator)")),
            _ => return Err(Error::domain("config gives both simulator.builtin and simulator.command")),
        },
    };
    let theta_bounds = match &a.theta_bounds {
        Some(v) => parse_bounds(v)?,
        None => parse_bounds(get("simulator.theta_bounds").unwrap_or(""))?,
    };
    let smoothness = Smoothness::parse(
        a.smoothness
            .as_deref()
            .or_else(|| get("kernel.smoothness"))
            .unwrap_or("5/2"),
    )?;
    let nugget = match a.nugget {
        Some(v) => v,
        None => get("kernel.nugget")
            .map(|v| parse_num("kernel.nugget", v))
            .transpose()?
            .unwrap_or(DEFAULT_NUGGET),
    };
    let gamma = match a.gamma.as_deref().or_else(|| get("kernel.gamma")) {
        Some(v) => Some(parse_list("gamma", v)?),
        None => None,
    };
    let lambda = match a.lambda {
        Some(v) => Some(v),
        None => get("model.lambda").map(|v| parse_num("model.lambda", v)).transpose()?,
    };
    let mut optimizer = OptimizerConfig::default();
    if let Some(v) = a.starts.or(get("optimizer.starts").map(|v| parse_num("optimizer.starts", v)).transpose()?) {
        optimizer.starts = v;
    }
    if let Some(v) = a.seed.or(get("optimizer.seed").map(|v| parse_num("optimizer.seed", v)).transpose()?) {
        optimizer.seed = v;
    }
    if let Some(v) = get("optimizer.max_iter") {
        optimizer.max_iter = parse_num("optimizer.max_iter", v)?;
    }
    Ok(FitSettings {
        data,
        out,
        kind,
        policy,
        simulator,
        theta_bounds,
        smoothness,
        nugget,
        gamma,
        lambda,
        optimizer,
    })
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let s = resolve_fit(&a)?;
    let data = read_dataset(&s.data, true)?;
    let p = data.design.p();
    let sim = make_simulator(&s.simulator, p)?;
    let kernel = KernelSpec::new(vec![s.smoothness; p], vec![1.0; p], s.nugget)?;
    let y = data.y.clone().expect("read with y");
    let prob = CalibrationProblem::new(
        data.design.clone(),
        y.clone(),
        sim,
        s.theta_bounds.clone(),
        kernel.clone(),
        s.kind,
        s.policy,
    )?;
    let opts = FitOptions {
        optimizer: s.optimizer.clone(),
        gamma: s.gamma.clone(),
        lambda: s.lambda,
        ..FitOptions::default()
    };
    let fit = estimation::fit_with(&prob, &opts)?.fit;
    let file = ModelFile {
        simulator: s.simulator.clone(),
        theta_bounds: s.theta_bounds.clone(),
        kernel,
        lambda_z_policy: s.policy,
        design: data.design,
        observations: y,
        fit,
    };
    fs::write(&s.out, serde_json::to_string_pretty(&file)?)?;
    let f = &file.fit;
    println!("model      {}", f.kind.name());
    println!("theta      {}", fmt_list(&f.theta));
    println!("gamma      {}", fmt_list(&f.gamma));
    println!("lambda     {:?}", f.lambda);
    println!("lambda_z   {:?}", f.lambda_z);
    println!("sigma0^2   {:?}", f.sigma0_sq);
    println!("objective  {:?}", f.objective);
    if f.s2_floored {
        println!("warning: residual quadratic form hit its floor (perfect fit)");
    }
    println!("wrote {}", s.out.display());
    Ok(())
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(&a.model)?)?;
    let test = read_dataset(&a.test, false)?;
    if test.design.p() != file.design.p() {
        return Err(Error::DimensionMismatch {
            expected: file.design.p(),
            actual: test.design.p(),
        });
    }
    let prob = file.problem()?;
    let reality = models::predict(&file.fit, &prob, &test.design, Target::Reality)?;
    let field = models::predict(&file.fit, &prob, &test.design, Target::Field)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let p = test.design.p();
        let mut header: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
        header.extend(["mean_reality", "var_reality", "mean_field", "var_field"].map(String::from));
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&header).map_err(csv_err)?;
        for (i, x) in test.design.rows().enumerate() {
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            for v in [reality.mean[i], reality.variance[i], field.mean[i], field.variance[i]] {
                rec.push(format!("{v:?}"));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
    }
    match &a.out {
        Some(path) => fs::write(path, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

/// Suites accepted by `bench`.
pub const SUITES: &[&str] = &[
    "example1",
    "example2",
    "example2-i",
    "example2-ii",
    "example2-iii",
    "example2-iv",
    "example3",
    "all",
];

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if !SUITES.contains(&a.suite.as_str()) {
        return Err(Error::domain(format!(
            "unknown suite {:?}; available suites: {}",
            a.suite,
            SUITES.join(", ")
        )));
    }
    let mode = match a.mode.as_str() {
        "fixed" => Example1Mode::Fixed,
        "mle" => Example1Mode::Mle,
        other => return Err(Error::domain(format!("unknown mode {other:?}; expected fixed or mle"))),
    };
    let want = |s: &str| a.suite == "all" || a.suite == s || (a.suite == "example2" && s.starts_with("example2"));
    fs::create_dir_all(&a.out)?;
    let mut results: Vec<ExperimentResult> = Vec::new();
    if want("example1") {
        let mut cfg = if a.full { Example1Config::full() } else { Example1Config::default() };
        cfg.mode = mode;
        cfg.seed = a.seed;
        if let Some(r) = a.replicates {
            cfg.replicates = r;
        }
        results.push(bench::run_example1(&cfg)?);
    }
    for case in ["i", "ii", "iii", "iv"] {
        let name = format!("example2-{case}");
        if !want(&name) {
            continue;
        }
        let mut cfg = bench::example2_config(case)?;
        apply_study_flags(&mut cfg, &a, 100, 10_000);
        results.push(bench::run_example2(case, &cfg)?);
        if a.full {
            cfg.n *= 2;
            let mut r = bench::run_example2(case, &cfg)?;
            r.experiment = format!("{name}-n{}", cfg.n);
            results.push(r);
        }
    }
    if want("example3") {
        let mut cfg = bench::example3_config();
        apply_study_flags(&mut cfg, &a, 200, 10_000);
        results.push(bench::run_example3(&cfg)?);
        if a.full {
            cfg.n = 60;
            let mut r = bench::run_example3(&cfg)?;
            r.experiment = "example3-n60".into();
            results.push(r);
        }
    }
    for r in &results {
        fs::write(a.out.join(format!("{}.json", r.experiment)), r.to_json()?)?;
        let file = fs::File::create(a.out.join(format!("{}.csv", r.experiment)))?;
        r.write_csv(file)?;
        println!("{}", r.table());
    }
    Ok(())
}

fn apply_study_flags(cfg: &mut StudyConfig, a: &BenchArgs, full_reps: usize, full_test: usize) {
    cfg.seed = a.seed;
    if a.full {
        cfg.replicates = full_reps;
        cfg.test_size = full_test;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
}

fn cmd_design(a: DesignArgs) -> Result<()> {
    let d = match a.kind {
        DesignKind::Grid => design::equispaced(a.n, a.p)?,
        DesignKind::Lhs => design::maximin_lhs(a.n, a.p, a.seed, a.restarts)?,
        DesignKind::Uniform => design::uniform(a.n, a.p, a.seed)?,
    };
    let text = design_csv(&d);
    match &a.out {
        Some(path) => fs::write(path, &text)?,
        None => print!("{text}"),
    }
    if a.check {
        let ok = d.is_latin_hypercube();
        eprintln!("latin hypercube: {ok}");
        eprintln!("min distance: {:?}", d.min_distance());
        if a.kind == DesignKind::Lhs && !ok {
            return Err(Error::domain("design is not stratified"));
        }
    }
    Ok(())
}

/// Headered CSV `x1..xp` with round-trip float formatting.
pub fn design_csv(d: &DesignSet) -> String {
    let mut s: String = (1..=d.p()).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in d.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
