//! Truth functions, error metrics, and the simulation-study runners.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::design::{equispaced, maximin_lhs, stream_rng, uniform, DesignSet, STREAM_USER};
use crate::error::{Error, Result};
use crate::estimation::{self, FitOptions, L2Estimate, OptimizerConfig};
use crate::kernel::{self, KernelSpec};
use crate::models::{
    CalibrationProblem, EffectiveCovariance, FittedCalibration, FnSimulator, LambdaZPolicy,
    ModelKind, Simulator,
};

/// Series terms used for the first example's reality.
pub const EG1_TERMS: usize = 10_000;

fn eg1_coefficients() -> &'static [f64] {
    static COEF: OnceLock<Vec<f64>> = OnceLock::new();
    COEF.get_or_init(|| {
        (1..=EG1_TERMS)
            .map(|j| {
                let j = j as f64;
                2.0 * j.sin() / (j * j * j)
            })
            .collect()
    })
}

/// `2 Σ_{j=1}^{J} j⁻³ cos(π(j − ½)x) sin(j)`.
pub fn truth_eg1_terms(x: f64, terms: usize) -> f64 {
    let mut acc = 0.0;
    for j in (1..=terms).rev() {
        let jf = j as f64;
        let c = if j <= EG1_TERMS {
            eg1_coefficients()[j - 1]
        } else {
            2.0 * jf.sin() / (jf * jf * jf)
        };
        acc += c * (std::f64::consts::PI * (jf - 0.5) * x).cos();
    }
    acc
}

/// First-example reality, truncated at [`EG1_TERMS`] terms (tail below 1e-8).
pub fn truth_eg1(x: f64) -> f64 {
    truth_eg1_terms(x, EG1_TERMS)
}

/// A reality `y^R` paired with a simulator family and a noise level.
#[derive(Clone, Copy)]
pub struct TruthFunction {
    pub name: &'static str,
    pub p: usize,
    pub q: usize,
    pub noise_sd: f64,
    pub theta_bounds: &'static [(f64, f64)],
    truth: fn(&[f64]) -> f64,
    model: fn(&[f64], &[f64]) -> f64,
}

impl std::fmt::Debug for TruthFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TruthFunction")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("noise_sd", &self.noise_sd)
            .finish()
    }
}

impl TruthFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.truth)(x)
    }

    pub fn model(&self, x: &[f64], theta: &[f64]) -> f64 {
        (self.model)(x, theta)
    }

    pub fn simulator(&self) -> Arc<dyn Simulator> {
        Arc::new(FnSimulator::new(self.q, self.model))
    }

    pub fn values(&self, xs: &DesignSet) -> Vec<f64> {
        xs.rows().map(|x| self.eval(x)).collect()
    }

    /// `θ_L2` on the default midpoint grid.
    pub fn theta_l2(&self, config: &OptimizerConfig) -> Result<L2Estimate> {
        let sim = self.simulator();
        estimation::l2_minimizer(|x| self.eval(x), sim.as_ref(), self.theta_bounds, self.p, None, config)
    }
}

fn eg1(x: &[f64]) -> f64 {
    truth_eg1(x[0])
}

fn constant(_: &[f64], t: &[f64]) -> f64 {
    t[0]
}

fn damped_cosine(x: &[f64]) -> f64 {
    (-1.4 * x[0]).exp() * (3.5 * std::f64::consts::PI * x[0]).cos()
}

fn linear_x1(x: &[f64], t: &[f64]) -> f64 {
    t[0] + t[1] * x[0]
}

fn cheng_sandu(x: &[f64]) -> f64 {
    (x[0] + x[1]).cos() * (x[0] * x[1]).exp()
}

fn cheng_sandu_sum(x: &[f64]) -> f64 {
    (x[0] + x[1]).cos() * (x[0] + x[1]).exp()
}

fn morokoff_caflisch(x: &[f64]) -> f64 {
    (4.0f64 / 3.0).powi(3) * x.iter().map(|v| v.cbrt()).product::<f64>()
}

fn park(x: &[f64]) -> f64 {
    2.0 / 3.0 * (x[0] + x[1]).exp() + x[2] - x[3] * x[2].sin()
}

fn xiong_low_fidelity(x: &[f64]) -> f64 {
    1.2 * park(x) - 1.0
}

fn linear_x2_x3(x: &[f64], t: &[f64]) -> f64 {
    t[0] + t[1] * x[1] + t[2] * x[2]
}

fn eg3(x: &[f64]) -> f64 {
    let pi = std::f64::consts::PI;
    (0.2 * pi * x[0]).sin() * x[1] + (2.0 * pi * x[0]).sin() * x[1] + 1.0
}

fn eg3_model(x: &[f64], t: &[f64]) -> f64 {
    (t[0] * x[0]).sin() * x[1] + t[1]
}

const BOX1: &[(f64, f64)] = &[(-10.0, 10.0)];
const BOX2: &[(f64, f64)] = &[(-10.0, 10.0), (-10.0, 10.0)];
const BOX3: &[(f64, f64)] = &[(-10.0, 10.0), (-10.0, 10.0), (-10.0, 10.0)];
const BOX_EG3: &[(f64, f64)] = &[(0.0, 10.0), (-3.0, 5.0)];

/// Names accepted by [`truth_library`].
pub const TRUTH_NAMES: &[&str] = &[
    "example1",
    "example2-i",
    "example2-ii",
    "example2-iii",
    "example2-iv",
    "example3",
    "example2-ii-sum",
    "example2-iv-park",
];

pub fn truth_library(name: &str) -> Result<TruthFunction> {
    let tf = |name, p, q, noise_sd, theta_bounds, truth, model| TruthFunction {
        name,
        p,
        q,
        noise_sd,
        theta_bounds,
        truth,
        model,
    };
    Ok(match name {
        "example1" => tf("example1", 1, 1, 0.05, BOX1, eg1 as fn(&[f64]) -> f64, constant as fn(&[f64], &[f64]) -> f64),
        "example2-i" => tf("example2-i", 1, 2, 0.05, BOX2, damped_cosine, linear_x1),
        "example2-ii" => tf("example2-ii", 2, 2, 0.05, BOX2, cheng_sandu, linear_x1),
        "example2-iii" => tf("example2-iii", 3, 1, 0.05, BOX1, morokoff_caflisch, constant),
        "example2-iv" => tf("example2-iv", 4, 3, 0.05, BOX3, xiong_low_fidelity, linear_x2_x3),
        "example3" => tf("example3", 2, 2, 0.1, BOX_EG3, eg3, eg3_model),
        "example2-ii-sum" => tf("example2-ii-sum", 2, 2, 0.05, BOX2, cheng_sandu_sum, linear_x1),
        "example2-iv-park" => tf("example2-iv-park", 4, 3, 0.05, BOX3, park, linear_x2_x3),
        other => {
            return Err(Error::domain(format!(
                "unknown truth function {other:?}; expected one of {}",
                TRUTH_NAMES.join(", ")
            )))
        }
    })
}

/// Root mean squared difference.
pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let ss: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / truth.len() as f64).sqrt()
}

/// Mean over replicates of the per-replicate RMSE against `truth`.
pub fn avg_rmse_pred(predictions: &[Vec<f64>], truth: &[f64]) -> f64 {
    predictions.iter().map(|p| rmse(p, truth)).sum::<f64>() / predictions.len() as f64
}

/// Mean over replicates of the RMSE of `f^M(·, θ̂)` against `truth`.
pub fn avg_rmse_model(
    thetas: &[Vec<f64>],
    truth: &[f64],
    sim: &dyn Simulator,
    test: &DesignSet,
) -> Result<f64> {
    let mut acc = 0.0;
    for theta in thetas {
        let pred: Vec<f64> = test.rows().map(|x| sim.eval(x, theta)).collect::<Result<_>>()?;
        acc += rmse(&pred, truth);
    }
    Ok(acc / thetas.len() as f64)
}

/// `sqrt(mean_i ‖θ̂_i − θ_L2‖²)`.
pub fn rmse_theta(thetas: &[Vec<f64>], theta_l2: &[f64]) -> f64 {
    let ss: f64 = thetas
        .iter()
        .map(|t| t.iter().zip(theta_l2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    (ss / thetas.len() as f64).sqrt()
}

/// Standard error of the mean.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Calibration methods compared in the studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gasp,
    /// S-GaSP with `λ_z = λ^{-1/2}`.
    Sgasp1,
    /// S-GaSP with `λ_z = 100·n^{1/2}`.
    Sgasp2,
    L2,
    Ls,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Gasp, Method::Sgasp1, Method::Sgasp2, Method::L2, Method::Ls];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gasp => "gasp",
            Method::Sgasp1 => "sgasp1",
            Method::Sgasp2 => "sgasp2",
            Method::L2 => "l2",
            Method::Ls => "ls",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Gasp => "GaSP",
            Method::Sgasp1 => "S-GaSP 1",
            Method::Sgasp2 => "S-GaSP 2",
            Method::L2 => "L2",
            Method::Ls => "LS",
        }
    }

    fn model(self) -> Option<(ModelKind, LambdaZPolicy)> {
        match self {
            Method::Gasp => Some((ModelKind::Gasp, LambdaZPolicy::Fixed(0.0))),
            Method::Sgasp1 => Some((ModelKind::Sgasp, LambdaZPolicy::InvSqrtLambda)),
            Method::Sgasp2 => Some((ModelKind::Sgasp, LambdaZPolicy::SqrtN(100.0))),
            Method::L2 | Method::Ls => None,
        }
    }
}

/// Per-method, per-sample-size results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub n: usize,
    pub thetas: Vec<Vec<f64>>,
    pub rmse_pred: Vec<f64>,
    pub rmse_model: Vec<f64>,
    pub avg_rmse_pred: f64,
    pub avg_rmse_model: f64,
    pub se_pred: f64,
    pub se_model: f64,
    pub rmse_theta: f64,
    pub seconds: f64,
}

impl MethodResult {
    fn from_replicates(
        method: Method,
        n: usize,
        reps: Vec<Replicate>,
        theta_l2: &[f64],
        seconds: f64,
    ) -> Self {
        let thetas: Vec<Vec<f64>> = reps.iter().map(|r| r.theta.clone()).collect();
        let rmse_pred: Vec<f64> = reps.iter().map(|r| r.rmse_pred).collect();
        let rmse_model: Vec<f64> = reps.iter().map(|r| r.rmse_model).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            method,
            n,
            avg_rmse_pred: mean(&rmse_pred),
            avg_rmse_model: mean(&rmse_model),
            se_pred: standard_error(&rmse_pred),
            se_model: standard_error(&rmse_model),
            rmse_theta: rmse_theta(&thetas, theta_l2),
            thetas,
            rmse_pred,
            rmse_model,
            seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub seed: u64,
    pub replicates: usize,
    pub test_size: usize,
    pub theta_l2: Vec<f64>,
    /// RMSE of `f^M(·, θ_L2)` against the reality on the test points.
    pub l2_floor: f64,
    pub results: Vec<MethodResult>,
    /// Log–log slope of the prediction error against `n`, per method
    /// (sweeps over several `n` only).
    pub slopes: BTreeMap<String, f64>,
}

impl ExperimentResult {
    pub fn get(&self, method: Method, n: usize) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.n == n)
    }

    /// Results for one method ordered by `n`.
    pub fn series(&self, method: Method) -> Vec<&MethodResult> {
        let mut v: Vec<&MethodResult> = self.results.iter().filter(|r| r.method == method).collect();
        v.sort_by_key(|r| r.n);
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV with columns experiment, method, n, replicate,
    /// metric, value. Aggregates use replicate `all`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["experiment", "method", "n", "replicate", "metric", "value"])
            .map_err(csv_err)?;
        for r in &self.results {
            let n = r.n.to_string();
            let mut row = |rep: &str, metric: &str, value: f64| {
                w.write_record([&self.experiment, r.method.name(), &n, rep, metric, &format!("{value:?}")])
            };
            for (i, theta) in r.thetas.iter().enumerate() {
                let rep = i.to_string();
                row(&rep, "rmse_pred", r.rmse_pred[i]).map_err(csv_err)?;
                row(&rep, "rmse_model", r.rmse_model[i]).map_err(csv_err)?;
                for (k, t) in theta.iter().enumerate() {
                    row(&rep, &format!("theta{}", k + 1), *t).map_err(csv_err)?;
                }
            }
            row("all", "avg_rmse_pred", r.avg_rmse_pred).map_err(csv_err)?;
            row("all", "avg_rmse_model", r.avg_rmse_model).map_err(csv_err)?;
            row("all", "rmse_theta", r.rmse_theta).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table: one column per method, one block per `n`.
    pub fn table(&self) -> String {
        let mut methods: Vec<Method> = self.results.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut ns: Vec<usize> = self.results.iter().map(|r| r.n).collect();
        ns.sort();
        ns.dedup();
        let mut s = format!("{}  (N = {}, n* = {})\n", self.experiment, self.replicates, self.test_size);
        for n in ns {
            s.push_str(&format!("n = {n:<6}{:>18}", ""));
            for m in &methods {
                s.push_str(&format!("{:>11}", m.label()));
            }
            s.push('\n');
            for (label, f) in [
                ("AvgRMSE f^M+delta", (|r: &MethodResult| r.avg_rmse_pred) as fn(&MethodResult) -> f64),
                ("AvgRMSE f^M", |r| r.avg_rmse_model),
                ("RMSE theta", |r| r.rmse_theta),
            ] {
                s.push_str(&format!("  {label:<22}"));
                for m in &methods {
                    match self.get(*m, n) {
                        Some(r) => s.push_str(&format!("{:>11.4}", f(r))),
                        None => s.push_str(&format!("{:>11}", "-")),
                    }
                }
                s.push('\n');
            }
        }
        s.push_str(&format!(
            "theta_L2 = {:?}, AvgRMSE f^M at theta_L2 = {:.4}\n",
            self.theta_l2, self.l2_floor
        ));
        for (m, v) in &self.slopes {
            s.push_str(&format!("log-log slope ({m}) = {v:.4}\n"));
        }
        s
    }
}

struct Replicate {
    theta: Vec<f64>,
    rmse_pred: f64,
    rmse_model: f64,
}

/// Sub-seed for replicate `index` of experiment `experiment`.
fn sub_seed(seed: u64, experiment: u64, index: u64) -> u64 {
    stream_rng(seed, STREAM_USER + experiment, index).next_u64()
}

fn noisy(truth: &[f64], sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, STREAM_USER, 0);
    let noise = Normal::new(0.0, sd).expect("sd >= 0");
    truth.iter().map(|t| t + noise.sample(&mut rng)).collect()
}

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn collect<T: Send>(replicates: usize, parallel: bool, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let out: Vec<Result<T>> = if parallel {
        (0..replicates as u64).into_par_iter().map(&f).collect()
    } else {
        (0..replicates as u64).map(&f).collect()
    };
    out.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example1Mode {
    /// `λ = n^{-6/7}·1e-4`, `λ_z = λ^{-1/2}`, `γ = 1`.
    Fixed,
    /// `(θ, γ, λ)` by maximum likelihood, `λ_z = λ^{-1/2}`.
    Mle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example1Config {
    pub ns: Vec<usize>,
    pub replicates: usize,
    pub mode: Example1Mode,
    pub test_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub parallel: bool,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self {
            ns: vec![150, 400, 1100, 3000],
            replicates: 20,
            mode: Example1Mode::Fixed,
            test_size: 3000,
            seed: 2024,
            optimizer: OptimizerConfig::default().sequential(),
            parallel: true,
        }
    }
}

impl Example1Config {
    /// 50 sample sizes log-spaced over `[e⁵, e¹⁰]`, 100 replicates,
    /// 3·10⁴ test points.
    pub fn full() -> Self {
        let ns = (0..50)
            .map(|k| (5.0 + 5.0 * k as f64 / 49.0).exp().round() as usize)
            .collect();
        Self {
            ns,
            replicates: 100,
            test_size: 30_000,
            ..Self::default()
        }
    }
}

/// `λ = n^{-2m/(2m+p)}·1e-4` with `m = 3`, `p = 1`.
pub fn example1_lambda(n: usize) -> f64 {
    (n as f64).powf(-6.0 / 7.0) * 1e-4
}

/// Convergence study on the first example: GaSP and S-GaSP on equispaced
/// designs over a sweep of sample sizes.
pub fn run_example1(cfg: &Example1Config) -> Result<ExperimentResult> {
    if cfg.ns.is_empty() || cfg.replicates == 0 || cfg.test_size == 0 {
        return Err(Error::domain("example1 needs sample sizes, replicates and test points"));
    }
    let tf = truth_library("example1")?;
    let sim = tf.simulator();
    let test = equispaced(cfg.test_size, 1)?;
    let truth_test = tf.values(&test);
    let theta_l2 = tf.theta_l2(&cfg.optimizer)?.theta;
    let floor = rmse(&vec![theta_l2[0]; truth_test.len()], &truth_test);
    let methods = [Method::Gasp, Method::Sgasp1];
    let spec = KernelSpec::matern52(vec![1.0])?;
    let mut results = Vec::new();

    for &n in &cfg.ns {
        let design = equispaced(n, 1)?;
        let truth_design = tf.values(&design);
        let cross = match cfg.mode {
            Example1Mode::Fixed => Some(kernel::cross_matrix(&test, &design, &spec)?),
            Example1Mode::Mle => None,
        };
        for method in methods {
            let (kind, policy) = method.model().expect("likelihood method");
            let start = Instant::now();
            let base = CalibrationProblem::new(
                design.clone(),
                truth_design.clone(),
                sim.clone(),
                tf.theta_bounds.to_vec(),
                spec.clone(),
                kind,
                policy,
            )?;
            let lambda = example1_lambda(n);
            let cov = match cfg.mode {
                Example1Mode::Fixed => Some(EffectiveCovariance::from_correlation(
                    kernel::correlation_matrix(&design, &spec)?,
                    spec.nugget(),
                    lambda,
                    base.lambda_z_for(lambda),
                )?),
                Example1Mode::Mle => None,
            };
            let reps = collect(cfg.replicates, cfg.parallel, |r| {
                let s = sub_seed(cfg.seed, 1, (n as u64) << 20 | r);
                let prob = base.with_observations(noisy(&truth_design, tf.noise_sd, s))?;
                let optimizer = cfg.optimizer.clone().with_seed(s);
                let fit = match (&cov, &cross) {
                    (Some(cov), Some(_)) => {
                        estimation::fit_with_covariance(&prob, cov, &[1.0], &optimizer)?.fit
                    }
                    _ => {
                        estimation::fit_with(&prob, &FitOptions::default().with_optimizer(optimizer))?
                            .fit
                    }
                };
                let pred = match &cross {
                    Some(cross) => {
                        let w = DVector::from_column_slice(&fit.weights);
                        let delta = cross * w;
                        delta.iter().map(|d| fit.theta[0] + d).collect()
                    }
                    None => fit.predict_mean(&prob, &test)?,
                };
                Ok(Replicate {
                    rmse_pred: rmse(&pred, &truth_test),
                    rmse_model: rmse(&vec![fit.theta[0]; truth_test.len()], &truth_test),
                    theta: fit.theta,
                })
            })?;
            results.push(MethodResult::from_replicates(method, n, reps, &theta_l2, seconds(start)));
        }
    }

    let mut out = ExperimentResult {
        experiment: format!("example1-{}", if cfg.mode == Example1Mode::Fixed { "fixed" } else { "mle" }),
        seed: cfg.seed,
        replicates: cfg.replicates,
        test_size: cfg.test_size,
        theta_l2,
        l2_floor: floor,
        results,
        slopes: BTreeMap::new(),
    };
    if cfg.ns.len() >= 2 {
        for method in methods {
            let series = out.series(method);
            let ns: Vec<f64> = series.iter().map(|r| r.n as f64).collect();
            let errs: Vec<f64> = series.iter().map(|r| r.avg_rmse_pred).collect();
            let slope = loglog_slope(&ns, &errs);
            out.slopes.insert(method.name().to_string(), slope);
        }
    }
    Ok(out)
}

/// Settings shared by the fixed-size studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n: usize,
    pub replicates: usize,
    pub test_size: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub optimizer: OptimizerConfig,
    pub design_restarts: usize,
    pub parallel: bool,
}

impl StudyConfig {
    pub fn new(n: usize, methods: Vec<Method>) -> Self {
        Self {
            n,
            replicates: 50,
            test_size: 2000,
            seed: 2024,
            methods,
            optimizer: OptimizerConfig::default().sequential(),
            design_restarts: 20,
            parallel: true,
        }
    }
}

/// Runs every method on `replicates` data sets drawn from `tf` with
/// maximin Latin hypercube designs, scoring on uniform test points.
pub fn run_study(tf: &TruthFunction, experiment_id: u64, cfg: &StudyConfig) -> Result<ExperimentResult> {
    if cfg.n < 2 || cfg.replicates == 0 || cfg.test_size == 0 || cfg.methods.is_empty() {
        return Err(Error::domain("study needs n >= 2, replicates, test points and methods"));
    }
    let test = uniform(cfg.test_size, tf.p, sub_seed(cfg.seed, experiment_id, u64::MAX))?;
    let truth_test = tf.values(&test);
    let theta_l2 = tf.theta_l2(&cfg.optimizer)?.theta;
    let floor_pred: Vec<f64> = test.rows().map(|x| tf.model(x, &theta_l2)).collect();
    let floor = rmse(&floor_pred, &truth_test);
    let data = collect(cfg.replicates, cfg.parallel, |r| {
        replicate_problem(tf, experiment_id, cfg, r)
    })?;

    let mut results = Vec::new();
    for &method in &cfg.methods {
        let start = Instant::now();
        let reps = collect(cfg.replicates, cfg.parallel, |r| {
            let (s, base) = &data[r as usize];
            let opts = FitOptions::default().with_optimizer(cfg.optimizer.clone().with_seed(*s));
            let (theta, pred) = match method.model() {
                Some((kind, policy)) => {
                    let prob = base.with_model(kind, policy);
                    let fit: FittedCalibration = estimation::fit_with(&prob, &opts)?.fit;
                    let pred = fit.predict_mean(&prob, &test)?;
                    (fit.theta, pred)
                }
                None => {
                    let fit = match method {
                        Method::L2 => baselines::fit_l2(base, None, &opts)?,
                        _ => baselines::fit_ls(base, &opts)?,
                    };
                    let pred = fit.predict_reality(&test)?;
                    (fit.theta, pred)
                }
            };
            let model: Vec<f64> = test.rows().map(|x| tf.model(x, &theta)).collect();
            Ok(Replicate {
                rmse_pred: rmse(&pred, &truth_test),
                rmse_model: rmse(&model, &truth_test),
                theta,
            })
        })?;
        results.push(MethodResult::from_replicates(method, cfg.n, reps, &theta_l2, seconds(start)));
    }
    Ok(ExperimentResult {
        experiment: tf.name.to_string(),
        seed: cfg.seed,
        replicates: cfg.replicates,
        test_size: cfg.test_size,
        theta_l2,
        l2_floor: floor,
        results,
        slopes: BTreeMap::new(),
    })
}

/// Data set `r` of a study with its sub-seed: a maximin Latin hypercube
/// design and noisy observations of the reality, as a GaSP problem.
pub fn replicate_problem(
    tf: &TruthFunction,
    experiment_id: u64,
    cfg: &StudyConfig,
    r: u64,
) -> Result<(u64, CalibrationProblem)> {
    let s = sub_seed(cfg.seed, experiment_id, r);
    let design = maximin_lhs(cfg.n, tf.p, s, cfg.design_restarts)?;
    let y = noisy(&tf.values(&design), tf.noise_sd, s);
    let problem = CalibrationProblem::new(
        design,
        y,
        tf.simulator(),
        tf.theta_bounds.to_vec(),
        KernelSpec::matern52(vec![1.0; tf.p])?,
        ModelKind::Gasp,
        LambdaZPolicy::Fixed(0.0),
    )?;
    Ok((s, problem))
}

/// Second-example study for `case` in `i`..`iv` (or a full truth name).
pub fn run_example2(case: &str, cfg: &StudyConfig) -> Result<ExperimentResult> {
    let name = if case.starts_with("example2") {
        case.to_string()
    } else {
        format!("example2-{case}")
    };
    let tf = truth_library(&name)?;
    let id = 2 + TRUTH_NAMES.iter().position(|n| *n == name).unwrap_or(0) as u64;
    run_study(&tf, id, cfg)
}

pub fn run_example3(cfg: &StudyConfig) -> Result<ExperimentResult> {
    run_study(&truth_library("example3")?, 20, cfg)
}

/// Default configuration for the second example: `n = 10(p+1)`, the three
/// likelihood-based methods.
pub fn example2_config(case: &str) -> Result<StudyConfig> {
    let name = if case.starts_with("example2") {
        case.to_string()
    } else {
        format!("example2-{case}")
    };
    let tf = truth_library(&name)?;
    Ok(StudyConfig::new(
        10 * (tf.p + 1),
        vec![Method::Gasp, Method::Sgasp1, Method::Sgasp2],
    ))
}

/// Default configuration for the third example: `n = 30`, all five methods.
pub fn example3_config() -> StudyConfig {
    StudyConfig::new(30, Method::ALL.to_vec())
}
