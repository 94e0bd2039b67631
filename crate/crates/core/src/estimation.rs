//! Multistart bounded quasi-Newton optimization, maximum-likelihood fitting,
//! and the grid-quadrature L2 oracle.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{jittered_lhs, stream_rng, DesignSet, Provenance, STREAM_MULTISTART};
use crate::error::{Error, Result};
use crate::models::{CalibrationProblem, EffectiveCovariance, FittedCalibration, Simulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub starts: usize,
    pub max_iter: usize,
    /// Relative central-difference step: `h_i = step·(1 + |x_i|)`.
    pub step: f64,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
    /// Stop when the largest parameter change falls below this.
    pub x_tol: f64,
    /// Stop when the projected gradient (sup norm) falls below this.
    pub g_tol: f64,
    pub memory: usize,
    pub seed: u64,
    /// Run starts on the rayon pool.
    pub parallel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 10,
            max_iter: 200,
            step: 1e-5,
            f_tol: 1e-10,
            x_tol: 1e-9,
            g_tol: 1e-7,
            memory: 8,
            seed: 0,
            parallel: true,
        }
    }
}

impl OptimizerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.starts == 0 || self.max_iter == 0 || self.memory == 0 {
            return Err(Error::domain("starts, max_iter and memory must be >= 1"));
        }
        for (name, v) in [
            ("step", self.step),
            ("f_tol", self.f_tol),
            ("x_tol", self.x_tol),
            ("g_tol", self.g_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// History of one start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: Vec<f64>,
    pub initial_value: f64,
    /// Objective after each accepted step, non-increasing.
    pub accepted: Vec<f64>,
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Whether the simplex fallback ran.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub best_start: usize,
    pub traces: Vec<StartTrace>,
}

type Objective<'a> = dyn Fn(&[f64]) -> f64 + Sync + 'a;

struct Bounded<'a> {
    f: &'a Objective<'a>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    evals: std::cell::Cell<usize>,
}

impl Bounded<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.evals.set(self.evals.get() + 1);
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn gradient(&self, x: &[f64], fx: f64, step: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = (step * (1.0 + x[i].abs())).min(0.5 * (self.hi[i] - self.lo[i]));
                let up = x[i] + h <= self.hi[i];
                let down = x[i] - h >= self.lo[i];
                let mut side = |delta: f64| {
                    xp[i] = x[i] + delta;
                    let v = self.eval(&xp);
                    xp[i] = x[i];
                    v
                };
                let fu = if up { side(h) } else { f64::INFINITY };
                let fd = if down { side(-h) } else { f64::INFINITY };
                let g = match (fu.is_finite(), fd.is_finite()) {
                    (true, true) => (fu - fd) / (2.0 * h),
                    (true, false) => (fu - fx) / h,
                    (false, true) => (fx - fd) / h,
                    (false, false) => 0.0,
                };
                if g.is_finite() {
                    g
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Gradient with components that push out of the box zeroed.
    fn projected(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                if (x[i] <= self.lo[i] && gi > 0.0) || (x[i] >= self.hi[i] && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; mem.len()];
    for (k, (s, y, rho)) in mem.iter().enumerate().rev() {
        alpha[k] = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha[k] * yi;
        }
    }
    if let Some((s, y, _)) = mem.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for (k, (s, y, rho)) in mem.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha[k] - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn local_minimize(prob: &Bounded<'_>, x0: &[f64], cfg: &OptimizerConfig) -> StartTrace {
    let mut x = x0.to_vec();
    prob.project(&mut x);
    let mut fx = prob.eval(&x);
    let mut trace = StartTrace {
        start: x.clone(),
        initial_value: fx,
        accepted: Vec::new(),
        x: x.clone(),
        value: fx,
        iterations: 0,
        evaluations: 0,
        fallback: false,
    };
    if !fx.is_finite() {
        trace.evaluations = prob.evals.get();
        return trace;
    }
    let d = x.len();
    let span = (0..d).fold(0.0f64, |m, i| m.max(prob.hi[i] - prob.lo[i]));
    let mut g = prob.gradient(&x, fx, cfg.step);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stalled = false;

    for _ in 0..cfg.max_iter {
        trace.iterations += 1;
        let pg = prob.projected(&x, &g);
        if sup_norm(&pg) <= cfg.g_tol * (1.0 + fx.abs()) {
            break;
        }
        let mut dir = two_loop(&pg, &mem);
        for i in 0..d {
            if (x[i] <= prob.lo[i] && dir[i] < 0.0) || (x[i] >= prob.hi[i] && dir[i] > 0.0) {
                dir[i] = 0.0;
            }
        }
        if dot(&dir, &pg) >= 0.0 || sup_norm(&dir) == 0.0 {
            mem.clear();
            dir = pg.iter().map(|v| -v).collect();
        }
        let mut t = if mem.is_empty() {
            (0.1 * span / sup_norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..50 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            prob.project(&mut xn);
            let decrease = dot(&g, &xn.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
            let fxn = prob.eval(&xn);
            if fxn < fx && fxn <= fx + 1e-4 * decrease.min(0.0) {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            stalled = true;
            break;
        };
        let gn = prob.gradient(&xn, fxn, cfg.step);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s.clone(), y, 1.0 / sy));
        }
        let rel = (fx - fxn) / fx.abs().max(1.0);
        let dx = sup_norm(&s);
        x = xn;
        fx = fxn;
        g = gn;
        trace.accepted.push(fx);
        if rel <= cfg.f_tol || dx <= cfg.x_tol {
            break;
        }
    }

    if stalled {
        trace.fallback = true;
        let (xs, fs) = nelder_mead(prob, &x, fx, cfg, &mut trace.accepted);
        x = xs;
        fx = fs;
    }
    trace.x = x;
    trace.value = fx;
    trace.evaluations = prob.evals.get();
    trace
}

/// Box-projected Nelder–Mead started from `x0`.
fn nelder_mead(
    prob: &Bounded<'_>,
    x0: &[f64],
    f0: f64,
    cfg: &OptimizerConfig,
    accepted: &mut Vec<f64>,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..d {
        let mut v = x0.to_vec();
        let delta = 0.05 * (prob.hi[i] - prob.lo[i]);
        v[i] = if v[i] + delta <= prob.hi[i] { v[i] + delta } else { v[i] - delta };
        let fv = prob.eval(&v);
        simplex.push((v, fv));
    }
    let point = |c: &[f64], w: &[f64], coef: f64| {
        let mut v: Vec<f64> = c.iter().zip(w).map(|(a, b)| a + coef * (b - a)).collect();
        prob.project(&mut v);
        v
    };
    let budget = 200 * (d + 1) * 5;
    let mut best = f0;
    for _ in 0..budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best {
            best = simplex[0].1;
            accepted.push(best);
        }
        let spread = simplex[d].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .map(|(v, _)| sup_norm(&v.iter().zip(&simplex[0].0).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= cfg.f_tol * (1.0 + best.abs())) && size <= cfg.x_tol * 10.0
            || size <= cfg.x_tol
        {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (v, _) in &simplex[..d] {
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi / d as f64;
            }
        }
        let worst = simplex[d].clone();
        let xr = point(&centroid, &worst.0, -1.0);
        let fr = prob.eval(&xr);
        if fr < simplex[0].1 {
            let xe = point(&centroid, &worst.0, -2.0);
            let fe = prob.eval(&xe);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = point(&centroid, &xr, 0.5);
                let fc = prob.eval(&xc);
                (xc, fc)
            } else {
                let xc = point(&centroid, &worst.0, 0.5);
                let fc = prob.eval(&xc);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    *v = point(&x_best, v, 0.5);
                    *fv = prob.eval(v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    if simplex[0].1 < best {
        accepted.push(simplex[0].1);
    }
    simplex.swap_remove(0)
}

/// Initial points: the box center, then a seeded Latin hypercube over the box.
pub fn multistart_points(bounds: &[(f64, f64)], starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = bounds.len();
    let mut out = vec![bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect::<Vec<_>>()];
    if starts > 1 && d > 0 {
        let mut rng = stream_rng(seed, STREAM_MULTISTART, 0);
        let unit = jittered_lhs(starts - 1, d, &mut rng);
        out.extend(unit.chunks(d).map(|u| {
            u.iter()
                .zip(bounds)
                .map(|(v, (lo, hi))| lo + v * (hi - lo))
                .collect()
        }));
    }
    out
}

/// Minimizes `objective` over the box `bounds` from `config.starts` points.
///
/// Non-finite objective values are treated as `+∞`.
pub fn multistart_minimize(
    objective: &Objective<'_>,
    bounds: &[(f64, f64)],
    config: &OptimizerConfig,
) -> Result<Optimum> {
    config.validate()?;
    if let Some((lo, hi)) = bounds
        .iter()
        .find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
    {
        return Err(Error::domain(format!("invalid bounds [{lo}, {hi}]")));
    }
    let starts = if bounds.is_empty() { 1 } else { config.starts };
    let points = multistart_points(bounds, starts, config.seed);
    let run = |x0: &Vec<f64>| {
        let prob = Bounded {
            f: objective,
            lo: bounds.iter().map(|b| b.0).collect(),
            hi: bounds.iter().map(|b| b.1).collect(),
            evals: std::cell::Cell::new(0),
        };
        local_minimize(&prob, x0, config)
    };
    let traces: Vec<StartTrace> = if config.parallel {
        points.par_iter().map(run).collect()
    } else {
        points.iter().map(run).collect()
    };
    let mut best: Option<usize> = None;
    for (i, t) in traces.iter().enumerate() {
        if t.value.is_finite() && best.is_none_or(|b| t.value < traces[b].value) {
            best = Some(i);
        }
    }
    match best {
        Some(b) => Ok(Optimum {
            x: traces[b].x.clone(),
            value: traces[b].value,
            best_start: b,
            traces,
        }),
        None => Err(Error::OptimizationFailed(format!(
            "all {} starts failed; initial values: {:?}",
            traces.len(),
            traces.iter().map(|t| t.initial_value).collect::<Vec<_>>()
        ))),
    }
}

/// Options for maximum-likelihood fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub optimizer: OptimizerConfig,
    /// Hold the ranges fixed instead of estimating them.
    pub gamma: Option<Vec<f64>>,
    /// Hold `λ` fixed instead of estimating it.
    pub lambda: Option<f64>,
    pub log_gamma_bounds: (f64, f64),
    pub log_lambda_bounds: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            gamma: None,
            lambda: None,
            log_gamma_bounds: (0.01f64.ln(), 100f64.ln()),
            log_lambda_bounds: (1e-12f64.ln(), 1e2f64.ln()),
        }
    }
}

impl FitOptions {
    pub fn with_optimizer(mut self, optimizer: OptimizerConfig) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn fixed(mut self, gamma: Vec<f64>, lambda: f64) -> Self {
        self.gamma = Some(gamma);
        self.lambda = Some(lambda);
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub fit: FittedCalibration,
    pub optimum: Optimum,
}

/// Maximum-likelihood fit with default options.
pub fn fit(prob: &CalibrationProblem, config: &OptimizerConfig) -> Result<FittedCalibration> {
    let opts = FitOptions {
        optimizer: config.clone(),
        ..FitOptions::default()
    };
    fit_with(prob, &opts).map(|r| r.fit)
}

/// Maximizes the profile likelihood over `θ` and whichever of `log γ`,
/// `log λ` are free.
pub fn fit_with(prob: &CalibrationProblem, opts: &FitOptions) -> Result<FitReport> {
    let p = prob.design().p();
    let q = prob.q();
    if let Some(g) = &opts.gamma {
        if g.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: g.len(),
            });
        }
    }
    if let Some(l) = opts.lambda {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::domain(format!("lambda must be >= 0, got {l}")));
        }
    }
    if let (Some(g), Some(l)) = (&opts.gamma, opts.lambda) {
        let kernel = prob.kernel().with_ranges(g.clone())?;
        let cov = EffectiveCovariance::new(prob.design(), &kernel, l, prob.lambda_z_for(l))?;
        return fit_with_covariance(prob, &cov, g, &opts.optimizer);
    }

    let mut bounds = prob.theta_bounds().to_vec();
    if opts.gamma.is_none() {
        bounds.extend(std::iter::repeat_n(opts.log_gamma_bounds, p));
    }
    if opts.lambda.is_none() {
        bounds.push(opts.log_lambda_bounds);
    }
    let split = |x: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let theta = x[..q].to_vec();
        let mut k = q;
        let gamma = match &opts.gamma {
            Some(g) => g.clone(),
            None => {
                k += p;
                x[q..q + p].iter().map(|v| v.exp()).collect()
            }
        };
        let lambda = opts.lambda.unwrap_or_else(|| x[k].exp());
        (theta, gamma, lambda)
    };
    let objective = |x: &[f64]| -> f64 {
        let (theta, gamma, lambda) = split(x);
        let value = (|| {
            let kernel = prob.kernel().with_ranges(gamma)?;
            let cov = EffectiveCovariance::new(prob.design(), &kernel, lambda, prob.lambda_z_for(lambda))?;
            cov.profile(&prob.residuals(&theta)?)
        })();
        value.map_or(f64::INFINITY, |p| p.neg_loglik)
    };
    let optimum = multistart_minimize(&objective, &bounds, &opts.optimizer)?;
    let (theta, gamma, lambda) = split(&optimum.x);
    let fit = FittedCalibration::from_parameters(prob, &theta, &gamma, lambda)?;
    Ok(FitReport { fit, optimum })
}

/// Fit over `θ` alone with a prefactored covariance, which can be shared
/// across data sets on the same design.
pub fn fit_with_covariance(
    prob: &CalibrationProblem,
    cov: &EffectiveCovariance,
    gamma: &[f64],
    config: &OptimizerConfig,
) -> Result<FitReport> {
    if cov.n() != prob.n() {
        return Err(Error::DimensionMismatch {
            expected: prob.n(),
            actual: cov.n(),
        });
    }
    let objective = |theta: &[f64]| -> f64 {
        prob.residuals(theta)
            .and_then(|e| cov.profile(&e))
            .map_or(f64::INFINITY, |p| p.neg_loglik)
    };
    let optimum = multistart_minimize(&objective, prob.theta_bounds(), config)?;
    let fit = FittedCalibration::from_covariance(prob, cov, &optimum.x, gamma)?;
    Ok(FitReport { fit, optimum })
}

/// Default points per dimension of the L2 quadrature grid.
pub fn default_grid_resolution(p: usize) -> usize {
    match p {
        1 => 1024,
        2 => 128,
        3 => 64,
        _ => 16,
    }
}

/// Midpoint tensor grid `((k + ½)/m)` with `m` points per dimension.
pub fn midpoint_grid(p: usize, m: usize) -> Result<DesignSet> {
    if p == 0 || m == 0 {
        return Err(Error::domain("midpoint grid needs p >= 1 and m >= 1"));
    }
    let total = m
        .checked_pow(p as u32)
        .filter(|t| *t <= 50_000_000)
        .ok_or_else(|| Error::domain("quadrature grid too large"))?;
    let mut values = Vec::with_capacity(total * p);
    for idx in 0..total {
        let mut rem = idx;
        let mut row = vec![0.0; p];
        for d in (0..p).rev() {
            row[d] = ((rem % m) as f64 + 0.5) / m as f64;
            rem /= m;
        }
        values.extend(row);
    }
    DesignSet::from_row_major(total, p, values, Provenance::Grid)
}

/// Target values on a midpoint grid, for minimizing
/// `∫ (target − f^M(·, θ))² dx` by the midpoint rule.
#[derive(Clone, Debug)]
pub struct L2Oracle {
    grid: DesignSet,
    target: Vec<f64>,
}

/// Minimizer of the grid L2 loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Estimate {
    pub theta: Vec<f64>,
    pub loss: f64,
}

impl L2Oracle {
    /// Tabulates `truth` on a midpoint grid with `resolution` points per
    /// dimension (default by dimension when `None`).
    pub fn new(p: usize, resolution: Option<usize>, truth: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let m = resolution.unwrap_or_else(|| default_grid_resolution(p));
        let min = if p <= 2 { 64 } else { 16 };
        if m < min {
            return Err(Error::domain(format!(
                "grid resolution {m} below the minimum {min} for p = {p}"
            )));
        }
        let grid = midpoint_grid(p, m)?;
        let target = grid.rows().map(truth).collect();
        Ok(Self { grid, target })
    }

    pub fn from_values(grid: DesignSet, target: Vec<f64>) -> Result<Self> {
        if target.len() != grid.n() {
            return Err(Error::DimensionMismatch {
                expected: grid.n(),
                actual: target.len(),
            });
        }
        Ok(Self { grid, target })
    }

    pub fn grid(&self) -> &DesignSet {
        &self.grid
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Midpoint-rule approximation of `∫ (target − f^M(·, θ))² dx`.
    pub fn loss(&self, sim: &dyn Simulator, theta: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (x, t) in self.grid.rows().zip(&self.target) {
            let d = t - sim.eval(x, theta)?;
            acc += d * d;
        }
        Ok(acc / self.grid.n() as f64)
    }

    pub fn minimize(
        &self,
        sim: &dyn Simulator,
        bounds: &[(f64, f64)],
        config: &OptimizerConfig,
    ) -> Result<L2Estimate> {
        if bounds.len() != sim.n_params() {
            return Err(Error::DimensionMismatch {
                expected: sim.n_params(),
                actual: bounds.len(),
            });
        }
        let objective = |theta: &[f64]| self.loss(sim, theta).unwrap_or(f64::INFINITY);
        let opt = multistart_minimize(&objective, bounds, config)?;
        Ok(L2Estimate {
            theta: opt.x,
            loss: opt.value,
        })
    }
}

/// `θ_L2 = argmin_θ ∫ (y^R − f^M(·, θ))² dx` by midpoint quadrature.
pub fn l2_minimizer(
    truth: impl Fn(&[f64]) -> f64,
    sim: &dyn Simulator,
    bounds: &[(f64, f64)],
    p: usize,
    resolution: Option<usize>,
    config: &OptimizerConfig,
) -> Result<L2Estimate> {
    L2Oracle::new(p, resolution, truth)?.minimize(sim, bounds, config)
}
