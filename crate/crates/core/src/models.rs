//! GaSP and discretized S-GaSP calibration models.
//!
//! Both models share one computational core. With `a = λ_z/n` and the
//! correlation matrix `R` (nugget included), the S-GaSP covariance of the
//! discrepancy at the design is `R_zd = (R⁻¹ + aI)⁻¹ = R M⁻¹` where
//! `M = I + aR`. Because `R` and `M` commute, the effective covariance of the
//! field data satisfies
//!
//! ```text
//! R_zd + nλI = B M⁻¹,   B = (1 + λλ_z) R + nλI,
//! ```
//!
//! so every likelihood and predictive quantity reduces to two Cholesky
//! factorizations (`B` and `M`) and no explicit inverse. For the GaSP,
//! `λ_z = 0`, `M = I` and `B = R + nλI`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{stream_rng, DesignSet, STREAM_DISCREPANCY};
use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec};
use crate::linalg::{self, CholFactor};

/// Floor applied to `S²` before taking its logarithm.
pub const S2_FLOOR: f64 = 1e-300;

/// Mathematical model `f^M(x, θ)`.
///
/// Implementations are called concurrently from several threads during
/// optimization and experiment runs, so they must be `Send + Sync` and
/// free of unsynchronized shared state.
pub trait Simulator: Send + Sync {
    /// Number of calibration parameters `q`.
    fn n_params(&self) -> usize;

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64>;
}

/// Simulator backed by a closure.
pub struct FnSimulator<F> {
    q: usize,
    f: F,
}

impl<F> FnSimulator<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    pub fn new(q: usize, f: F) -> Self {
        Self { q, f }
    }
}

impl<F> Simulator for FnSimulator<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn n_params(&self) -> usize {
        self.q
    }

    fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        Ok((self.f)(x, theta))
    }
}

/// The zero function with no parameters, turning calibration into plain
/// GaSP regression.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroSimulator;

impl Simulator for ZeroSimulator {
    fn n_params(&self) -> usize {
        0
    }

    fn eval(&self, _x: &[f64], _theta: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gasp,
    Sgasp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gasp => "gasp",
            ModelKind::Sgasp => "sgasp",
        }
    }
}

/// How `λ_z` is chosen for the S-GaSP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "snake_case")]
pub enum LambdaZPolicy {
    Fixed(f64),
    /// `λ_z = λ^{-1/2}`, re-evaluated whenever `λ` changes.
    InvSqrtLambda,
    /// `λ_z = c·n^{1/2}`.
    SqrtN(f64),
}

impl LambdaZPolicy {
    pub fn resolve(self, lambda: f64, n: usize) -> f64 {
        match self {
            LambdaZPolicy::Fixed(v) => v,
            LambdaZPolicy::InvSqrtLambda => lambda.powf(-0.5),
            LambdaZPolicy::SqrtN(c) => c * (n as f64).sqrt(),
        }
    }
}

/// Field data, simulator, parameter box, kernel family, and model choice.
#[derive(Clone)]
pub struct CalibrationProblem {
    design: DesignSet,
    observations: DVector<f64>,
    simulator: Arc<dyn Simulator>,
    theta_bounds: Vec<(f64, f64)>,
    kernel: KernelSpec,
    kind: ModelKind,
    lambda_z: LambdaZPolicy,
}

impl fmt::Debug for CalibrationProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CalibrationProblem")
            .field("n", &self.n())
            .field("p", &self.design.p())
            .field("q", &self.q())
            .field("theta_bounds", &self.theta_bounds)
            .field("kernel", &self.kernel)
            .field("kind", &self.kind)
            .field("lambda_z", &self.lambda_z)
            .finish()
    }
}

impl CalibrationProblem {
    /// `kernel` supplies the per-dimension smoothness and nugget; its ranges
    /// are used only when they are held fixed during fitting.
    pub fn new(
        design: DesignSet,
        observations: Vec<f64>,
        simulator: Arc<dyn Simulator>,
        theta_bounds: Vec<(f64, f64)>,
        kernel: KernelSpec,
        kind: ModelKind,
        lambda_z: LambdaZPolicy,
    ) -> Result<Self> {
        if observations.len() != design.n() {
            return Err(Error::DimensionMismatch {
                expected: design.n(),
                actual: observations.len(),
            });
        }
        if observations.iter().any(|y| !y.is_finite()) {
            return Err(Error::domain("observations must be finite"));
        }
        if theta_bounds.len() != simulator.n_params() {
            return Err(Error::DimensionMismatch {
                expected: simulator.n_params(),
                actual: theta_bounds.len(),
            });
        }
        if let Some((lo, hi)) = theta_bounds
            .iter()
            .find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(Error::domain(format!("invalid parameter bounds [{lo}, {hi}]")));
        }
        if kernel.dims() != design.p() {
            return Err(Error::DimensionMismatch {
                expected: design.p(),
                actual: kernel.dims(),
            });
        }
        if let LambdaZPolicy::Fixed(v) | LambdaZPolicy::SqrtN(v) = lambda_z {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("lambda_z constant must be >= 0, got {v}")));
            }
        }
        Ok(Self {
            design,
            observations: DVector::from_vec(observations),
            simulator,
            theta_bounds,
            kernel,
            kind,
            lambda_z,
        })
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn q(&self) -> usize {
        self.theta_bounds.len()
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn observations(&self) -> &DVector<f64> {
        &self.observations
    }

    pub fn simulator(&self) -> &Arc<dyn Simulator> {
        &self.simulator
    }

    pub fn theta_bounds(&self) -> &[(f64, f64)] {
        &self.theta_bounds
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn lambda_z_policy(&self) -> LambdaZPolicy {
        self.lambda_z
    }

    /// Copy of the problem with a different model kind and `λ_z` policy.
    pub fn with_model(&self, kind: ModelKind, lambda_z: LambdaZPolicy) -> Self {
        let mut out = self.clone();
        out.kind = kind;
        out.lambda_z = lambda_z;
        out
    }

    /// Copy of the problem with new observations.
    pub fn with_observations(&self, observations: Vec<f64>) -> Result<Self> {
        Self::new(
            self.design.clone(),
            observations,
            self.simulator.clone(),
            self.theta_bounds.clone(),
            self.kernel.clone(),
            self.kind,
            self.lambda_z,
        )
    }

    /// `λ_z` implied by the model kind and policy for a given `λ`.
    pub fn lambda_z_for(&self, lambda: f64) -> f64 {
        match self.kind {
            ModelKind::Gasp => 0.0,
            ModelKind::Sgasp => self.lambda_z.resolve(lambda, self.n()),
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.q() {
            return Err(Error::DimensionMismatch {
                expected: self.q(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    /// `f^M(x_i, θ)` at every design point.
    pub fn model_outputs(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let mut out = DVector::zeros(self.n());
        for (i, x) in self.design.rows().enumerate() {
            let v = self.simulator.eval(x, theta)?;
            if !v.is_finite() {
                return Err(Error::Simulator(format!("non-finite output at design row {i}")));
            }
            out[i] = v;
        }
        Ok(out)
    }

    /// `y^F − f^M_θ`.
    pub fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>> {
        Ok(&self.observations - self.model_outputs(theta)?)
    }
}

/// Value of the negative log profile likelihood with its quadratic form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profile {
    /// `½ log|R̃_zd| + (n/2) log S²_zd`.
    pub neg_loglik: f64,
    pub s2: f64,
    /// Set when `S²` hit [`S2_FLOOR`] (perfect fit).
    pub s2_floored: bool,
}

/// Factorized effective covariance for fixed `(γ, λ, λ_z)`.
///
/// Depends only on the design, kernel, and regularization, so it can be
/// shared across residual vectors (different `θ` or replicate data sets).
#[derive(Clone, Debug)]
pub struct EffectiveCovariance {
    n: usize,
    lambda: f64,
    lambda_z: f64,
    nugget: f64,
    r: DMatrix<f64>,
    /// `B = (1 + λλ_z) R + nλI`.
    b: CholFactor,
    /// `M = I + (λ_z/n) R`; absent for `λ_z = 0`.
    m: Option<CholFactor>,
    logdet: f64,
}

impl EffectiveCovariance {
    pub fn new(design: &DesignSet, kernel: &KernelSpec, lambda: f64, lambda_z: f64) -> Result<Self> {
        let r = kernel::correlation_matrix(design, kernel)?;
        Self::from_correlation(r, kernel.nugget(), lambda, lambda_z)
    }

    pub(crate) fn from_correlation(
        r: DMatrix<f64>,
        nugget: f64,
        lambda: f64,
        lambda_z: f64,
    ) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::domain(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(lambda_z.is_finite() && lambda_z >= 0.0) {
            return Err(Error::domain(format!("lambda_z must be >= 0, got {lambda_z}")));
        }
        let n = r.nrows();
        let nl = n as f64 * lambda;
        let mut b = if lambda_z == 0.0 {
            r.clone()
        } else {
            &r * (1.0 + lambda * lambda_z)
        };
        for i in 0..n {
            b[(i, i)] += nl;
        }
        let b = linalg::cholesky_unchecked(&b).map_err(ill_conditioned)?;
        let m = if lambda_z == 0.0 {
            None
        } else {
            Some(kernel::shrink_factor(&r, lambda_z).map_err(ill_conditioned)?)
        };
        let logdet = b.logdet() - m.as_ref().map_or(0.0, CholFactor::logdet);
        Ok(Self {
            n,
            lambda,
            lambda_z,
            nugget,
            r,
            b,
            m,
            logdet,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda_z(&self) -> f64 {
        self.lambda_z
    }

    /// `log|R̃_zd|` with `R̃_zd = R_zd + nλI`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// `S² = eᵀ R̃_zd⁻¹ e = eᵀ M B⁻¹ e`.
    pub fn quadratic_form(&self, resid: &DVector<f64>) -> Result<f64> {
        self.check_len(resid)?;
        let v = self.b.solve(resid)?;
        Ok(match &self.m {
            None => resid.dot(&v),
            Some(_) => {
                let me = resid + (&self.r * resid) * (self.lambda_z / self.n as f64);
                me.dot(&v)
            }
        })
    }

    /// Negative log profile likelihood, additive constants dropped.
    pub fn profile(&self, resid: &DVector<f64>) -> Result<Profile> {
        let s2 = self.quadratic_form(resid)?;
        let floored = !(s2 > S2_FLOOR);
        let log_s2 = if floored { S2_FLOOR.ln() } else { s2.ln() };
        Ok(Profile {
            neg_loglik: 0.5 * self.logdet + 0.5 * self.n as f64 * log_s2,
            s2: s2.max(0.0),
            s2_floored: floored,
        })
    }

    /// Representer weights `w` with `δ̂(x) = r(x)ᵀ w`: `w = B⁻¹ e`, i.e.
    /// `(1+λλ_z)⁻¹ (R + nλ/(1+λλ_z) I)⁻¹ e`.
    pub fn weights(&self, resid: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(resid)?;
        self.b.solve(resid)
    }

    /// Posterior correlation `K*_zd(x, x)` given `r(x)` (no nugget in `r`):
    /// `K(x,x) − (λ_z/n) rᵀM⁻¹r − rᵀ B⁻¹ M⁻¹ r`, with `K(x,x) = 1 + nugget`.
    pub fn posterior_correlation(&self, r: &DVector<f64>) -> Result<f64> {
        self.check_len(r)?;
        let prior = 1.0 + self.nugget;
        let k = match &self.m {
            None => {
                let h = self.b.solve_lower(r)?;
                prior - h.norm_squared()
            }
            Some(m) => {
                let u = m.solve(r)?;
                let a = self.lambda_z / self.n as f64;
                prior - a * r.dot(&u) - r.dot(&self.b.solve(&u)?)
            }
        };
        Ok(k)
    }
}

fn ill_conditioned(e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite { pivot } => Error::IllConditioned { pivot },
        other => other,
    }
}

fn kernel_with_log_ranges(prob: &CalibrationProblem, log_gamma: &[f64]) -> Result<KernelSpec> {
    prob.kernel
        .with_ranges(log_gamma.iter().map(|g| g.exp()).collect())
}

/// Negative log profile likelihood of the GaSP calibration model,
/// `½ log|R + nλI| + (n/2) log S²`.
pub fn gasp_neg_profile_loglik(
    theta: &[f64],
    log_gamma: &[f64],
    log_lambda: f64,
    prob: &CalibrationProblem,
) -> Result<f64> {
    neg_profile_loglik(theta, log_gamma, log_lambda, 0.0, prob).map(|p| p.neg_loglik)
}

/// Negative log profile likelihood of the discretized S-GaSP,
/// `½ log|R̃_zd| + (n/2) log S²_zd` with `R̃_zd = (R⁻¹ + λ_z I/n)⁻¹ + nλI`.
pub fn sgasp_neg_profile_loglik(
    theta: &[f64],
    log_gamma: &[f64],
    log_lambda: f64,
    lambda_z: f64,
    prob: &CalibrationProblem,
) -> Result<f64> {
    neg_profile_loglik(theta, log_gamma, log_lambda, lambda_z, prob).map(|p| p.neg_loglik)
}

/// Profile likelihood with an explicit `λ_z` (0 gives the GaSP).
pub fn neg_profile_loglik(
    theta: &[f64],
    log_gamma: &[f64],
    log_lambda: f64,
    lambda_z: f64,
    prob: &CalibrationProblem,
) -> Result<Profile> {
    let kernel = kernel_with_log_ranges(prob, log_gamma)?;
    let cov = EffectiveCovariance::new(&prob.design, &kernel, log_lambda.exp(), lambda_z)?;
    cov.profile(&prob.residuals(theta)?)
}

/// `σ̂₀² = λ S²`.
pub fn sigma0_mle(lambda: f64, s2: f64) -> f64 {
    lambda * s2
}

/// Representer weights for the problem's model kind and `λ_z` policy.
pub fn krr_weights(
    theta: &[f64],
    gamma: &[f64],
    lambda: f64,
    prob: &CalibrationProblem,
) -> Result<DVector<f64>> {
    let kernel = prob.kernel.with_ranges(gamma.to_vec())?;
    let cov = EffectiveCovariance::new(&prob.design, &kernel, lambda, prob.lambda_z_for(lambda))?;
    cov.weights(&prob.residuals(theta)?)
}

/// Estimated parameters with everything needed for prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedCalibration {
    pub kind: ModelKind,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub lambda_z: f64,
    /// Noise variance `σ̂₀² = λ̂ S²`.
    pub sigma0_sq: f64,
    /// Discrepancy variance `σ̂² = σ̂₀²/(nλ̂) = S²/n`.
    pub sigma_sq: f64,
    /// Negative log profile likelihood at the estimate.
    pub objective: f64,
    pub s2_floored: bool,
    pub weights: Vec<f64>,
    /// Cholesky factor of `(1+λλ_z) R + nλI`.
    pub factor: CholFactor,
    /// Cholesky factor of `I + (λ_z/n) R` (S-GaSP with `λ_z > 0` only).
    pub shrink_factor: Option<CholFactor>,
    #[serde(default)]
    pub nugget: f64,
}

impl FittedCalibration {
    /// Assembles a fit at given parameter values, with `λ_z` from the
    /// problem's policy and `σ₀²` profiled out.
    pub fn from_parameters(
        prob: &CalibrationProblem,
        theta: &[f64],
        gamma: &[f64],
        lambda: f64,
    ) -> Result<Self> {
        let kernel = prob.kernel.with_ranges(gamma.to_vec())?;
        let lambda_z = prob.lambda_z_for(lambda);
        let cov = EffectiveCovariance::new(&prob.design, &kernel, lambda, lambda_z)?;
        Self::from_covariance(prob, &cov, theta, gamma)
    }

    pub(crate) fn from_covariance(
        prob: &CalibrationProblem,
        cov: &EffectiveCovariance,
        theta: &[f64],
        gamma: &[f64],
    ) -> Result<Self> {
        let resid = prob.residuals(theta)?;
        let profile = cov.profile(&resid)?;
        let weights = cov.weights(&resid)?;
        Ok(Self {
            kind: prob.kind,
            theta: theta.to_vec(),
            gamma: gamma.to_vec(),
            lambda: cov.lambda,
            lambda_z: cov.lambda_z,
            sigma0_sq: sigma0_mle(cov.lambda, profile.s2),
            sigma_sq: profile.s2 / prob.n() as f64,
            objective: profile.neg_loglik,
            s2_floored: profile.s2_floored,
            weights: weights.iter().copied().collect(),
            factor: cov.b.clone(),
            shrink_factor: cov.m.clone(),
            nugget: cov.nugget,
        })
    }

    pub fn kernel(&self, prob: &CalibrationProblem) -> Result<KernelSpec> {
        prob.kernel.with_ranges(self.gamma.clone())
    }

    /// Predictive mean of the reality `f^M(x, θ̂) + r(x)ᵀ w` at each row.
    pub fn predict_mean(&self, prob: &CalibrationProblem, xstar: &DesignSet) -> Result<Vec<f64>> {
        let kernel = self.kernel(prob)?;
        let w = DVector::from_column_slice(&self.weights);
        xstar
            .rows()
            .map(|x| {
                let r = kernel::cross_correlation(x, &prob.design, &kernel)?;
                Ok(prob.simulator.eval(x, &self.theta)? + r.dot(&w))
            })
            .collect()
    }

    fn posterior_correlation(&self, r: &DVector<f64>) -> Result<f64> {
        let prior = 1.0 + self.nugget;
        Ok(match &self.shrink_factor {
            None => prior - self.factor.solve_lower(r)?.norm_squared(),
            Some(m) => {
                let u = m.solve(r)?;
                let a = self.lambda_z / r.len() as f64;
                prior - a * r.dot(&u) - r.dot(&self.factor.solve(&u)?)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The reality `y^R(x)`; excludes observation noise.
    Reality,
    /// A new field observation; adds `σ̂₀²`.
    Field,
}

/// Per-point predictive mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub target: Target,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// GaSP predictive distribution,
/// mean `f^M(x,θ̂) + r(x)ᵀ(R+nλI)⁻¹(y−f)`, reality variance
/// `σ̂²(K(x,x) − rᵀ(R+nλI)⁻¹r)`.
pub fn gasp_predict(
    fit: &FittedCalibration,
    prob: &CalibrationProblem,
    xstar: &DesignSet,
    target: Target,
) -> Result<PredictiveDistribution> {
    if fit.kind != ModelKind::Gasp {
        return Err(Error::KindMismatch {
            fitted: fit.kind.name(),
            requested: ModelKind::Gasp.name(),
        });
    }
    predict_unchecked(fit, prob, xstar, target)
}

/// Discretized S-GaSP predictive distribution: mean
/// `f^M + rᵀ/(1+λλ_z) (R + nλ/(1+λλ_z) I)⁻¹ (y−f)`, field variance
/// `σ̂₀²((nλ)⁻¹ K*_zd(x,x) + 1)`, reality variance without the `+1` term.
pub fn sgasp_predict(
    fit: &FittedCalibration,
    prob: &CalibrationProblem,
    xstar: &DesignSet,
    target: Target,
) -> Result<PredictiveDistribution> {
    if fit.kind != ModelKind::Sgasp {
        return Err(Error::KindMismatch {
            fitted: fit.kind.name(),
            requested: ModelKind::Sgasp.name(),
        });
    }
    predict_unchecked(fit, prob, xstar, target)
}

/// Dispatches on the fitted model kind.
pub fn predict(
    fit: &FittedCalibration,
    prob: &CalibrationProblem,
    xstar: &DesignSet,
    target: Target,
) -> Result<PredictiveDistribution> {
    predict_unchecked(fit, prob, xstar, target)
}

fn predict_unchecked(
    fit: &FittedCalibration,
    prob: &CalibrationProblem,
    xstar: &DesignSet,
    target: Target,
) -> Result<PredictiveDistribution> {
    if xstar.p() != prob.design.p() {
        return Err(Error::DimensionMismatch {
            expected: prob.design.p(),
            actual: xstar.p(),
        });
    }
    if fit.weights.len() != prob.n() || fit.theta.len() != prob.q() {
        return Err(Error::domain("fitted model does not match the problem"));
    }
    let kernel = fit.kernel(prob)?;
    let w = DVector::from_column_slice(&fit.weights);
    let mut mean = Vec::with_capacity(xstar.n());
    let mut variance = Vec::with_capacity(xstar.n());
    for x in xstar.rows() {
        let r = kernel::cross_correlation(x, &prob.design, &kernel)?;
        mean.push(prob.simulator.eval(x, &fit.theta)? + r.dot(&w));
        let k_star = fit.posterior_correlation(&r)?.max(0.0);
        let v = fit.sigma_sq * k_star;
        variance.push(match target {
            Target::Reality => v,
            Target::Field => v + fit.sigma0_sq,
        });
    }
    Ok(PredictiveDistribution {
        target,
        mean,
        variance,
    })
}

/// Draws `draws` sample paths of the discretized S-GaSP discrepancy at the
/// design, `δ ~ MN(0, σ² R_zd)`, one draw per row.
pub fn sample_discrepancy(
    design: &DesignSet,
    spec: &KernelSpec,
    lambda_z: f64,
    sigma_sq: f64,
    draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(Error::domain(format!("sigma^2 must be positive, got {sigma_sq}")));
    }
    let r = kernel::correlation_matrix(design, spec)?;
    let cov = if lambda_z == 0.0 {
        r
    } else {
        let m = kernel::shrink_factor(&r, lambda_z)?;
        let rzd = m.solve_matrix(&r)?;
        (&rzd + rzd.transpose()) * 0.5
    };
    let l = linalg::cholesky_unchecked(&cov).map_err(ill_conditioned)?;
    let n = design.n();
    let scale = sigma_sq.sqrt();
    let mut rng = stream_rng(seed, STREAM_DISCREPANCY, 0);
    let mut out = DMatrix::zeros(draws, n);
    for d in 0..draws {
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let path = l.lower() * z * scale;
        out.set_row(d, &path.transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{maximin_lhs, uniform, Provenance};
    use crate::kernel::{correlation_matrix, cross_correlation, TransformedKernel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_sim() -> Arc<dyn Simulator> {
        Arc::new(FnSimulator::new(2, |x: &[f64], t: &[f64]| t[0] + t[1] * x[0]))
    }

    fn random_problem(n: usize, seed: u64, kind: ModelKind, lz: f64) -> CalibrationProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = maximin_lhs(n.max(2), 1, seed, 3).unwrap();
        let y: Vec<f64> = (0..design.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        CalibrationProblem::new(
            design,
            y,
            linear_sim(),
            vec![(-3.0, 3.0), (-3.0, 3.0)],
            KernelSpec::matern52(vec![0.3]).unwrap(),
            kind,
            LambdaZPolicy::Fixed(lz),
        )
        .unwrap()
    }

    /// Explicit-inverse oracle of the S-GaSP profile likelihood.
    fn dense_oracle(prob: &CalibrationProblem, theta: &[f64], gamma: f64, lambda: f64, lz: f64) -> f64 {
        let n = prob.n();
        let spec = prob.kernel.with_ranges(vec![gamma]).unwrap();
        let r = correlation_matrix(prob.design(), &spec).unwrap();
        let eye = DMatrix::<f64>::identity(n, n);
        let rzd = (r.try_inverse().unwrap() + &eye * (lz / n as f64)).try_inverse().unwrap();
        let a = rzd + &eye * (n as f64 * lambda);
        let e = prob.residuals(theta).unwrap();
        let s2 = (e.transpose() * a.clone().try_inverse().unwrap() * &e)[(0, 0)];
        0.5 * a.determinant().ln() + 0.5 * n as f64 * s2.ln()
    }

    #[test]
    fn gasp_two_far_points_hand_value() {
        let design = DesignSet::from_rows(&[vec![0.0], vec![1.0]], Provenance::File).unwrap();
        let spec = KernelSpec::matern52(vec![0.01]).unwrap().with_nugget(0.0).unwrap();
        let (a, b) = (0.7, -0.4);
        let prob = CalibrationProblem::new(
            design,
            vec![a, b],
            Arc::new(ZeroSimulator),
            vec![],
            spec,
            ModelKind::Gasp,
            LambdaZPolicy::Fixed(0.0),
        )
        .unwrap();
        let lambda: f64 = 0.3;
        let v = gasp_neg_profile_loglik(&[], &[0.01f64.ln()], lambda.ln(), &prob).unwrap();
        let hand = (1.0 + 2.0 * lambda).ln() + ((a * a + b * b) / (1.0 + 2.0 * lambda)).ln();
        assert_relative_eq!(v, hand, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_is_guarded() {
        let design = uniform(4, 1, 2).unwrap();
        let y: Vec<f64> = design.rows().map(|x| 1.0 + 2.0 * x[0]).collect();
        let prob = CalibrationProblem::new(
            design,
            y,
            linear_sim(),
            vec![(-3.0, 3.0); 2],
            KernelSpec::matern52(vec![0.3]).unwrap(),
            ModelKind::Gasp,
            LambdaZPolicy::Fixed(0.0),
        )
        .unwrap();
        let p = neg_profile_loglik(&[1.0, 2.0], &[0.3f64.ln()], 0.01f64.ln(), 0.0, &prob).unwrap();
        assert!(p.s2_floored);
        assert!(p.neg_loglik.is_finite() && p.neg_loglik < -1e3);
        let fit = FittedCalibration::from_parameters(&prob, &[1.0, 2.0], &[0.3], 0.01).unwrap();
        assert!(fit.sigma0_sq < 1e-25);
        assert!(fit.weights.iter().all(|w| w.abs() < 1e-12));
    }

    #[test]
    fn gasp_matches_dense_oracle() {
        for seed in 0..5 {
            let prob = random_problem(5, seed, ModelKind::Gasp, 0.0);
            let v = gasp_neg_profile_loglik(&[0.2, -0.5], &[0.4f64.ln()], 0.05f64.ln(), &prob)
                .unwrap();
            assert_relative_eq!(v, dense_oracle(&prob, &[0.2, -0.5], 0.4, 0.05, 0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn sgasp_matches_dense_oracle() {
        for seed in 0..5 {
            let prob = random_problem(5, seed, ModelKind::Sgasp, 7.0);
            let v = sgasp_neg_profile_loglik(&[0.1, 0.3], &[0.4f64.ln()], 0.02f64.ln(), 7.0, &prob)
                .unwrap();
            assert_relative_eq!(v, dense_oracle(&prob, &[0.1, 0.3], 0.4, 0.02, 7.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn sgasp_scalar_hand_value() {
        let design = DesignSet::from_rows(&[vec![0.5]], Provenance::File).unwrap();
        let spec = KernelSpec::matern52(vec![1.0]).unwrap().with_nugget(0.0).unwrap();
        let a = 0.8;
        let prob = CalibrationProblem::new(
            design,
            vec![a],
            Arc::new(ZeroSimulator),
            vec![],
            spec,
            ModelKind::Sgasp,
            LambdaZPolicy::Fixed(2.0),
        )
        .unwrap();
        let (lambda, lz): (f64, f64) = (0.25, 2.0);
        let rt = 1.0 / (1.0 + lz) + lambda;
        let p = neg_profile_loglik(&[], &[0.0], lambda.ln(), lz, &prob).unwrap();
        assert_relative_eq!(p.neg_loglik, 0.5 * rt.ln() + 0.5 * (a * a / rt).ln(), epsilon = 1e-14);
        let fit = FittedCalibration::from_parameters(&prob, &[], &[1.0], lambda).unwrap();
        assert_relative_eq!(fit.sigma0_sq, lambda * a * a / rt, epsilon = 1e-14);
    }

    #[test]
    fn sigma0_scales_quadratically() {
        let prob = random_problem(6, 3, ModelKind::Sgasp, 4.0);
        let f1 = FittedCalibration::from_parameters(&prob, &[0.0, 0.0], &[0.3], 0.1).unwrap();
        let y2: Vec<f64> = prob.observations().iter().map(|y| 3.0 * y).collect();
        let prob2 = prob.with_observations(y2).unwrap();
        let f2 = FittedCalibration::from_parameters(&prob2, &[0.0, 0.0], &[0.3], 0.1).unwrap();
        assert_relative_eq!(f2.sigma0_sq, 9.0 * f1.sigma0_sq, max_relative = 1e-12);
    }

    #[test]
    fn weights_scalar_and_oracle() {
        let design = DesignSet::from_rows(&[vec![0.5]], Provenance::File).unwrap();
        let prob = CalibrationProblem::new(
            design,
            vec![2.0],
            Arc::new(ZeroSimulator),
            vec![],
            KernelSpec::matern52(vec![1.0]).unwrap().with_nugget(0.0).unwrap(),
            ModelKind::Gasp,
            LambdaZPolicy::Fixed(0.0),
        )
        .unwrap();
        let w = krr_weights(&[], &[1.0], 0.5, &prob).unwrap();
        assert_relative_eq!(w[0], 2.0 / 1.5, epsilon = 1e-15);

        for kind in [ModelKind::Gasp, ModelKind::Sgasp] {
            let prob = random_problem(4, 9, kind, 5.0);
            let theta = [0.3, 0.1];
            let (lambda, gamma) = (0.04, 0.3);
            let w = krr_weights(&theta, &[gamma], lambda, &prob).unwrap();
            let spec = prob.kernel.with_ranges(vec![gamma]).unwrap();
            let r = correlation_matrix(prob.design(), &spec).unwrap();
            let lz = prob.lambda_z_for(lambda);
            let c = 1.0 + lambda * lz;
            let a = r + DMatrix::identity(4, 4) * (4.0 * lambda / c);
            let oracle = a.try_inverse().unwrap() * prob.residuals(&theta).unwrap() / c;
            assert!((w - oracle).amax() <= 1e-10);
        }

        let prob = random_problem(4, 2, ModelKind::Gasp, 0.0);
        let y: Vec<f64> = prob.design().rows().map(|x| -0.5 + 1.5 * x[0]).collect();
        let prob = prob.with_observations(y).unwrap();
        let w = krr_weights(&[-0.5, 1.5], &[0.3], 0.1, &prob).unwrap();
        assert!(w.amax() < 1e-12);
    }

    fn fitted(prob: &CalibrationProblem, theta: &[f64], gamma: f64, lambda: f64) -> FittedCalibration {
        FittedCalibration::from_parameters(prob, theta, &[gamma], lambda).unwrap()
    }

    #[test]
    fn gasp_prediction_limits_and_oracle() {
        let prob = random_problem(6, 4, ModelKind::Gasp, 0.0);
        let theta = [0.1, 0.2];
        let fit = fitted(&prob, &theta, 0.3, 1e-12);
        let pred = gasp_predict(&fit, &prob, prob.design(), Target::Reality).unwrap();
        for (m, y) in pred.mean.iter().zip(prob.observations().iter()) {
            assert!((m - y).abs() < 1e-6);
        }

        let prob = CalibrationProblem::new(
            prob.design().clone(),
            prob.observations().iter().copied().collect(),
            linear_sim(),
            vec![(-3.0, 3.0); 2],
            KernelSpec::matern52(vec![1e-3]).unwrap(),
            ModelKind::Gasp,
            LambdaZPolicy::Fixed(0.0),
        )
        .unwrap();
        let fit = fitted(&prob, &theta, 1e-3, 0.1);
        let far = DesignSet::from_rows(&[vec![0.9999]], Provenance::File).unwrap();
        let far = if prob.design().rows().any(|x| (x[0] - 0.9999).abs() < 0.05) {
            DesignSet::from_rows(&[vec![0.0001]], Provenance::File).unwrap()
        } else {
            far
        };
        let pred = gasp_predict(&fit, &prob, &far, Target::Reality).unwrap();
        let f = theta[0] + theta[1] * far.row(0)[0];
        assert!((pred.mean[0] - f).abs() < 1e-8);
        assert_relative_eq!(pred.variance[0], fit.sigma_sq * (1.0 + 1e-8), max_relative = 1e-8);

        // explicit formula oracle, n = 3
        let prob = random_problem(3, 12, ModelKind::Gasp, 0.0);
        let (gamma, lambda) = (0.5, 0.07);
        let fit = fitted(&prob, &theta, gamma, lambda);
        let xs = uniform(5, 1, 99).unwrap();
        let pred = gasp_predict(&fit, &prob, &xs, Target::Field).unwrap();
        let spec = prob.kernel.with_ranges(vec![gamma]).unwrap();
        let r = correlation_matrix(prob.design(), &spec).unwrap();
        let ainv = (r + DMatrix::identity(3, 3) * (3.0 * lambda)).try_inverse().unwrap();
        let e = prob.residuals(&theta).unwrap();
        let s2 = (e.transpose() * &ainv * &e)[(0, 0)];
        let sigma_sq = s2 / 3.0;
        for (i, x) in xs.rows().enumerate() {
            let rv = cross_correlation(x, prob.design(), &spec).unwrap();
            let mean = theta[0] + theta[1] * x[0] + (rv.transpose() * &ainv * &e)[(0, 0)];
            let var = sigma_sq * (1.0 + 1e-8 - (rv.transpose() * &ainv * &rv)[(0, 0)])
                + lambda * s2;
            assert!((pred.mean[i] - mean).abs() <= 1e-10);
            assert!((pred.variance[i] - var).abs() <= 1e-10);
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let prob = random_problem(4, 1, ModelKind::Gasp, 0.0);
        let fit = fitted(&prob, &[0.0, 0.0], 0.3, 0.1);
        assert!(matches!(
            sgasp_predict(&fit, &prob, prob.design(), Target::Reality),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn sgasp_matches_transformed_kernel_predictor() {
        for seed in 0..5 {
            let mut prob = random_problem(4, seed, ModelKind::Sgasp, 6.0);
            prob.kernel = prob.kernel.clone().with_nugget(0.0).unwrap();
            let theta = [0.2, -0.1];
            let (gamma, lambda) = (0.35, 0.05);
            let fit = fitted(&prob, &theta, gamma, lambda);
            let spec = prob.kernel.with_ranges(vec![gamma]).unwrap();
            let tk = TransformedKernel::new(prob.design(), &spec, 6.0).unwrap();
            let rzd = tk.gram(prob.design()).unwrap();
            let a = rzd + DMatrix::identity(4, 4) * (4.0 * lambda);
            let coef = a.try_inverse().unwrap() * prob.residuals(&theta).unwrap();
            let xs = uniform(6, 1, seed + 100).unwrap();
            let pred = sgasp_predict(&fit, &prob, &xs, Target::Reality).unwrap();
            for (i, x) in xs.rows().enumerate() {
                let rz = DVector::from_iterator(
                    4,
                    prob.design().rows().map(|xi| tk.eval(x, xi).unwrap()),
                );
                let mean = theta[0] + theta[1] * x[0] + rz.dot(&coef);
                assert!((pred.mean[i] - mean).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn sample_discrepancy_is_deterministic() {
        let x = uniform(3, 1, 1).unwrap();
        let spec = KernelSpec::matern52(vec![0.3]).unwrap();
        let a = sample_discrepancy(&x, &spec, 2.0, 1.5, 10, 77).unwrap();
        let b = sample_discrepancy(&x, &spec, 2.0, 1.5, 10, 77).unwrap();
        assert_eq!(a, b);
        assert!(sample_discrepancy(&x, &spec, 2.0, 0.0, 10, 77).is_err());
    }

    #[test]
    fn sample_covariance_matches_gasp() {
        let x = DesignSet::from_rows(&[vec![0.1], vec![0.4], vec![0.8]], Provenance::File).unwrap();
        let spec = KernelSpec::matern52(vec![0.4]).unwrap();
        let sigma_sq = 2.0;
        let draws = 50_000;
        let s = sample_discrepancy(&x, &spec, 0.0, sigma_sq, draws, 5).unwrap();
        let r = correlation_matrix(&x, &spec).unwrap() * sigma_sq;
        for i in 0..3 {
            for j in 0..3 {
                let prod: Vec<f64> = (0..draws).map(|d| s[(d, i)] * s[(d, j)]).collect();
                let mean = prod.iter().sum::<f64>() / draws as f64;
                let var = prod.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
                let se = (var / draws as f64).sqrt();
                assert!((mean - r[(i, j)]).abs() < 3.0 * se + 1e-12, "({i},{j}) {mean} vs {}", r[(i, j)]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn zero_lambda_z_reproduces_gasp(seed in any::<u64>(), n in 2usize..10, log_l in -6.0f64..1.0) {
            let prob = random_problem(n, seed, ModelKind::Gasp, 0.0);
            let theta = [0.3, -0.2];
            let g = gasp_neg_profile_loglik(&theta, &[0.3f64.ln()], log_l, &prob).unwrap();
            let s = sgasp_neg_profile_loglik(&theta, &[0.3f64.ln()], log_l, 0.0, &prob).unwrap();
            prop_assert!((g - s).abs() <= 1e-10);
        }

        #[test]
        fn krr_equivalence(seed in any::<u64>(), n in 2usize..7, log_l in -5.0f64..0.0, lz in 0.0f64..20.0) {
            let prob = random_problem(n, seed, ModelKind::Sgasp, lz);
            let n = prob.n();
            let lambda = log_l.exp();
            let theta = [0.1, 0.4];
            let e = prob.residuals(&theta).unwrap();
            let cov = EffectiveCovariance::new(prob.design(), &prob.kernel, lambda, lz).unwrap();
            let profiled = lambda * cov.quadratic_form(&e).unwrap();

            // minimize (1/n)‖e − Rw‖² + λ(wᵀRw + (λ_z/n)‖Rw‖²) through its normal equations
            let r = correlation_matrix(prob.design(), &prob.kernel).unwrap();
            let nf = n as f64;
            let h = &r * &r / nf + &r * lambda + &r * &r * (lambda * lz / nf);
            let rhs = &r * &e / nf;
            let w = h.lu().solve(&rhs).unwrap();
            let rw = &r * &w;
            let loss = (&e - &rw).norm_squared() / nf
                + lambda * (w.dot(&rw) + lz / nf * rw.norm_squared());
            prop_assert!((loss - profiled).abs() <= 1e-8 * profiled.abs().max(1.0));
        }

        #[test]
        fn discrete_norm_identity(seed in any::<u64>(), n in 2usize..7, lz in 0.0f64..30.0, range in 0.05f64..0.4) {
            let x = maximin_lhs(n, 1, seed, 2).unwrap();
            let spec = KernelSpec::matern52(vec![range]).unwrap().with_nugget(0.0).unwrap();
            let r = correlation_matrix(&x, &spec).unwrap();
            let rzd = TransformedKernel::new(&x, &spec, lz).unwrap().gram(&x).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let lhs = g.dot(&linalg::cholesky(&((&rzd + rzd.transpose()) * 0.5)).unwrap().solve(&g).unwrap());
            let rhs = g.dot(&linalg::cholesky(&r).unwrap().solve(&g).unwrap()) + lz / n as f64 * g.dot(&g);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        }

        #[test]
        fn predictive_variance_nonnegative(seed in any::<u64>(), n in 2usize..9, log_l in -12.0f64..1.0, lz in 0.0f64..1e3, range in 0.01f64..3.0) {
            let kind = if lz < 1.0 { ModelKind::Gasp } else { ModelKind::Sgasp };
            let prob = random_problem(n, seed, kind, lz);
            let fit = FittedCalibration::from_parameters(&prob, &[0.0, 0.5], &[range], log_l.exp()).unwrap();
            let xs = uniform(8, 1, seed ^ 1).unwrap();
            for target in [Target::Reality, Target::Field] {
                let pred = predict(&fit, &prob, &xs, target).unwrap();
                prop_assert!(pred.variance.iter().all(|v| *v >= 0.0 && v.is_finite()));
            }
        }

        #[test]
        fn translation_equivariance(seed in any::<u64>(), c in -50.0f64..50.0, lz in 0.0f64..10.0) {
            let prob = random_problem(5, seed, ModelKind::Sgasp, lz);
            let shifted_sim: Arc<dyn Simulator> = Arc::new(FnSimulator::new(2, move |x: &[f64], t: &[f64]| {
                t[0] + t[1] * x[0] + c
            }));
            let shifted = CalibrationProblem::new(
                prob.design().clone(),
                prob.observations().iter().map(|y| y + c).collect(),
                shifted_sim,
                prob.theta_bounds().to_vec(),
                prob.kernel().clone(),
                prob.kind(),
                prob.lambda_z_policy(),
            ).unwrap();
            let theta = [0.2, 0.3];
            let a = FittedCalibration::from_parameters(&prob, &theta, &[0.3], 0.05).unwrap();
            let b = FittedCalibration::from_parameters(&shifted, &theta, &[0.3], 0.05).unwrap();
            prop_assert!((a.objective - b.objective).abs() <= 1e-7 * a.objective.abs().max(1.0));
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert!((wa - wb).abs() <= 1e-8 * (1.0 + c.abs()));
            }
            let xs = uniform(4, 1, seed).unwrap();
            let pa = a.predict_mean(&prob, &xs).unwrap();
            let pb = b.predict_mean(&shifted, &xs).unwrap();
            for (ma, mb) in pa.iter().zip(&pb) {
                prop_assert!((mb - ma - c).abs() <= 1e-8 * (1.0 + c.abs()));
            }
        }

        #[test]
        fn sgasp_discrepancy_shrinks_with_lambda_z(seed in any::<u64>(), lz in 0.0f64..100.0, extra in 0.1f64..100.0, log_l in -8.0f64..0.0) {
            let prob = random_problem(6, seed, ModelKind::Sgasp, 0.0);
            let e = prob.residuals(&[0.0, 0.0]).unwrap();
            let norm = |l: f64| {
                let cov = EffectiveCovariance::new(prob.design(), prob.kernel(), log_l.exp(), l).unwrap();
                (cov.correlation() * cov.weights(&e).unwrap()).norm()
            };
            prop_assert!(norm(lz + extra) <= norm(lz) * (1.0 + 1e-10));
        }
    }
}
