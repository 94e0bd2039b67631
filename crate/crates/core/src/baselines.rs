//! Two-step comparison calibrators: L2 calibration and least-squares
//! calibration.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::Result;
use crate::estimation::{
    self, default_grid_resolution, midpoint_grid, FitOptions, L2Oracle, OptimizerConfig,
};
use crate::models::{
    CalibrationProblem, FittedCalibration, LambdaZPolicy, ModelKind, Simulator, ZeroSimulator,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Baseline {
    L2,
    Ls,
}

/// A baseline estimate with its auxiliary GaSP regression.
///
/// For [`Baseline::L2`] the auxiliary fit is the nonparametric estimate of
/// the reality, and it alone predicts the reality. For [`Baseline::Ls`] it
/// models the least-squares residuals.
#[derive(Clone)]
pub struct BaselineFit {
    pub method: Baseline,
    pub theta: Vec<f64>,
    pub auxiliary: FittedCalibration,
    aux_problem: CalibrationProblem,
    simulator: Arc<dyn Simulator>,
}

impl fmt::Debug for BaselineFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BaselineFit")
            .field("method", &self.method)
            .field("theta", &self.theta)
            .field("auxiliary", &self.auxiliary)
            .finish()
    }
}

impl BaselineFit {
    /// `f^M(x, θ̂)` at each row.
    pub fn predict_model(&self, xstar: &DesignSet) -> Result<Vec<f64>> {
        xstar.rows().map(|x| self.simulator.eval(x, &self.theta)).collect()
    }

    /// Predictive mean of the reality at each row.
    pub fn predict_reality(&self, xstar: &DesignSet) -> Result<Vec<f64>> {
        let aux = self.auxiliary.predict_mean(&self.aux_problem, xstar)?;
        match self.method {
            Baseline::L2 => Ok(aux),
            Baseline::Ls => Ok(self
                .predict_model(xstar)?
                .into_iter()
                .zip(aux)
                .map(|(f, d)| f + d)
                .collect()),
        }
    }
}

/// Zero-mean GaSP regression of `y` on the problem's design.
fn regression_problem(prob: &CalibrationProblem, y: Vec<f64>) -> Result<CalibrationProblem> {
    CalibrationProblem::new(
        prob.design().clone(),
        y,
        Arc::new(ZeroSimulator),
        Vec::new(),
        prob.kernel().clone(),
        ModelKind::Gasp,
        LambdaZPolicy::Fixed(0.0),
    )
}

/// L2 calibration: estimate the reality with a zero-mean GaSP, then minimize
/// the grid-quadrature L2 distance between its mean and `f^M(·, θ)`.
pub fn fit_l2(
    prob: &CalibrationProblem,
    resolution: Option<usize>,
    opts: &FitOptions,
) -> Result<BaselineFit> {
    let aux_problem = regression_problem(prob, prob.observations().iter().copied().collect())?;
    let auxiliary = estimation::fit_with(&aux_problem, opts)?.fit;
    let p = prob.design().p();
    let grid = midpoint_grid(p, resolution.unwrap_or_else(|| default_grid_resolution(p)))?;
    let target = auxiliary.predict_mean(&aux_problem, &grid)?;
    let oracle = L2Oracle::from_values(grid, target)?;
    let est = oracle.minimize(prob.simulator().as_ref(), prob.theta_bounds(), &opts.optimizer)?;
    Ok(BaselineFit {
        method: Baseline::L2,
        theta: est.theta,
        auxiliary,
        aux_problem,
        simulator: prob.simulator().clone(),
    })
}

/// Least-squares calibration: `θ̂ = argmin Σ (yᵢ − f^M(xᵢ, θ))²`, then a
/// zero-mean GaSP on the residuals.
pub fn fit_ls(prob: &CalibrationProblem, opts: &FitOptions) -> Result<BaselineFit> {
    let theta = least_squares_theta(prob, &opts.optimizer)?;
    let resid = prob.residuals(&theta)?;
    let aux_problem = regression_problem(prob, resid.iter().copied().collect())?;
    let auxiliary = estimation::fit_with(&aux_problem, opts)?.fit;
    Ok(BaselineFit {
        method: Baseline::Ls,
        theta,
        auxiliary,
        aux_problem,
        simulator: prob.simulator().clone(),
    })
}

/// `argmin_θ Σ (yᵢ − f^M(xᵢ, θ))²` over the parameter box.
pub fn least_squares_theta(prob: &CalibrationProblem, config: &OptimizerConfig) -> Result<Vec<f64>> {
    let objective = |theta: &[f64]| {
        prob.residuals(theta)
            .map_or(f64::INFINITY, |e| e.norm_squared())
    };
    Ok(estimation::multistart_minimize(&objective, prob.theta_bounds(), config)?.x)
}
