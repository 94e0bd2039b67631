//! Matérn correlations, product kernels, Gram matrices, and the transformed
//! kernel of the discretized scaled process.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor};

/// Default diagonal jitter added to Gram matrices.
pub const DEFAULT_NUGGET: f64 = 1e-8;

/// Half-integer Matérn smoothness with a closed-form correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[serde(rename = "5/2")]
    FiveHalves,
}

impl Smoothness {
    pub fn value(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" => Ok(Smoothness::Half),
            "3/2" | "1.5" => Ok(Smoothness::ThreeHalves),
            "5/2" | "2.5" => Ok(Smoothness::FiveHalves),
            other => Err(Error::domain(format!(
                "unsupported Matérn smoothness {other:?} (use 1/2, 3/2 or 5/2)"
            ))),
        }
    }
}

#[inline]
fn matern_unchecked(d: f64, range: f64, nu: Smoothness) -> f64 {
    let t = d / range;
    match nu {
        Smoothness::Half => (-t).exp(),
        Smoothness::ThreeHalves => {
            let s = 3f64.sqrt() * t;
            (1.0 + s) * (-s).exp()
        }
        Smoothness::FiveHalves => {
            let s = 5f64.sqrt() * t;
            (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    }
}

/// One-dimensional Matérn correlation at distance `d` with range `range`.
pub fn matern_1d(d: f64, range: f64, nu: Smoothness) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::domain(format!("distance must be finite and >= 0, got {d}")));
    }
    if !range.is_finite() || range <= 0.0 {
        return Err(Error::domain(format!("range must be positive, got {range}")));
    }
    Ok(matern_unchecked(d, range, nu))
}

/// Product Matérn correlation over `p` input dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    smoothness: Vec<Smoothness>,
    ranges: Vec<f64>,
    nugget: f64,
}

impl KernelSpec {
    pub fn new(smoothness: Vec<Smoothness>, ranges: Vec<f64>, nugget: f64) -> Result<Self> {
        if smoothness.is_empty() {
            return Err(Error::domain("kernel needs at least one dimension"));
        }
        if smoothness.len() != ranges.len() {
            return Err(Error::DimensionMismatch {
                expected: smoothness.len(),
                actual: ranges.len(),
            });
        }
        if let Some(g) = ranges.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::domain(format!("range parameters must be positive, got {g}")));
        }
        if !(nugget.is_finite() && nugget >= 0.0) {
            return Err(Error::domain(format!("nugget must be >= 0, got {nugget}")));
        }
        Ok(Self {
            smoothness,
            ranges,
            nugget,
        })
    }

    /// Matérn-5/2 in every dimension with the default nugget.
    pub fn matern52(ranges: Vec<f64>) -> Result<Self> {
        Self::new(vec![Smoothness::FiveHalves; ranges.len()], ranges, DEFAULT_NUGGET)
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    pub fn smoothness(&self) -> &[Smoothness] {
        &self.smoothness
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn with_nugget(mut self, nugget: f64) -> Result<Self> {
        self.nugget = nugget;
        Self::new(self.smoothness, self.ranges, self.nugget)
    }

    pub fn with_ranges(&self, ranges: Vec<f64>) -> Result<Self> {
        Self::new(self.smoothness.clone(), ranges, self.nugget)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("input point has non-finite coordinates"));
        }
        Ok(())
    }

    /// `K(xa, xb) = Π_i K_i(|xa_i − xb_i|)`, without nugget.
    pub fn correlation(&self, xa: &[f64], xb: &[f64]) -> Result<f64> {
        self.check_point(xa)?;
        self.check_point(xb)?;
        Ok(self.correlation_unchecked(xa, xb))
    }

    #[inline]
    pub(crate) fn correlation_unchecked(&self, xa: &[f64], xb: &[f64]) -> f64 {
        let mut k = 1.0;
        for i in 0..xa.len() {
            k *= matern_unchecked((xa[i] - xb[i]).abs(), self.ranges[i], self.smoothness[i]);
        }
        k
    }

    fn check_design(&self, design: &DesignSet) -> Result<()> {
        if design.p() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: design.p(),
            });
        }
        Ok(())
    }
}

/// Product correlation between two points.
pub fn product_correlation(xa: &[f64], xb: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.correlation(xa, xb)
}

/// Raw correlation matrix over a design with the nugget on the diagonal.
pub fn correlation_matrix(design: &DesignSet, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.check_design(design)?;
    let n = design.n();
    let mut r = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = design.row(j);
        r[(j, j)] = 1.0 + spec.nugget;
        for i in (j + 1)..n {
            let k = spec.correlation_unchecked(design.row(i), xj);
            r[(i, j)] = k;
            r[(j, i)] = k;
        }
    }
    Ok(r)
}

/// `r(x) = (K(x_1, x), ..., K(x_n, x))ᵀ`, no nugget.
pub fn cross_correlation(
    xstar: &[f64],
    design: &DesignSet,
    spec: &KernelSpec,
) -> Result<DVector<f64>> {
    spec.check_design(design)?;
    spec.check_point(xstar)?;
    Ok(DVector::from_iterator(
        design.n(),
        design.rows().map(|xi| spec.correlation_unchecked(xi, xstar)),
    ))
}

/// Cross-correlations of every test point (rows) against the design (columns).
pub fn cross_matrix(
    test: &DesignSet,
    design: &DesignSet,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.check_design(design)?;
    spec.check_design(test)?;
    Ok(DMatrix::from_fn(test.n(), design.n(), |i, j| {
        spec.correlation_unchecked(design.row(j), test.row(i))
    }))
}

/// Correlation matrix over a design together with its (lazily computed)
/// Cholesky factor. Immutable once built.
#[derive(Debug)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    factor: OnceLock<std::result::Result<CholFactor, usize>>,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Cholesky factor, computed on first use.
    pub fn factor(&self) -> Result<&CholFactor> {
        self.factor
            .get_or_init(|| match linalg::cholesky_unchecked(&self.matrix) {
                Ok(f) => Ok(f),
                Err(Error::NotPositiveDefinite { pivot }) => Err(pivot),
                Err(_) => Err(0),
            })
            .as_ref()
            .map_err(|&pivot| Error::IllConditioned { pivot })
    }
}

/// Gram matrix `R_ij = K(x_i, x_j)` (+ nugget on the diagonal), checked to
/// be factorizable.
pub fn gram_matrix(design: &DesignSet, spec: &KernelSpec) -> Result<GramMatrix> {
    let gram = GramMatrix {
        matrix: correlation_matrix(design, spec)?,
        factor: OnceLock::new(),
    };
    gram.factor()?;
    Ok(gram)
}

/// Covariance kernel of the discretized scaled process,
/// `K_zd(xa, xb) = K(xa, xb) − r(xa)ᵀ (R + n/λ_z I)⁻¹ r(xb)`,
/// with the discretization points fixed at construction.
///
/// The inverse is evaluated as `(λ_z/n)(I + (λ_z/n) R)⁻¹`, which stays
/// well conditioned for every `λ_z ≥ 0`.
#[derive(Debug)]
pub struct TransformedKernel {
    spec: KernelSpec,
    points: DesignSet,
    lambda_z: f64,
    shrink: Option<CholFactor>,
}

impl TransformedKernel {
    pub fn new(points: &DesignSet, spec: &KernelSpec, lambda_z: f64) -> Result<Self> {
        if !(lambda_z.is_finite() && lambda_z >= 0.0) {
            return Err(Error::domain(format!("lambda_z must be >= 0, got {lambda_z}")));
        }
        spec.check_design(points)?;
        let shrink = if lambda_z == 0.0 {
            None
        } else {
            let r = correlation_matrix(points, spec)?;
            Some(shrink_factor(&r, lambda_z)?)
        };
        Ok(Self {
            spec: spec.clone(),
            points: points.clone(),
            lambda_z,
            shrink,
        })
    }

    pub fn eval(&self, xa: &[f64], xb: &[f64]) -> Result<f64> {
        let base = self.spec.correlation(xa, xb)?;
        let Some(m) = &self.shrink else {
            return Ok(base);
        };
        let ra = cross_correlation(xa, &self.points, &self.spec)?;
        let rb = cross_correlation(xb, &self.points, &self.spec)?;
        let scale = self.lambda_z / self.points.n() as f64;
        Ok(base - scale * ra.dot(&m.solve(&rb)?))
    }

    /// Matrix of `K_zd` over a set of points.
    pub fn gram(&self, points: &DesignSet) -> Result<DMatrix<f64>> {
        let n = points.n();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(points.row(i), points.row(j))?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

/// Cholesky factor of `M = I + (λ_z/n) R`.
pub(crate) fn shrink_factor(r: &DMatrix<f64>, lambda_z: f64) -> Result<CholFactor> {
    let n = r.nrows();
    let m = DMatrix::identity(n, n) + r * (lambda_z / n as f64);
    linalg::cholesky_unchecked(&m)
}

/// Transformed-kernel value for a single pair of points.
pub fn sgasp_kernel(
    xa: &[f64],
    xb: &[f64],
    disc: &DesignSet,
    spec: &KernelSpec,
    lambda_z: f64,
) -> Result<f64> {
    if lambda_z == 0.0 {
        return spec.correlation(xa, xb);
    }
    TransformedKernel::new(disc, spec, lambda_z)?.eval(xa, xb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{equispaced, uniform, Provenance};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// (1 + √5 + 5/3) e^{-√5}, evaluated independently of `matern_unchecked`.
    fn matern52_at_one() -> f64 {
        let s5 = 2.236_067_977_499_79_f64;
        (1.0 + s5 + 5.0 / 3.0) * (-s5).exp()
    }

    #[test]
    fn matern_closed_forms() {
        assert_eq!(matern_1d(0.0, 1.0, Smoothness::FiveHalves).unwrap(), 1.0);
        let v = matern_1d(1.0, 1.0, Smoothness::FiveHalves).unwrap();
        assert_relative_eq!(v, matern52_at_one(), epsilon = 1e-15);
        assert!((v - 0.523_994).abs() < 5e-7);
        let v = matern_1d(2.0, 1.0, Smoothness::Half).unwrap();
        assert_relative_eq!(v, (-2f64).exp(), epsilon = 1e-16);
        assert!((v - 0.135_335).abs() < 5e-7);
    }

    #[test]
    fn matern_domain_errors() {
        assert!(matern_1d(-0.1, 1.0, Smoothness::Half).is_err());
        assert!(matern_1d(f64::NAN, 1.0, Smoothness::Half).is_err());
        assert!(matern_1d(f64::INFINITY, 1.0, Smoothness::Half).is_err());
        assert!(matern_1d(0.1, 0.0, Smoothness::Half).is_err());
        assert!(matern_1d(0.1, -2.0, Smoothness::Half).is_err());
    }

    #[test]
    fn matern_monotone_on_grid() {
        for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            let mut prev = matern_1d(0.0, 0.3, nu).unwrap();
            let near = matern_1d(1e-9, 0.3, nu).unwrap();
            assert!((prev - near).abs() < 1e-8);
            for i in 1..=1000 {
                let v = matern_1d(i as f64 * 0.002, 0.3, nu).unwrap();
                assert!(v < prev && v > 0.0);
                prev = v;
            }
            assert!(matern_1d(1e3, 0.3, nu).unwrap() < 1e-100);
        }
    }

    #[test]
    fn product_correlation_cases() {
        let spec = KernelSpec::matern52(vec![1.0, 1.0]).unwrap();
        assert_eq!(product_correlation(&[0.2, 0.7], &[0.2, 0.7], &spec).unwrap(), 1.0);
        let v = product_correlation(&[1.0, 0.4], &[0.0, 0.4], &spec).unwrap();
        assert_relative_eq!(v, matern52_at_one(), epsilon = 1e-15);
        assert!(product_correlation(&[0.1], &[0.2, 0.3], &spec).is_err());

        let spec1 = KernelSpec::matern52(vec![0.4]).unwrap();
        for d in [0.0, 0.1, 0.5, 0.9] {
            assert_relative_eq!(
                product_correlation(&[0.05], &[0.05 + d], &spec1).unwrap(),
                matern_1d(d, 0.4, Smoothness::FiveHalves).unwrap(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn gram_small_cases() {
        let spec = KernelSpec::matern52(vec![1.0]).unwrap();
        let single = DesignSet::from_rows(&[vec![0.3]], Provenance::File).unwrap();
        let g = gram_matrix(&single, &spec).unwrap();
        assert_eq!(g.matrix()[(0, 0)], 1.0 + DEFAULT_NUGGET);

        let dup = DesignSet::from_rows(&[vec![0.3], vec![0.3]], Provenance::File).unwrap();
        let spec0 = spec.clone().with_nugget(0.0).unwrap();
        assert!(matches!(
            gram_matrix(&dup, &spec0),
            Err(Error::IllConditioned { pivot: 2 })
        ));

        let x = equispaced(3, 1).unwrap();
        let g = gram_matrix(&x, &spec0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let oracle = product_correlation(x.row(i), x.row(j), &spec0).unwrap();
                assert!((g.matrix()[(i, j)] - oracle).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_correlation_cases() {
        let spec = KernelSpec::matern52(vec![0.5, 0.5]).unwrap();
        let x = uniform(2, 2, 5).unwrap();
        let r = cross_correlation(x.row(1), &x, &spec).unwrap();
        assert_eq!(r[1], 1.0);
        let star = [0.33, 0.91];
        let r = cross_correlation(&star, &x, &spec).unwrap();
        for i in 0..2 {
            assert_eq!(r[i], product_correlation(x.row(i), &star, &spec).unwrap());
        }

        let tiny = KernelSpec::matern52(vec![1e-3]).unwrap();
        let x = DesignSet::from_rows(&[vec![0.0], vec![0.1], vec![0.2]], Provenance::File).unwrap();
        let r = cross_correlation(&[0.9], &x, &tiny).unwrap();
        assert!(r.iter().all(|&v| v < 1e-6));
        assert!(cross_correlation(&[0.1, 0.2], &x, &tiny).is_err());
    }

    #[test]
    fn transformed_kernel_small_cases() {
        let spec = KernelSpec::matern52(vec![0.7]).unwrap().with_nugget(0.0).unwrap();
        let x = DesignSet::from_rows(&[vec![0.4]], Provenance::File).unwrap();
        assert_eq!(
            sgasp_kernel(&[0.1], &[0.6], &x, &spec, 0.0).unwrap(),
            spec.correlation(&[0.1], &[0.6]).unwrap()
        );
        let v = sgasp_kernel(&[0.4], &[0.4], &x, &spec, 1.0).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
        assert!(sgasp_kernel(&[0.4], &[0.4], &x, &spec, -1.0).is_err());
    }

    #[test]
    fn transformed_gram_matches_inverse_identity() {
        let spec = KernelSpec::matern52(vec![0.3, 0.6]).unwrap().with_nugget(0.0).unwrap();
        let x = uniform(6, 2, 17).unwrap();
        let lz = 3.5;
        let tk = TransformedKernel::new(&x, &spec, lz).unwrap();
        let g = tk.gram(&x).unwrap();
        let r = correlation_matrix(&x, &spec).unwrap();
        let rinv = r.clone().try_inverse().unwrap();
        let oracle = (rinv + DMatrix::identity(6, 6) * (lz / 6.0)).try_inverse().unwrap();
        assert!((g - oracle).amax() <= 1e-10);
    }

    fn sorted_eigs(m: &DMatrix<f64>) -> DVector<f64> {
        linalg::sym_eigen(&((m + m.transpose()) * 0.5)).unwrap().0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn transformed_eigenvalues_shrink(
            n in 2usize..7,
            seed in any::<u64>(),
            range in 0.1f64..1.0,
            lz in 0.0f64..50.0,
            extra in 0.01f64..50.0,
        ) {
            let spec = KernelSpec::matern52(vec![range]).unwrap().with_nugget(0.0).unwrap();
            let x = uniform(n, 1, seed).unwrap();
            let rho = sorted_eigs(&correlation_matrix(&x, &spec).unwrap());
            let g = TransformedKernel::new(&x, &spec, lz).unwrap().gram(&x).unwrap();
            prop_assert!((&g - g.transpose()).amax() <= 1e-12);
            let mu = sorted_eigs(&g);
            prop_assert!(mu[0] >= -1e-10);
            // eigenvalues compared relative to the spectral norm
            let scale = rho[n - 1];
            for i in 0..n {
                let expect = rho[i] / (1.0 + lz * rho[i] / n as f64);
                prop_assert!((mu[i] - expect).abs() <= 1e-8 * scale);
            }
            let g2 = TransformedKernel::new(&x, &spec, lz + extra).unwrap().gram(&x).unwrap();
            let mu2 = sorted_eigs(&g2);
            for i in 0..n {
                prop_assert!(mu2[i] <= mu[i] + 1e-12);
            }
        }

        #[test]
        fn gram_symmetric_psd(n in 1usize..8, p in 1usize..4, seed in any::<u64>(), range in 0.05f64..2.0) {
            let spec = KernelSpec::matern52(vec![range; p]).unwrap().with_nugget(0.0).unwrap();
            let x = uniform(n, p, seed).unwrap();
            let r = correlation_matrix(&x, &spec).unwrap();
            prop_assert!((&r - r.transpose()).amax() == 0.0);
            prop_assert!(sorted_eigs(&r)[0] >= -1e-10);
        }
    }
}
