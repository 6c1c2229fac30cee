//! Background error covariance: NMC estimation of the vertical covariance,
//! its EOF square root, a periodic recursive filter for horizontal
//! correlation, and the control-variable transform built from both.
//!
//! The control-variable transform is `dx = U v` with
//! `U = S * (V (x) a F)`: `F` is the recursive filter applied to each mode
//! field, `a` normalises its square to unit variance, `V` is the truncated
//! EOF square root and `S` the per-level variance scaling. The implied
//! background covariance is `B = U U^T`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::real::Real;

/// Differences of forecast pairs valid at the same time (e.g. 12 h minus
/// 24 h lead), one temperature profile per sample.
#[derive(Clone, Debug)]
pub struct ForecastPairSet {
    samples: Vec<Vec<f64>>,
}

impl ForecastPairSet {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientSamples(samples.len()));
        }
        let n = samples[0].len();
        if n == 0 || samples.iter().any(|s| s.len() != n) {
            return Err(Error::ShapeMismatch("forecast difference samples differ in length".into()));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast difference sample".into()));
        }
        Ok(Self { samples })
    }

    /// Pairs up short- and long-lead forecasts and stores their differences.
    pub fn from_forecasts(short_lead: &[Vec<f64>], long_lead: &[Vec<f64>]) -> Result<Self> {
        if short_lead.len() != long_lead.len() {
            return Err(Error::ShapeMismatch("unequal forecast counts".into()));
        }
        let diffs = short_lead
            .iter()
            .zip(long_lead)
            .map(|(a, b)| {
                if a.len() != b.len() {
                    return Err(Error::ShapeMismatch("forecast profiles differ in length".into()));
                }
                Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(diffs)
    }

    pub fn n_levels(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }
}

/// Symmetric vertical covariance with its eigendecomposition (eigenvalues
/// descending, negatives from round-off clamped to zero).
#[derive(Clone, Debug)]
pub struct VerticalCovariance {
    matrix: DMatrix<f64>,
    correlation: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

impl VerticalCovariance {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::ShapeMismatch(format!("covariance must be square, got {}x{}", n, matrix.ncols())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance entry".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidParameter(format!("covariance not symmetric (max asymmetry {asym:e})")));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(matrix.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let max_eig = eig.eigenvalues[order[0]].max(0.0);
        let mut eigenvalues = DVector::zeros(n);
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let lambda = eig.eigenvalues[src];
            if lambda < -1e-8 * max_eig.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidParameter(format!("covariance has negative eigenvalue {lambda:e}")));
            }
            eigenvalues[dst] = lambda.max(0.0);
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }

        let sd: Vec<f64> = (0..n).map(|i| matrix[(i, i)].max(0.0).sqrt()).collect();
        let correlation = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if sd[i] > 0.0 && sd[j] > 0.0 {
                (matrix[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        });
        Ok(Self { matrix, correlation, eigenvalues, eigenvectors })
    }

    pub fn n_levels(&self) -> usize {
        self.matrix.nrows()
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.correlation
    }
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn std_dev(&self) -> Vec<f64> {
        (0..self.n_levels()).map(|i| self.matrix[(i, i)].sqrt()).collect()
    }

    /// Number of modes above the rank tolerance.
    pub fn rank(&self) -> usize {
        let cut = RANK_TOLERANCE * self.eigenvalues[0];
        self.eigenvalues.iter().filter(|&&l| l > cut && l > 0.0).count()
    }

    fn spectral_apply(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let rank = self.rank();
        let e = self.eigenvectors.columns(0, rank);
        let coeffs = e.tr_mul(&DVector::from_column_slice(x));
        let scaled = DVector::from_iterator(rank, coeffs.iter().enumerate().map(|(m, &c)| c * f(self.eigenvalues[m])));
        (e * scaled).iter().copied().collect()
    }

    /// `B^+ x`, with null-space modes projected out.
    pub fn pseudo_inverse_apply(&self, x: &[f64]) -> Vec<f64> {
        self.spectral_apply(x, |l| 1.0 / l)
    }

    /// Orthogonal projection onto the range of B.
    pub fn project_to_range(&self, x: &[f64]) -> Vec<f64> {
        self.spectral_apply(x, |_| 1.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).iter().copied().collect()
    }

    /// Correlation matrix as comma-separated rows.
    pub fn correlation_table(&self) -> String {
        let mut out = String::new();
        for row in self.correlation.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Vertical covariance by the NMC method: half the sample covariance of the
/// forecast differences.
pub fn nmc_vertical_covariance(pairs: &ForecastPairSet) -> Result<VerticalCovariance> {
    let n = pairs.n_levels();
    let count = pairs.samples.len();
    let mut mean = vec![0.0; n];
    for s in &pairs.samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for s in &pairs.samples {
        let dev = DVector::from_iterator(n, s.iter().zip(&mean).map(|(v, m)| v - m));
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    cov *= 0.5 / (count as f64 - 1.0);
    VerticalCovariance::from_matrix(cov)
}

/// Leading EOFs scaled by `sqrt(eigenvalue)` capturing at least
/// `mode_fraction` of the total variance; zero modes are always dropped.
pub fn factor_vertical_sqrt(cov: &VerticalCovariance, mode_fraction: f64) -> Result<DMatrix<f64>> {
    if !(mode_fraction > 0.0 && mode_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("mode_fraction {mode_fraction} outside (0, 1]")));
    }
    let lambda = cov.eigenvalues();
    let total: f64 = lambda.iter().sum();
    let rank = cov.rank();
    let mut modes = 0;
    let mut captured = 0.0;
    while modes < rank && captured < mode_fraction * total * (1.0 - 1e-12) {
        captured += lambda[modes];
        modes += 1;
    }
    let n = cov.n_levels();
    Ok(DMatrix::from_fn(n, modes, |i, m| cov.eigenvectors()[(i, m)] * lambda[m].sqrt()))
}

/// Periodic first-order recursive filter. One pass is a forward sweep
/// followed by a backward sweep, i.e. `F^T F` with
/// `F = (1 - alpha) (I - alpha S)^-1` on a cyclic line. The coefficient is
/// chosen so `passes` passes have impulse-response variance `lengthscale^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecursiveFilter<T> {
    alpha: T,
    passes: usize,
}

impl<T: Real> RecursiveFilter<T> {
    pub fn new(lengthscale: T, passes: usize) -> Result<Self> {
        if !(lengthscale > T::zero() && lengthscale.is_finite()) {
            return Err(Error::InvalidParameter("filter lengthscale must be positive".into()));
        }
        if passes == 0 {
            return Err(Error::InvalidParameter("filter needs at least one pass".into()));
        }
        // alpha / (1 - alpha)^2 = L^2 / (2 n)
        let e = lengthscale * lengthscale / (T::lit(2.0) * T::from_usize_lossy(passes));
        let two = T::lit(2.0);
        let alpha = ((two * e + T::one()) - (T::lit(4.0) * e + T::one()).sqrt()) / (two * e);
        Ok(Self { alpha, passes })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    fn sweep_forward(&self, line: &mut [T]) {
        let n = line.len();
        let a = self.alpha;
        let gain = T::one() - a;
        // Steady cyclic start value: y_0 = (1-a) / (1-a^n) sum_m a^m x_{-m}.
        let mut acc = T::zero();
        let mut pow = T::one();
        for m in 0..n {
            acc += pow * line[(n - m) % n];
            pow *= a;
        }
        let mut prev = gain * acc / (T::one() - pow);
        line[0] = prev;
        for v in line.iter_mut().skip(1) {
            prev = a * prev + gain * *v;
            *v = prev;
        }
    }

    fn sweep_backward(&self, line: &mut [T]) {
        line.reverse();
        self.sweep_forward(line);
        line.reverse();
    }

    pub fn smooth_line(&self, line: &mut [T]) {
        if line.len() < 2 {
            return;
        }
        for _ in 0..self.passes {
            self.sweep_forward(line);
            self.sweep_backward(line);
        }
    }

    /// Filters along x (axis 1) then y (axis 0).
    pub fn apply(&self, field: ArrayView2<T>) -> Array2<T> {
        let mut out = field.to_owned();
        let mut buf = Vec::new();
        for axis in [Axis(1), Axis(0)] {
            for mut lane in out.lanes_mut(axis) {
                buf.clear();
                buf.extend(lane.iter().copied());
                self.smooth_line(&mut buf);
                lane.iter_mut().zip(&buf).for_each(|(d, &s)| *d = s);
            }
        }
        out
    }
}

pub fn recursive_filter_apply<T: Real>(field: ArrayView2<T>, lengthscale: T, passes: usize) -> Result<Array2<T>> {
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter input".into()));
    }
    Ok(RecursiveFilter::new(lengthscale, passes)?.apply(field))
}

#[derive(Clone, Debug)]
pub struct CvtSpec {
    /// n_levels x n_modes.
    pub vertical_sqrt: DMatrix<f64>,
    /// Grid cells.
    pub horizontal_lengthscale: f64,
    pub filter_passes: usize,
    pub variance_scale: Vec<f64>,
}

impl CvtSpec {
    pub fn new(vertical_sqrt: DMatrix<f64>, horizontal_lengthscale: f64, filter_passes: usize) -> Self {
        let n = vertical_sqrt.nrows();
        Self { vertical_sqrt, horizontal_lengthscale, filter_passes, variance_scale: vec![1.0; n] }
    }

    pub fn n_levels(&self) -> usize {
        self.vertical_sqrt.nrows()
    }
    pub fn n_modes(&self) -> usize {
        self.vertical_sqrt.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modes() > self.n_levels() {
            return Err(Error::InvalidParameter("more modes than levels".into()));
        }
        if self.variance_scale.len() != self.n_levels() {
            return Err(Error::ShapeMismatch("variance_scale length differs from n_levels".into()));
        }
        if !(self.horizontal_lengthscale > 0.0) {
            return Err(Error::InvalidParameter("horizontal lengthscale must be positive".into()));
        }
        Ok(())
    }
}

/// The control-variable transform bound to a grid shape.
#[derive(Clone, Debug)]
pub struct Cvt {
    spec: CvtSpec,
    nx: usize,
    ny: usize,
    filter: RecursiveFilter<f64>,
    amplitude: f64,
}

impl Cvt {
    pub fn new(spec: CvtSpec, nx: usize, ny: usize) -> Result<Self> {
        spec.validate()?;
        if nx == 0 || ny == 0 {
            return Err(Error::ShapeMismatch("empty grid".into()));
        }
        let filter = RecursiveFilter::new(spec.horizontal_lengthscale, spec.filter_passes)?;
        let mut impulse = Array2::zeros((ny, nx));
        impulse[(0, 0)] = 1.0;
        let response = filter.apply(impulse.view());
        let amplitude = 1.0 / response.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { spec, nx, ny, filter, amplitude })
    }

    pub fn spec(&self) -> &CvtSpec {
        &self.spec
    }
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        (self.spec.n_levels(), self.ny, self.nx)
    }
    pub fn control_len(&self) -> usize {
        self.spec.n_modes() * self.nx * self.ny
    }

    /// `dx = U v`; `v` is mode-major, then y, then x.
    pub fn apply(&self, v: &[f64]) -> Result<Array3<f64>> {
        if v.len() != self.control_len() {
            return Err(Error::ShapeMismatch(format!("control vector length {} != {}", v.len(), self.control_len())));
        }
        let (nl, ny, nx) = self.grid_shape();
        let cells = nx * ny;
        let filtered: Vec<Array2<f64>> = v
            .chunks(cells)
            .map(|mode| {
                let f = ArrayView2::from_shape((ny, nx), mode).expect("mode field shape");
                self.filter.apply(f)
            })
            .collect();
        let mut out = Array3::zeros((nl, ny, nx));
        for (l, mut level) in out.axis_iter_mut(Axis(0)).enumerate() {
            let scale = self.amplitude * self.spec.variance_scale[l];
            for (m, f) in filtered.iter().enumerate() {
                let w = scale * self.spec.vertical_sqrt[(l, m)];
                if w != 0.0 {
                    level.scaled_add(w, f);
                }
            }
        }
        Ok(out)
    }

    /// `v* = U^T dx*`.
    pub fn adjoint(&self, dx_star: &Array3<f64>) -> Result<Vec<f64>> {
        let (nl, ny, nx) = self.grid_shape();
        if dx_star.dim() != (nl, ny, nx) {
            return Err(Error::ShapeMismatch(format!("increment shape {:?} != {:?}", dx_star.dim(), (nl, ny, nx))));
        }
        let mut out = Vec::with_capacity(self.control_len());
        for m in 0..self.spec.n_modes() {
            let mut acc = Array2::<f64>::zeros((ny, nx));
            for (l, level) in dx_star.axis_iter(Axis(0)).enumerate() {
                let w = self.amplitude * self.spec.variance_scale[l] * self.spec.vertical_sqrt[(l, m)];
                if w != 0.0 {
                    acc.scaled_add(w, &level);
                }
            }
            out.extend(self.filter.apply(acc.view()).iter().copied());
        }
        Ok(out)
    }
}

pub fn cvt_apply(v: &[f64], spec: &CvtSpec, nx: usize, ny: usize) -> Result<Array3<f64>> {
    Cvt::new(spec.clone(), nx, ny)?.apply(v)
}

pub fn cvt_adjoint(dx_star: &Array3<f64>, spec: &CvtSpec, nx: usize, ny: usize) -> Result<Vec<f64>> {
    Cvt::new(spec.clone(), nx, ny)?.adjoint(dx_star)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1_covariance(n: usize, rho: f64, sd: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| sd * sd * rho.powi((i as i32 - j as i32).abs()))
    }

    #[test]
    fn identical_samples_give_zero_covariance() {
        let pairs = ForecastPairSet::new(vec![vec![1.0, 2.0, 3.0]; 5]).unwrap();
        let cov = nmc_vertical_covariance(&pairs).unwrap();
        assert!(cov.matrix().iter().all(|&v| v == 0.0));
        assert_eq!(cov.correlation()[(1, 1)], 1.0);
        assert_eq!(cov.rank(), 0);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(ForecastPairSet::new(vec![vec![1.0]]), Err(Error::InsufficientSamples(1))));
        assert!(ForecastPairSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn two_sample_estimate_is_half_outer_product() {
        let pairs = ForecastPairSet::from_forecasts(&[vec![1.0, 3.0], vec![0.0, 0.0]], &[vec![0.0, 0.0], vec![1.0, 1.0]])
            .unwrap();
        // differences (1, 3) and (-1, -1); deviations (1, 2) and (-1, -2)
        let cov = nmc_vertical_covariance(&pairs).unwrap();
        let expected: [[f64; 2]; 2] = [[1.0, 2.0], [2.0, 4.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((cov.matrix()[(i, j)] - expected[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn full_factorisation_reconstructs() {
        let c = ar1_covariance(8, 0.7, 1.3);
        let cov = VerticalCovariance::from_matrix(c.clone()).unwrap();
        let u = factor_vertical_sqrt(&cov, 1.0).unwrap();
        assert_eq!(u.ncols(), 8);
        assert!((&u * u.transpose() - c).amax() < 1e-10);
    }

    #[test]
    fn diagonal_covariance_gives_scaled_unit_columns() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 9.0]));
        let u = factor_vertical_sqrt(&VerticalCovariance::from_matrix(c).unwrap(), 1.0).unwrap();
        for col in u.column_iter() {
            assert_eq!(col.iter().filter(|v| v.abs() > 1e-14).count(), 1);
        }
        assert!((u.column(0).amax() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_covariance_drops_zero_mode() {
        let n = 6;
        let mut c = DMatrix::zeros(n, n);
        for k in 0..n - 1 {
            let v = DVector::from_fn(n, |i, _| ((i + 1) as f64 * (k + 2) as f64).sin());
            c += &v * v.transpose();
        }
        let cov = VerticalCovariance::from_matrix(c.clone()).unwrap();
        assert_eq!(cov.rank(), n - 1);
        let u = factor_vertical_sqrt(&cov, 1.0).unwrap();
        assert_eq!(u.ncols(), n - 1);
        assert!((&u * u.transpose() - &c).amax() < 1e-9 * c.amax());
    }

    #[test]
    fn truncation_error_bounded_by_discarded_fraction() {
        let cov = VerticalCovariance::from_matrix(ar1_covariance(20, 0.9, 1.0)).unwrap();
        for frac in [0.5, 0.8, 0.95, 0.99] {
            let u = factor_vertical_sqrt(&cov, frac).unwrap();
            let err = (&u * u.transpose() - cov.matrix()).norm() / cov.matrix().norm();
            assert!(err <= 1.0 - frac + 1e-9, "fraction {frac}: error {err}");
        }
        assert!(factor_vertical_sqrt(&cov, 0.0).is_err());
    }

    #[test]
    fn pseudo_inverse_inverts_on_range() {
        let c = ar1_covariance(5, 0.5, 2.0);
        let cov = VerticalCovariance::from_matrix(c.clone()).unwrap();
        let x = [1.0, -2.0, 0.5, 0.0, 3.0];
        let y = cov.pseudo_inverse_apply(&cov.apply(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn filter_preserves_constants() {
        let field = Array2::from_elem((7, 9), 3.5f64);
        let out = recursive_filter_apply(field.view(), 2.0, 4).unwrap();
        assert!(out.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn filter_rejects_bad_lengthscale() {
        let field = Array2::<f64>::zeros((3, 3));
        assert!(recursive_filter_apply(field.view(), 0.0, 4).is_err());
        assert!(recursive_filter_apply(field.view(), 1.0, 0).is_err());
    }

    #[test]
    fn filter_response_variance_matches_lengthscale() {
        let n = 101;
        let f = RecursiveFilter::new(4.0, 4).unwrap();
        let mut line = vec![0.0; n];
        line[50] = 1.0;
        f.smooth_line(&mut line);
        let var: f64 = line.iter().enumerate().map(|(i, w)| w * (i as f64 - 50.0).powi(2)).sum();
        assert!((var - 16.0).abs() < 1e-6, "variance {var}");
    }

    #[test]
    fn cvt_of_zero_is_zero_and_shapes_checked() {
        let cov = VerticalCovariance::from_matrix(ar1_covariance(4, 0.5, 1.0)).unwrap();
        let spec = CvtSpec::new(factor_vertical_sqrt(&cov, 1.0).unwrap(), 1.5, 4);
        let cvt = Cvt::new(spec, 5, 6).unwrap();
        let dx = cvt.apply(&vec![0.0; cvt.control_len()]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(cvt.apply(&[0.0; 3]).is_err());
        assert!(cvt.adjoint(&Array3::zeros((4, 5, 5))).is_err());
    }

    #[test]
    fn cvt_implied_variance_matches_vertical_covariance() {
        let c = ar1_covariance(4, 0.6, 1.7);
        let cov = VerticalCovariance::from_matrix(c.clone()).unwrap();
        let spec = CvtSpec::new(factor_vertical_sqrt(&cov, 1.0).unwrap(), 2.0, 4);
        let cvt = Cvt::new(spec, 8, 8).unwrap();
        // B e for a unit impulse at level 1, cell (3, 4): the value at the
        // impulse location recovers the vertical covariance column.
        let mut e = Array3::zeros((4, 8, 8));
        e[(1, 3, 4)] = 1.0;
        let col = cvt.apply(&cvt.adjoint(&e).unwrap()).unwrap();
        for l in 0..4 {
            assert!((col[(l, 3, 4)] - c[(l, 1)]).abs() < 1e-10, "level {l}");
        }
    }
}
