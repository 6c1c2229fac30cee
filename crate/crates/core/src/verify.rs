//! Scoring against a known truth: RMSE, block-average regridding and
//! innovation statistics. In the OSSE the verified field is toy-model
//! temperature, standing in for precipitation.

use ndarray::{Array2, ArrayView2, ArrayView, Dimension};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub rmse: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(label: impl Into<String>) -> Self {
        Self { label: label.into(), ..Default::default() }
    }

    pub fn push(&mut self, time: f64, rmse: f64) -> Result<()> {
        if !(rmse >= 0.0) {
            return Err(Error::InvalidParameter(format!("rmse must be non-negative, got {rmse}")));
        }
        self.times.push(time);
        self.rmse.push(rmse);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Rows of `time,rmse,label`, no header.
    pub fn to_rows(&self) -> String {
        self.times.iter().zip(&self.rmse).map(|(t, r)| format!("{t},{r:.6},{}\n", self.label)).collect()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.rmse.is_empty()).then(|| self.rmse.iter().sum::<f64>() / self.rmse.len() as f64)
    }
}

pub fn rmse<T: Real, D: Dimension>(field: ArrayView<T, D>, truth: ArrayView<T, D>) -> Result<T> {
    if field.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", field.shape(), truth.shape())));
    }
    if field.is_empty() {
        return Err(Error::ShapeMismatch("empty field".into()));
    }
    let mut sum = T::zero();
    for (&a, &b) in field.iter().zip(truth.iter()) {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("rmse input".into()));
        }
        sum += (a - b) * (a - b);
    }
    Ok((sum / T::from_usize_lossy(field.len())).sqrt())
}

/// Mean over each `factor x factor` block.
pub fn regrid_average<T: Real>(fine: ArrayView2<T>, factor: usize) -> Result<Array2<T>> {
    let (ny, nx) = fine.dim();
    if factor == 0 || ny % factor != 0 || nx % factor != 0 {
        let size = if factor == 0 || ny % factor.max(1) != 0 { ny } else { nx };
        return Err(Error::NotDivisible { size, factor });
    }
    let area = T::from_usize_lossy(factor * factor);
    Ok(Array2::from_shape_fn((ny / factor, nx / factor), |(j, i)| {
        let block = fine.slice(ndarray::s![j * factor..(j + 1) * factor, i * factor..(i + 1) * factor]);
        block.iter().fold(T::zero(), |acc, &v| acc + v) / area
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InnovationStats<T> {
    pub count: usize,
    /// `None` for an empty batch.
    pub max: Option<T>,
    pub mean: Option<T>,
    pub bin_edges: Vec<T>,
    /// `counts[k]` covers `[edges[k], edges[k+1])`; values outside the edges
    /// land in the first or last bin.
    pub counts: Vec<usize>,
}

impl<T> InnovationStats<T> {
    pub fn max_undefined(&self) -> bool {
        self.max.is_none()
    }
    pub fn mean_undefined(&self) -> bool {
        self.mean.is_none()
    }
}

/// Statistics of `d = y - H(x)`.
pub fn innovation_stats<T: Real>(observed: &[T], model_equivalent: &[T], bin_edges: &[T]) -> Result<InnovationStats<T>> {
    if observed.len() != model_equivalent.len() {
        return Err(Error::ShapeMismatch(format!("{} obs vs {} model values", observed.len(), model_equivalent.len())));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter("bin edges must be increasing with at least two entries".into()));
    }
    let d: Vec<T> = observed.iter().zip(model_equivalent).map(|(&y, &h)| y - h).collect();
    let n_bins = bin_edges.len() - 1;
    let mut counts = vec![0; n_bins];
    for &v in &d {
        let k = bin_edges[1..].iter().position(|&e| v < e).unwrap_or(n_bins).min(n_bins - 1);
        counts[k] += 1;
    }
    let max = d.iter().copied().reduce(T::max);
    let mean = (!d.is_empty()).then(|| d.iter().copied().sum::<T>() / T::from_usize_lossy(d.len()));
    Ok(InnovationStats { count: d.len(), max, mean, bin_edges: bin_edges.to_vec(), counts })
}

/// Evenly spaced edges from `lo` to `hi`.
pub fn uniform_bins(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins).map(|k| lo + (hi - lo) * k as f64 / n_bins as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rmse_of_offset_is_offset() {
        let truth = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + b * c) as f64);
        assert_eq!(rmse(truth.view(), truth.view()).unwrap(), 0.0);
        let shifted = &truth - 1.5;
        assert!((rmse(shifted.view(), truth.view()).unwrap() - 1.5).abs() < 1e-14);
        assert!(rmse(truth.view(), Array3::zeros((2, 3, 5)).view()).is_err());
    }

    #[test]
    fn regrid_checkerboard() {
        let fine = Array2::from_shape_fn((4, 6), |(j, i)| if (i + j) % 2 == 0 { 0.0 } else { 2.0 });
        let coarse = regrid_average(fine.view(), 2).unwrap();
        assert_eq!(coarse.dim(), (2, 3));
        assert!(coarse.iter().all(|&v| v == 1.0));
        assert!(matches!(regrid_average(fine.view(), 4), Err(Error::NotDivisible { factor: 4, .. })));
    }

    #[test]
    fn empty_batch_flags_undefined() {
        let s = innovation_stats::<f64>(&[], &[], &[0.0, 1.0]).unwrap();
        assert!(s.max_undefined() && s.mean_undefined());
        assert_eq!(s.counts, vec![0]);
    }

    #[test]
    fn histogram_counts_every_innovation() {
        let y = [1.0, 5.0, 11.53, -2.0, 30.0];
        let h = [0.0; 5];
        let s = innovation_stats(&y, &h, &uniform_bins(0.0, 20.0, 4)).unwrap();
        assert_eq!(s.max, Some(30.0));
        assert_eq!(s.counts.iter().sum::<usize>(), 5);
        assert_eq!(s.counts, vec![2, 1, 1, 1]);
    }

    #[test]
    fn series_rows() {
        let mut s = ScoreSeries::new("free");
        s.push(1.0, 0.5).unwrap();
        assert!(s.push(2.0, -1.0).is_err());
        assert_eq!(s.to_rows(), "1,0.500000,free\n");
    }
}
