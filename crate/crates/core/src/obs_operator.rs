//! Lightning observation operator: column state -> CAPE -> flash rate.
//!
//! ```text
//! H(X) = c * (a * sqrt(2 * CAPE(X)) - b)^k
//! ```
//!
//! in flashes (9 km)^-2 min^-1. The bracket is the CAPE-derived maximum
//! updraft speed; it is non-negative only for `CAPE >= b^2 / (2 a^2)`.
//! Tangent-linear and adjoint act on the temperature profile only, with the
//! parcel switches frozen at the linearisation column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{dot, Real};
use crate::thermo::{compute_cape, linearize_cape, AtmosColumn, ParcelDiagnostics};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightningOperatorParams<T> {
    pub coefficient: T,
    pub slope: T,
    /// m s^-1
    pub offset: T,
    pub exponent: T,
    /// J kg^-1
    pub cape_min: T,
}

impl<T: Real> Default for LightningOperatorParams<T> {
    fn default() -> Self {
        Self {
            coefficient: T::lit(5e-7),
            slope: T::lit(0.677),
            offset: T::lit(17.286),
            exponent: T::lit(4.55),
            cape_min: T::lit(325.973),
        }
    }
}

impl<T: Real> LightningOperatorParams<T> {
    /// CAPE at which the updraft bracket vanishes, `b^2 / (2 a^2)`.
    pub fn bracket_zero_cape(&self) -> T {
        self.offset * self.offset / (T::lit(2.0) * self.slope * self.slope)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.coefficient, self.slope, self.offset, self.exponent, self.cape_min];
        if fields.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(Error::InvalidParameter("operator parameters must be finite and positive".into()));
        }
        if (self.cape_min - self.bracket_zero_cape()).abs() > T::lit(1e-3) {
            return Err(Error::InvalidParameter(format!(
                "cape_min {} inconsistent with b^2/(2a^2) = {}",
                self.cape_min,
                self.bracket_zero_cape()
            )));
        }
        Ok(())
    }

    fn bracket(&self, cape: T) -> T {
        (self.slope * (T::lit(2.0) * cape).sqrt() - self.offset).max(T::zero())
    }

    /// Flash rate for a given CAPE; errors below `cape_min`.
    pub fn flash_rate_from_cape(&self, cape: T) -> Result<T> {
        if cape < self.cape_min {
            return Err(self.below(cape));
        }
        Ok(self.flash_rate_extended(cape))
    }

    /// Flash rate continued by zero below the threshold. The continuation is
    /// C^1 because the exponent exceeds one, so it is safe inside a minimiser.
    pub fn flash_rate_extended(&self, cape: T) -> T {
        if cape <= T::zero() {
            return T::zero();
        }
        self.coefficient * self.bracket(cape).powf(self.exponent)
    }

    /// dH/dCAPE of the extended operator.
    pub fn flash_rate_derivative(&self, cape: T) -> T {
        let bracket = self.bracket(cape);
        if bracket <= T::zero() {
            return T::zero();
        }
        let dbracket = self.slope / (T::lit(2.0) * cape).sqrt();
        self.coefficient * self.exponent * bracket.powf(self.exponent - T::one()) * dbracket
    }

    fn below(&self, cape: T) -> Error {
        Error::BelowThreshold {
            cape: cape.to_f64().unwrap_or(f64::NAN),
            cape_min: self.cape_min.to_f64().unwrap_or(f64::NAN),
        }
    }
}

pub fn flash_rate<T: Real>(column: &AtmosColumn<T>, params: &LightningOperatorParams<T>) -> Result<T> {
    params.flash_rate_from_cape(compute_cape(column)?.cape)
}

/// Frozen-switch linearisation of the lightning operator at one column.
#[derive(Clone, Debug)]
pub struct LightningLinearization<T> {
    pub value: T,
    pub cape: T,
    /// dH/dT_k per level.
    pub gradient: Vec<T>,
    pub diagnostics: ParcelDiagnostics<T>,
}

impl<T: Real> LightningLinearization<T> {
    pub fn tangent(&self, d_temperature: &[T]) -> Result<T> {
        check_len(self.gradient.len(), d_temperature.len())?;
        Ok(dot(&self.gradient, d_temperature))
    }

    pub fn adjoint(&self, d_flash_star: T) -> Vec<T> {
        self.gradient.iter().map(|&g| g * d_flash_star).collect()
    }
}

/// Linearises H at `column`. Derivatives are only defined strictly above
/// `cape_min`.
pub fn linearize<T: Real>(column: &AtmosColumn<T>, params: &LightningOperatorParams<T>) -> Result<LightningLinearization<T>> {
    let lin = linearize_cape(column)?;
    let cape = lin.diagnostics.cape;
    if cape <= params.cape_min {
        return Err(params.below(cape));
    }
    let slope = params.flash_rate_derivative(cape);
    Ok(LightningLinearization {
        value: params.flash_rate_extended(cape),
        cape,
        gradient: lin.gradient.iter().map(|&g| g * slope).collect(),
        diagnostics: lin.diagnostics,
    })
}

pub fn flash_rate_tl<T: Real>(
    column: &AtmosColumn<T>,
    d_temperature: &[T],
    params: &LightningOperatorParams<T>,
) -> Result<T> {
    check_len(column.n_levels(), d_temperature.len())?;
    linearize(column, params)?.tangent(d_temperature)
}

pub fn flash_rate_adjoint<T: Real>(
    column: &AtmosColumn<T>,
    d_flash_star: T,
    params: &LightningOperatorParams<T>,
) -> Result<Vec<T>> {
    Ok(linearize(column, params)?.adjoint(d_flash_star))
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch(format!("expected {expected} levels, got {found}")));
    }
    Ok(())
}

/// A scalar observation operator of a temperature profile with its tangent.
pub trait TemperatureOperator<T> {
    fn value(&self, temperature: &[T]) -> Result<T>;
    fn tangent(&self, temperature: &[T], direction: &[T]) -> Result<T>;
}

/// The lightning operator with pressure, moisture and height held at `column`.
pub struct LightningOperator<'a, T> {
    pub column: &'a AtmosColumn<T>,
    pub params: &'a LightningOperatorParams<T>,
}

impl<T: Real> TemperatureOperator<T> for LightningOperator<'_, T> {
    fn value(&self, temperature: &[T]) -> Result<T> {
        flash_rate(&self.column.with_temperature(temperature.to_vec())?, self.params)
    }

    fn tangent(&self, temperature: &[T], direction: &[T]) -> Result<T> {
        flash_rate_tl(&self.column.with_temperature(temperature.to_vec())?, direction, self.params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaPoint<T> {
    pub alpha: T,
    pub f: T,
    pub log10_abs_1_minus_f: T,
}

/// Linearity test `F(alpha) = (H(x + alpha dx) - H(x)) / (alpha H' dx)`.
pub fn alpha_linearity_test<T: Real, O: TemperatureOperator<T>>(
    operator: &O,
    base: &[T],
    direction: &[T],
    alphas: &[T],
) -> Result<Vec<AlphaPoint<T>>> {
    check_len(base.len(), direction.len())?;
    let h0 = operator.value(base)?;
    let tl = operator.tangent(base, direction)?;
    if tl == T::zero() {
        return Err(Error::DegenerateDirection);
    }
    alphas
        .iter()
        .map(|&alpha| {
            let shifted: Vec<T> = base.iter().zip(direction).map(|(&x, &d)| x + alpha * d).collect();
            let f = (operator.value(&shifted)? - h0) / (alpha * tl);
            Ok(AlphaPoint { alpha, f, log10_abs_1_minus_f: (T::one() - f).abs().log10() })
        })
        .collect()
}

pub fn alpha_linearity_test_lightning<T: Real>(
    column: &AtmosColumn<T>,
    d_temperature: &[T],
    alphas: &[T],
    params: &LightningOperatorParams<T>,
) -> Result<Vec<AlphaPoint<T>>> {
    let op = LightningOperator { column, params };
    alpha_linearity_test(&op, column.temperature(), d_temperature, alphas)
}

/// Logarithmically spaced alphas `10^lo ..= 10^hi`, `per_decade` per decade.
pub fn log_alphas(lo: i32, hi: i32, per_decade: usize) -> Vec<f64> {
    let steps = (hi - lo) as usize * per_decade;
    (0..=steps).map(|s| 10f64.powf(lo as f64 + s as f64 / per_decade as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_self_consistent() {
        let p = LightningOperatorParams::<f64>::default();
        p.validate().unwrap();
        assert!((p.bracket_zero_cape() - 325.973).abs() < 1e-3);
    }

    #[test]
    fn inconsistent_threshold_rejected() {
        let p = LightningOperatorParams::<f64> { cape_min: 300.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = LightningOperatorParams::<f64> { exponent: -1.0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn below_threshold_is_an_error() {
        let p = LightningOperatorParams::<f64>::default();
        assert!(matches!(p.flash_rate_from_cape(300.0), Err(Error::BelowThreshold { .. })));
        assert_eq!(p.flash_rate_extended(300.0), 0.0);
        assert_eq!(p.flash_rate_derivative(300.0), 0.0);
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let p = LightningOperatorParams::<f64>::default();
        for cape in [400.0, 1000.0, 2500.0] {
            let h = 1e-3;
            let fd = (p.flash_rate_extended(cape + h) - p.flash_rate_extended(cape - h)) / (2.0 * h);
            let d = p.flash_rate_derivative(cape);
            assert!((fd - d).abs() < 1e-7 * d, "{cape}: {fd} vs {d}");
        }
    }

    struct Linear(Vec<f64>);
    impl TemperatureOperator<f64> for Linear {
        fn value(&self, t: &[f64]) -> Result<f64> {
            Ok(dot(&self.0, t))
        }
        fn tangent(&self, _: &[f64], d: &[f64]) -> Result<f64> {
            Ok(dot(&self.0, d))
        }
    }

    #[test]
    fn alpha_test_of_linear_operator_is_one() {
        let op = Linear(vec![1.0, -2.0, 0.5]);
        let base = [280.0, 270.0, 260.0];
        let dir = [0.5, 0.25, -1.0];
        for pt in alpha_linearity_test(&op, &base, &dir, &log_alphas(-3, 0, 2)).unwrap() {
            assert!((pt.f - 1.0).abs() < 1e-8, "{pt:?}");
        }
    }

    #[test]
    fn alpha_test_rejects_null_direction() {
        let op = Linear(vec![1.0, 1.0]);
        let err = alpha_linearity_test(&op, &[1.0, 2.0], &[1.0, -1.0], &[0.1]);
        assert!(matches!(err, Err(Error::DegenerateDirection)));
    }

    #[test]
    fn log_alphas_spans_decades() {
        let a = log_alphas(-9, 0, 1);
        assert_eq!(a.len(), 10);
        assert!((a[0] - 1e-9).abs() < 1e-20);
        assert_eq!(a[9], 1.0);
    }
}
