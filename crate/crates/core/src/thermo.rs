//! Column thermodynamics: surface-based parcel CAPE and dry-adiabatic
//! lapse-rate adjustment.
//!
//! The parcel is the lowest level of the column. It rises along a dry
//! adiabat (mixing ratio conserved) until it saturates at the lifting
//! condensation level, then along a pseudo-adiabat defined by conservation of
//!
//! ```text
//! theta_e(T, p) = T (p_ref / p)^kappa * exp(Lv * r_s(T, p) / (cp * T))
//! ```
//!
//! solved by bisection at every saturated level. Saturation vapour pressure
//! uses Bolton's fit `e_s = 611.2 exp(17.67 (T - 273.15) / (T - 29.65))` Pa.
//! There is no virtual-temperature correction and no ice phase.
//!
//! CAPE is the trapezoid integral in height of `g (T_p - T_e) / T_e` over the
//! first contiguous positive-buoyancy run at or above the LCL. The buoyancy
//! is taken as zero at the level below the LFC and at the EL, so no sub-level
//! crossing interpolation is done and the integral is a fixed weighted sum of
//! level buoyancies once the LFC/EL switches are known.

use crate::error::{Error, Result};
use crate::real::Real;

pub mod constants {
    /// Gravitational acceleration, m s^-2.
    pub const GRAVITY: f64 = 9.80665;
    /// Specific heat of dry air at constant pressure, J kg^-1 K^-1.
    pub const CP: f64 = 1004.5;
    /// Gas constant of dry air, J kg^-1 K^-1.
    pub const RD: f64 = 287.04;
    pub const KAPPA: f64 = RD / CP;
    /// Latent heat of vaporisation, J kg^-1.
    pub const LV: f64 = 2.501e6;
    /// Ratio of molecular weights of water vapour and dry air.
    pub const EPSILON: f64 = 0.622;
    /// Reference pressure of potential temperature, Pa.
    pub const P_REF: f64 = 100_000.0;
    /// Dry-adiabatic lapse rate g / cp, K m^-1.
    pub const DRY_LAPSE_RATE: f64 = GRAVITY / CP;

    pub const MIN_TEMPERATURE: f64 = 150.0;
    pub const MAX_TEMPERATURE: f64 = 350.0;
}

use constants::*;

/// Lowest temperature the pseudo-adiabat bisection searches, K.
const PARCEL_T_FLOOR: f64 = 50.0;

/// One vertical profile, surface first.
#[derive(Clone, Debug, PartialEq)]
pub struct AtmosColumn<T> {
    pressure: Vec<T>,
    temperature: Vec<T>,
    mixing_ratio: Vec<T>,
    height: Vec<T>,
}

impl<T: Real> AtmosColumn<T> {
    pub fn new(pressure: Vec<T>, temperature: Vec<T>, mixing_ratio: Vec<T>, height: Vec<T>) -> Result<Self> {
        let col = Self { pressure, temperature, mixing_ratio, height };
        col.validate()?;
        Ok(col)
    }

    pub fn n_levels(&self) -> usize {
        self.pressure.len()
    }
    pub fn pressure(&self) -> &[T] {
        &self.pressure
    }
    pub fn temperature(&self) -> &[T] {
        &self.temperature
    }
    pub fn mixing_ratio(&self) -> &[T] {
        &self.mixing_ratio
    }
    pub fn height(&self) -> &[T] {
        &self.height
    }

    /// Same column with a replaced temperature profile.
    pub fn with_temperature(&self, temperature: Vec<T>) -> Result<Self> {
        Self::new(self.pressure.clone(), temperature, self.mixing_ratio.clone(), self.height.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pressure.len();
        if n < 2 {
            return Err(Error::InvalidProfile(format!("need at least 2 levels, got {n}")));
        }
        if self.temperature.len() != n || self.mixing_ratio.len() != n || self.height.len() != n {
            return Err(Error::InvalidProfile(format!(
                "array lengths differ: p={n} T={} q={} z={}",
                self.temperature.len(),
                self.mixing_ratio.len(),
                self.height.len()
            )));
        }
        let (tmin, tmax) = (T::lit(MIN_TEMPERATURE), T::lit(MAX_TEMPERATURE));
        for k in 0..n {
            let (p, t, q, z) = (self.pressure[k], self.temperature[k], self.mixing_ratio[k], self.height[k]);
            if !(p.is_finite() && t.is_finite() && q.is_finite() && z.is_finite()) {
                return Err(Error::InvalidProfile(format!("non-finite value at level {k}")));
            }
            if p <= T::zero() {
                return Err(Error::InvalidProfile(format!("non-positive pressure at level {k}")));
            }
            if t < tmin || t > tmax {
                return Err(Error::InvalidProfile(format!("temperature {t} K out of range at level {k}")));
            }
            if q < T::zero() {
                return Err(Error::InvalidProfile(format!("negative mixing ratio at level {k}")));
            }
            if k > 0 {
                if self.pressure[k] >= self.pressure[k - 1] {
                    return Err(Error::InvalidProfile(format!("pressure not decreasing at level {k}")));
                }
                if self.height[k] <= self.height[k - 1] {
                    return Err(Error::InvalidProfile(format!("height not increasing at level {k}")));
                }
            }
        }
        Ok(())
    }
}

/// Result of lifting the surface parcel through a column.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelDiagnostics<T> {
    /// J kg^-1, never negative.
    pub cape: T,
    /// First level at which the parcel is saturated.
    pub lcl_index: Option<usize>,
    pub lfc_index: Option<usize>,
    /// First non-buoyant level above the LFC; absent when the positive area
    /// reaches the column top.
    pub el_index: Option<usize>,
    /// Parcel minus environment temperature, K.
    pub buoyancy: Vec<T>,
    pub positive_mask: Vec<bool>,
    pub parcel_temperature: Vec<T>,
    /// Pressure of the lifting condensation level, Pa.
    pub lcl_pressure: Option<T>,
}

impl<T: Real> ParcelDiagnostics<T> {
    /// Recomputes CAPE from the stored buoyancy and the column geometry.
    pub fn integrate(&self, column: &AtmosColumn<T>) -> T {
        let g = T::lit(GRAVITY);
        let z = column.height();
        let te = column.temperature();
        self.positive_mask
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(k, _)| g * level_weight(z, k) * self.buoyancy[k] / te[k])
            .sum()
    }
}

/// Saturation vapour pressure over water, Pa.
pub fn saturation_vapor_pressure<T: Real>(t: T) -> T {
    T::lit(611.2) * (T::lit(17.67) * (t - T::lit(273.15)) / (t - T::lit(29.65))).exp()
}

fn d_saturation_vapor_pressure<T: Real>(t: T) -> T {
    let denom = t - T::lit(29.65);
    saturation_vapor_pressure(t) * T::lit(17.67 * (273.15 - 29.65)) / (denom * denom)
}

/// Saturation mixing ratio, kg kg^-1. Infinite once `e_s >= p`.
pub fn saturation_mixing_ratio<T: Real>(t: T, p: T) -> T {
    let e = saturation_vapor_pressure(t);
    if e >= p {
        return T::infinity();
    }
    T::lit(EPSILON) * e / (p - e)
}

/// Partials of the saturation mixing ratio: (d/dT at fixed p, d/dp at fixed T).
fn saturation_mixing_ratio_partials<T: Real>(t: T, p: T) -> (T, T) {
    let e = saturation_vapor_pressure(t);
    let de = d_saturation_vapor_pressure(t);
    let denom = (p - e) * (p - e);
    let eps = T::lit(EPSILON);
    (eps * p * de / denom, -eps * e / denom)
}

/// Equivalent potential temperature of saturated air at (T, p).
pub fn saturated_theta_e<T: Real>(t: T, p: T) -> T {
    let rs = saturation_mixing_ratio(t, p);
    t * (T::lit(P_REF) / p).powf(T::lit(KAPPA)) * (T::lit(LV) * rs / (T::lit(CP) * t)).exp()
}

fn d_saturated_theta_e_dt<T: Real>(t: T, p: T) -> T {
    let rs = saturation_mixing_ratio(t, p);
    let (drs_dt, _) = saturation_mixing_ratio_partials(t, p);
    let l_cp = T::lit(LV / CP);
    saturated_theta_e(t, p) * (T::one() / t + l_cp * (drs_dt / t - rs / (t * t)))
}

/// Bisection on an increasing function; runs until the bracket stops shrinking.
fn bisect_increasing<T: Real, F: Fn(T) -> T>(f: F, target: T, mut lo: T, mut hi: T) -> T {
    let two = T::lit(2.0);
    for _ in 0..400 {
        let mid = (lo + hi) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / two
}

/// Parcel temperatures plus their derivative with respect to the surface
/// temperature, with the saturation switches fixed at this state.
struct ParcelTrace<T> {
    temperature: Vec<T>,
    d_surface: Vec<T>,
    lcl_index: Option<usize>,
    lcl_pressure: Option<T>,
}

fn lift_parcel<T: Real>(col: &AtmosColumn<T>) -> ParcelTrace<T> {
    let n = col.n_levels();
    let p = col.pressure();
    let (t0, p0, q0) = (col.temperature[0], p[0], col.mixing_ratio[0]);
    let kappa = T::lit(KAPPA);
    let l_cp = T::lit(LV / CP);

    // Lifting condensation level (T_L, p_L) and the conserved theta_e with its
    // surface-temperature derivative.
    let rs0 = saturation_mixing_ratio(t0, p0);
    let lcl = if q0 >= rs0 {
        Some((t0, p0, saturated_theta_e(t0, p0), d_saturated_theta_e_dt(t0, p0)))
    } else {
        let p_on_dry = |tl: T| p0 * (tl / t0).powf(T::one() / kappa);
        let excess = |tl: T| saturation_mixing_ratio(tl, p_on_dry(tl)) - q0;
        let floor = T::lit(MIN_TEMPERATURE);
        if q0 <= T::zero() || excess(floor) >= T::zero() {
            None
        } else {
            let tl = bisect_increasing(excess, T::zero(), floor, t0);
            let pl = p_on_dry(tl);
            let theta = t0 * (T::lit(P_REF) / p0).powf(kappa);
            let theta_e = theta * (l_cp * q0 / tl).exp();
            // Implicit derivative of T_L from r_s(T_L, p_L(T_L, T0)) = q0.
            let (drs_dt, drs_dp) = saturation_mixing_ratio_partials(tl, pl);
            let dg_dtl = drs_dt + drs_dp * pl / (kappa * tl);
            let dg_dt0 = -drs_dp * pl / (kappa * t0);
            let dtl_dt0 = -dg_dt0 / dg_dtl;
            let dthe_dt0 = theta_e * (T::one() / t0 - l_cp * q0 / (tl * tl) * dtl_dt0);
            Some((tl, pl, theta_e, dthe_dt0))
        }
    };

    let mut temperature = Vec::with_capacity(n);
    let mut d_surface = Vec::with_capacity(n);
    temperature.push(t0);
    d_surface.push(T::one());
    let mut lcl_index = if lcl.is_some_and(|(_, pl, _, _)| pl >= p0) { Some(0) } else { None };
    for k in 1..n {
        match lcl {
            Some((tl, pl, theta_e, dthe_dt0)) if p[k] < pl => {
                lcl_index.get_or_insert(k);
                let tp = bisect_increasing(|t| saturated_theta_e(t, p[k]), theta_e, T::lit(PARCEL_T_FLOOR), tl);
                temperature.push(tp);
                d_surface.push(dthe_dt0 / d_saturated_theta_e_dt(tp, p[k]));
            }
            _ => {
                let ratio = (p[k] / p0).powf(kappa);
                temperature.push(t0 * ratio);
                d_surface.push(ratio);
            }
        }
    }
    ParcelTrace { temperature, d_surface, lcl_index, lcl_pressure: lcl.map(|(_, pl, _, _)| pl) }
}

/// Trapezoid weight of level `k` in the CAPE sum (neighbours clamped to zero).
fn level_weight<T: Real>(z: &[T], k: usize) -> T {
    let upper = if k + 1 < z.len() { z[k + 1] } else { z[k] };
    (upper - z[k - 1]) / T::lit(2.0)
}

/// CAPE diagnostics of the surface parcel.
pub fn compute_cape<T: Real>(column: &AtmosColumn<T>) -> Result<ParcelDiagnostics<T>> {
    column.validate()?;
    Ok(diagnose(column, &lift_parcel(column)))
}

fn diagnose<T: Real>(column: &AtmosColumn<T>, trace: &ParcelTrace<T>) -> ParcelDiagnostics<T> {
    let n = column.n_levels();
    let te = column.temperature();
    let buoyancy: Vec<T> = trace.temperature.iter().zip(te).map(|(&tp, &t)| tp - t).collect();
    let mut positive_mask = vec![false; n];

    // The surface level has zero buoyancy by construction, so lfc >= 1.
    let lfc = trace
        .lcl_index
        .and_then(|start| (start.max(1)..n).find(|&k| buoyancy[k] > T::zero()));
    let el = lfc.and_then(|lfc| (lfc + 1..n).find(|&k| buoyancy[k] <= T::zero()));
    if let Some(lfc) = lfc {
        let last = el.map_or(n - 1, |e| e - 1);
        positive_mask[lfc..=last].iter_mut().for_each(|m| *m = true);
    }
    let mut diag = ParcelDiagnostics {
        cape: T::zero(),
        lcl_index: trace.lcl_index,
        lfc_index: lfc,
        el_index: el,
        buoyancy,
        positive_mask,
        parcel_temperature: trace.temperature.clone(),
        lcl_pressure: trace.lcl_pressure,
    };
    diag.cape = diag.integrate(column);
    diag
}

/// CAPE and its gradient with respect to the temperature profile, with the
/// LCL, LFC, EL and saturation switches frozen at this column.
#[derive(Clone, Debug)]
pub struct CapeLinearization<T> {
    pub diagnostics: ParcelDiagnostics<T>,
    /// dCAPE / dT_k, J kg^-1 K^-1.
    pub gradient: Vec<T>,
}

pub fn linearize_cape<T: Real>(column: &AtmosColumn<T>) -> Result<CapeLinearization<T>> {
    column.validate()?;
    let trace = lift_parcel(column);
    let diagnostics = diagnose(column, &trace);
    let g = T::lit(GRAVITY);
    let z = column.height();
    let te = column.temperature();
    let mut gradient = vec![T::zero(); column.n_levels()];
    for k in (0..column.n_levels()).filter(|&k| diagnostics.positive_mask[k]) {
        let w = g * level_weight(z, k);
        gradient[k] -= w * trace.temperature[k] / (te[k] * te[k]);
        gradient[0] += w * trace.d_surface[k] / te[k];
    }
    Ok(CapeLinearization { diagnostics, gradient })
}

/// True when some layer cools with height faster than the dry adiabat.
pub fn has_superadiabatic_layer<T: Real>(column: &AtmosColumn<T>) -> bool {
    let gamma = T::lit(DRY_LAPSE_RATE);
    let (t, z) = (column.temperature(), column.height());
    (1..column.n_levels()).any(|k| t[k] < t[k - 1] - gamma * (z[k] - z[k - 1]))
}

/// Removes super-adiabatic layers by raising the upper temperature of each
/// offending layer to the dry adiabat, sweeping from the surface up.
pub fn dry_adiabatic_adjust<T: Real>(column: &AtmosColumn<T>) -> Result<AtmosColumn<T>> {
    column.validate()?;
    let gamma = T::lit(DRY_LAPSE_RATE);
    let z = column.height();
    let mut t = column.temperature().to_vec();
    for k in 1..t.len() {
        let floor = t[k - 1] - gamma * (z[k] - z[k - 1]);
        if t[k] < floor {
            t[k] = floor;
        }
    }
    column.with_temperature(t)
}
