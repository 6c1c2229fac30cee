//! Boundary pairs on either side of every quality-control threshold.

use super::*;
use lightda::minimizer::{IterationRecord, MinimizeReport, MinimizeStatus};
use lightda::obs_operator::{flash_rate, LightningOperatorParams};
use lightda::thermo::{dry_adiabatic_adjust, has_superadiabatic_layer, AtmosColumn};
use lightda::var1d::{classify, LightningObservation, QcStatus, RetrievalConfig};
use lightda::var_nd::screen_lightning;

pub fn converged_report() -> MinimizeReport<f64> {
    MinimizeReport {
        iterations_used: 10,
        cost_initial: 5.0,
        cost_final: 0.5,
        grad_norm_initial: 1.0,
        grad_norm_final: 1e-3,
        status: MinimizeStatus::Converged,
        evaluations: 12,
        history: vec![IterationRecord { iteration: 0, cost: 5.0, grad_norm: 1.0 }],
    }
}

/// `(description, holds)` for every boundary case.
pub fn boundary_cases() -> Vec<(String, bool)> {
    let params = LightningOperatorParams::<f64>::default();
    let config = RetrievalConfig::default();
    let report = converged_report();
    let mut out = Vec::new();

    let verdict = |cape: f64, hb: f64, ha: f64| classify(cape, Some(&report), hb, ha, &params, &config);
    out.push(("improvement 0.19 rejected".into(), verdict(2000.0, 1.0, 1.19) == QcStatus::RejectedSmallImprovement));
    out.push(("improvement 0.21 accepted".into(), verdict(2000.0, 1.0, 1.21) == QcStatus::Accepted));
    out.push(("improvement exactly 0.2 accepted".into(), verdict(2000.0, 0.0, 0.2) == QcStatus::Accepted));
    out.push(("CAPE 300 gated".into(), verdict(300.0, 1.0, 2.0) == QcStatus::RejectedLowCape));
    out.push(("CAPE 350 passes the gate".into(), verdict(350.0, 1.0, 2.0) == QcStatus::Accepted));
    out.push(("CAPE at cape_min gated".into(), verdict(params.cape_min, 1.0, 2.0) == QcStatus::RejectedLowCape));
    out.push(("operator refuses CAPE 300".into(), params.flash_rate_from_cape(300.0).is_err()));
    out.push(("operator accepts CAPE 350".into(), params.flash_rate_from_cape(350.0).is_ok()));

    let state = unstable_grid(4, 4, 10, 1200.0);
    let hb = flash_rate(&state.column(1, 2).expect("column"), &params).expect("unstable column");
    let screened = |innovation: f64| {
        let obs = LightningObservation::new(1, 2, hb + innovation, 0.0);
        screen_lightning(&state, &[obs], &params, 10.0).expect("screen").1
    };
    let below = screened(9.9);
    let above = screened(10.1);
    out.push(("innovation 9.9 assimilated".into(), below.assimilated == 1 && below.capped == 0));
    out.push(("innovation 10.1 capped".into(), above.assimilated == 0 && above.capped == 1));

    let col = state.column(0, 0).expect("column");
    let mut t = col.temperature().to_vec();
    t[1] -= 12.0;
    t[4] -= 9.0;
    let bad = col.with_temperature(t).expect("column");
    let once = dry_adiabatic_adjust(&bad).expect("adjust");
    let twice = dry_adiabatic_adjust(&once).expect("adjust");
    out.push(("super-adiabatic layers removed".into(), has_superadiabatic_layer(&bad) && !has_superadiabatic_layer(&once)));
    out.push(("adjustment idempotent".into(), once.temperature() == twice.temperature()));
    out.push(("stable column untouched".into(), stable_untouched(&col)));
    out
}

fn stable_untouched(col: &AtmosColumn<f64>) -> bool {
    dry_adiabatic_adjust(col).map(|a| a.temperature() == col.temperature()).unwrap_or(false)
}
