//! Time-varying state bounds for one deceleration event: the reference speed
//! line, the coasting (road-load) upper bound, the distance-factor
//! adjustment and the grade-adaptive deceleration-time interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::powertrain::VehicleParams;
use crate::route::SlopeTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageBounds {
    pub k: usize,
    pub v_lo: f64,
    pub v_hi: f64,
    pub d_lo: f64,
    pub d_hi: f64,
    pub v_load: f64,
    pub v_ref: f64,
    pub d_ref: f64,
    pub beta: f64,
    pub rho_bar: f64,
    /// β fell outside the clamp band.
    pub beta_clamped: bool,
    /// Bounds crossed and were collapsed to their midpoint.
    pub degenerate: bool,
}

/// Reference speed line `v_ref(0) = v_1a … v_ref(n−1) = v_f0`, plus `v_1a`.
///
/// `v_1a` is chosen so the trapezoid through `v_i0, v_1a, …, v_f0` spans
/// `d_res`.
pub fn reference_speed(v_i0: f64, v_f0: f64, d_res: f64, n: usize, dt: f64) -> Result<(Vec<f64>, f64)> {
    if n < 2 {
        return Err(Error::HorizonTooShort { steps: n });
    }
    if !(d_res > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParam("d_res and dt must be positive".into()));
    }
    let nf = n as f64;
    let v_1a = (2.0 * d_res - (v_i0 + v_f0 * (nf - 1.0)) * dt) / (nf * dt);
    if v_1a < v_f0 {
        return Err(Error::InfeasibleRequest(format!(
            "remaining distance {d_res:.3} m too short: adjusted start speed {v_1a:.3} below target {v_f0:.3}"
        )));
    }
    let step = (v_f0 - v_1a) / (nf - 1.0);
    let v_ref = (0..n)
        .map(|k| if k == n - 1 { v_f0 } else { v_1a + step * k as f64 })
        .collect();
    Ok((v_ref, v_1a))
}

/// Reference distance anchored at `d_ref(n) = d_res`, length `n + 1`.
pub fn reference_distance(v_ref: &[f64], d_res: f64, dt: f64) -> Vec<f64> {
    let n = v_ref.len();
    let mut d = vec![0.0; n + 1];
    d[n] = d_res;
    for k in (0..n).rev() {
        d[k] = d[k + 1] - v_ref[k] * dt;
    }
    d
}

/// Coasting speed bound along the reference line, length `v_ref.len() + 1`.
/// The flag reports that the reference distance ran past the slope table.
pub fn load_adjusted_bound(
    params: &VehicleParams,
    v_ref: &[f64],
    slopes: &SlopeTable,
    v_i0: f64,
    dt: f64,
) -> (Vec<f64>, bool) {
    let mut v_load = Vec::with_capacity(v_ref.len() + 1);
    v_load.push(v_i0);
    let mut dist = 0.0;
    let mut past_end = false;
    for &vr in v_ref {
        dist += vr * dt;
        if dist > slopes.extent() + 1e-9 {
            past_end = true;
        }
        let rho = slopes.slope_at(dist);
        let f = params.road_load_total(vr, rho);
        let last = *v_load.last().unwrap();
        v_load.push(last - f / params.effective_mass * dt);
    }
    (v_load, past_end)
}

/// Speed and distance window at stage `k` given the trajectory's own
/// travelled distance `d_next` at `k + 1`.
#[allow(clippy::too_many_arguments)]
pub fn stage_bounds(
    v_ref: f64,
    v_load: f64,
    d_ref_next: f64,
    d_next: f64,
    k: usize,
    v_f0: f64,
    dt: f64,
    beta_clamp: (f64, f64),
) -> Result<StageBounds> {
    if !(d_next > 0.0) {
        return Err(Error::InvalidParam(format!("d_next must be positive, got {d_next}")));
    }
    let raw = d_ref_next / d_next;
    let beta = raw.clamp(beta_clamp.0, beta_clamp.1);
    let mut v_lo = v_f0.max(v_f0 * beta);
    let mut v_hi = v_load.min(v_load * beta);
    let mut degenerate = false;
    if v_lo > v_hi {
        let mid = 0.5 * (v_lo + v_hi);
        v_lo = mid;
        v_hi = mid;
        degenerate = true;
    }
    Ok(StageBounds {
        k,
        v_lo,
        v_hi,
        d_lo: d_next - v_hi * dt,
        d_hi: d_next - v_lo * dt,
        v_load,
        v_ref,
        d_ref: d_ref_next,
        beta,
        rho_bar: 0.0,
        beta_clamped: raw != beta,
        degenerate,
    })
}

/// Grade-adaptive step interval for the deceleration time. Uphill keeps
/// gentle candidates `[n, max]`, downhill sharp ones `[min, n]`. Returns the
/// interval and whether the adapted interval was empty (unadapted fallback).
pub fn slope_adaptive_nd(nd_min: usize, nd_max: usize, n: usize, rho_bar: f64) -> (usize, usize, bool) {
    let (lo, hi) = if rho_bar >= 0.0 {
        (n.max(nd_min), nd_max)
    } else {
        (nd_min, n.min(nd_max))
    };
    let lo = lo.max(1);
    if lo > hi {
        (nd_min.max(1), nd_max.max(1), true)
    } else {
        (lo, hi, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_line_hand_value() {
        let (v, v1a) = reference_speed(20.0, 0.0, 100.0, 10, 1.0).unwrap();
        assert_relative_eq!(v1a, 18.0);
        assert_eq!(v[0], 18.0);
        assert_eq!(v[9], 0.0);
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identity_adjustment() {
        // trapezoid v_i0, v_i0, ..., v_f0 over n intervals
        let (vi, vf, n, dt) = (15.0, 3.0, 12usize, 0.5);
        let d = dt * (2.0 * vi + (n as f64 - 1.0) * (vi + vf)) / 2.0;
        let (_, v1a) = reference_speed(vi, vf, d, n, dt).unwrap();
        assert_relative_eq!(v1a, vi, epsilon = 1e-12);
    }

    #[test]
    fn too_short_distance() {
        assert!(matches!(
            reference_speed(20.0, 10.0, 5.0, 10, 1.0),
            Err(Error::InfeasibleRequest(_))
        ));
        assert!(reference_speed(20.0, 0.0, 100.0, 1, 1.0).is_err());
    }

    #[test]
    fn coasting_bound() {
        let mut p = VehicleParams::synthetic();
        p.rolling_c0 = 0.0;
        p.rolling_c1 = 0.0;
        p.aero_c2 = 0.0;
        let flat = SlopeTable::constant(0.0, 1000.0);
        let (v_ref, _) = reference_speed(10.0, 0.0, 60.0, 10, 1.0).unwrap();
        let (vl, _) = load_adjusted_bound(&p, &v_ref, &flat, 10.0, 1.0);
        assert!(vl.iter().all(|&v| v == 10.0));

        p.rolling_c0 = 100.0;
        p.effective_mass = 1000.0;
        let (vl, _) = load_adjusted_bound(&p, &v_ref, &flat, 10.0, 1.0);
        assert_relative_eq!(vl[0] - vl[1], 0.1, epsilon = 1e-12);

        let down = SlopeTable::constant(-0.1, 1000.0);
        let (vl, past) = load_adjusted_bound(&p, &v_ref, &down, 10.0, 1.0);
        assert!(vl[1] > vl[0]);
        assert!(!past);
        let short = SlopeTable::constant(-0.1, 10.0);
        assert!(load_adjusted_bound(&p, &v_ref, &short, 10.0, 1.0).1);
    }

    #[test]
    fn distance_factor_adjustment() {
        let b = stage_bounds(8.0, 12.0, 50.0, 50.0, 3, 5.0, 1.0, (0.5, 2.0)).unwrap();
        assert_eq!((b.v_lo, b.v_hi), (5.0, 12.0));
        let b = stage_bounds(8.0, 12.0, 60.0, 50.0, 3, 5.0, 1.0, (0.5, 2.0)).unwrap();
        assert_relative_eq!(b.v_lo, 6.0);
        assert_eq!(b.v_hi, 12.0);
        let b = stage_bounds(8.0, 12.0, 40.0, 50.0, 3, 5.0, 1.0, (0.5, 2.0)).unwrap();
        assert_eq!(b.v_lo, 5.0);
        assert_relative_eq!(b.v_hi, 9.6);
        assert_relative_eq!(b.d_lo, 50.0 - 9.6);
        assert_relative_eq!(b.d_hi, 45.0);
        let b = stage_bounds(8.0, 12.0, 500.0, 50.0, 3, 5.0, 1.0, (0.5, 2.0)).unwrap();
        assert_eq!(b.beta, 2.0);
        assert!(b.beta_clamped);
        // v_f0 above the coasting bound collapses
        let b = stage_bounds(8.0, 4.0, 50.0, 50.0, 3, 5.0, 1.0, (0.5, 2.0)).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.v_lo, b.v_hi);
        assert!(stage_bounds(8.0, 4.0, 50.0, 0.0, 3, 5.0, 1.0, (0.5, 2.0)).is_err());
    }

    #[test]
    fn adaptive_interval() {
        assert_eq!(slope_adaptive_nd(10, 40, 20, 0.0), (20, 40, false));
        assert_eq!(slope_adaptive_nd(10, 40, 20, -0.05), (10, 20, false));
        assert_eq!(slope_adaptive_nd(10, 40, 50, 0.02), (10, 40, true));
        assert_eq!(slope_adaptive_nd(10, 40, 5, -0.02), (10, 40, true));
    }

    proptest! {
        #[test]
        fn reference_line_affine(vi in 5.0f64..30.0, vf in 0.0f64..4.0, n in 3usize..60, dt in 0.2f64..1.0, f in 0.6f64..1.0) {
            let d = f * vi * n as f64 * dt;
            if let Ok((v, v1a)) = reference_speed(vi, vf, d, n, dt) {
                prop_assert_eq!(v[0], v1a);
                prop_assert_eq!(v[n - 1], vf);
                let inc = v[1] - v[0];
                for w in v.windows(2) {
                    prop_assert!((w[1] - w[0] - inc).abs() < 1e-9);
                }
                let rect: f64 = v.iter().sum::<f64>() * dt;
                prop_assert!((rect - d).abs() <= vi.max(v1a) * dt + 1e-9);
            }
        }

        #[test]
        fn tracking_reference_gives_unit_beta(vi in 5.0f64..30.0, n in 3usize..40, dt in 0.2f64..1.0) {
            let (v_ref, _) = reference_speed(vi, 0.0, 0.7 * vi * n as f64 * dt, n, dt).unwrap();
            let d_res: f64 = v_ref.iter().sum::<f64>() * dt;
            let d_ref = reference_distance(&v_ref, d_res, dt);
            let mut travelled = 0.0;
            for k in 0..n - 1 {
                travelled += v_ref[k] * dt;
                let b = stage_bounds(v_ref[k], vi, d_ref[k + 1], travelled, k, 0.0, dt, (0.5, 2.0)).unwrap();
                prop_assert!((b.beta - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn bounds_nested(vl in 1.0f64..30.0, vf in 0.0f64..5.0, dr in 1.0f64..100.0, dn in 1.0f64..100.0) {
            let b = stage_bounds(5.0, vl, dr, dn, 0, vf, 0.5, (0.5, 2.0)).unwrap();
            if !b.degenerate {
                prop_assert!(b.v_lo >= vf && b.v_hi <= vl && b.v_lo <= b.v_hi);
            }
            prop_assert!(b.d_lo <= b.d_hi);
        }
    }
}
