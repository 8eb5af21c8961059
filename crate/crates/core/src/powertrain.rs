//! Braking forces and regenerative power of a P2 electrified powertrain.
//!
//! Sign convention: braking forces, generator torque limits, decelerations and
//! recuperated power are all negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::GRAVITY;

/// Converts RPM to rad/s.
pub const RPM_COEFF: f64 = 2.0 * std::f64::consts::PI / 60.0;

/// One `(breakpoint, value)` sample of a lookup map.
pub type MapPoint = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Curb weight plus equivalent rotating inertia, kg.
    pub effective_mass: f64,
    /// Dynamic wheel radius, m.
    pub wheel_radius: f64,
    pub final_drive: f64,
    /// Rolling resistance, N.
    pub rolling_c0: f64,
    /// Rolling resistance, N·s/m.
    pub rolling_c1: f64,
    /// Aerodynamic drag, N·s²/m².
    pub aero_c2: f64,
    #[serde(default = "default_rpm_coeff")]
    pub rpm_coeff: f64,
    /// Piecewise-constant `(speed m/s, gear ratio)`; each interval is `[b_i, b_{i+1})`.
    pub gear_map: Vec<MapPoint>,
    /// Piecewise-linear `(motor RPM, generator torque limit N·m)`.
    pub torque_limit_map: Vec<MapPoint>,
}

fn default_rpm_coeff() -> f64 {
    RPM_COEFF
}

/// Decomposition of the braking force at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceBreakdown {
    pub f_brk: f64,
    pub f_load_alpha: f64,
    pub f_load_beta: f64,
    pub f_act: f64,
    pub f_lmt: f64,
    pub f_rgn: f64,
    pub f_frc: f64,
}

impl VehicleParams {
    /// Synthetic compact PHEV. Maps are invented stand-ins with plausible
    /// magnitudes, not measured data.
    pub fn synthetic() -> Self {
        VehicleParams {
            effective_mass: 1580.0,
            wheel_radius: 0.31,
            final_drive: 4.19,
            rolling_c0: 130.0,
            rolling_c1: 0.8,
            aero_c2: 0.42,
            rpm_coeff: RPM_COEFF,
            gear_map: vec![
                (0.0, 3.867),
                (5.0, 2.217),
                (9.0, 1.371),
                (14.0, 0.956),
                (20.0, 0.703),
                (27.0, 0.548),
            ],
            torque_limit_map: vec![
                (0.0, 0.0),
                (300.0, -21.0),
                (600.0, -60.0),
                (2000.0, -60.0),
                (2500.0, -48.0),
                (3000.0, -40.0),
                (4000.0, -30.0),
                (6000.0, -20.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!("{name} must be positive, got {x}")))
            }
        };
        pos("effective_mass", self.effective_mass)?;
        pos("wheel_radius", self.wheel_radius)?;
        pos("final_drive", self.final_drive)?;
        pos("rpm_coeff", self.rpm_coeff)?;
        if self.gear_map.is_empty() || self.torque_limit_map.is_empty() {
            return Err(Error::InvalidParam(
                "gear_map and torque_limit_map must be non-empty".into(),
            ));
        }
        for w in self.gear_map.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidParam(
                    "gear_map breakpoints must be strictly increasing".into(),
                ));
            }
        }
        if self.gear_map.iter().any(|&(_, g)| g <= 0.0 || !g.is_finite()) {
            return Err(Error::InvalidParam("gear ratios must be positive".into()));
        }
        for w in self.torque_limit_map.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidParam(
                    "torque_limit_map breakpoints must be strictly increasing".into(),
                ));
            }
        }
        if self.torque_limit_map.iter().any(|&(_, t)| t > 0.0) {
            return Err(Error::InvalidParam(
                "torque limits must be <= 0 (generator mode)".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: VehicleParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn gear_ratio(&self, v: f64) -> f64 {
        let idx = self.gear_map.partition_point(|&(b, _)| b <= v);
        self.gear_map[idx.saturating_sub(1)].1
    }

    pub fn motor_speed(&self, v: f64) -> f64 {
        self.gear_ratio(v) * self.final_drive * v / (self.rpm_coeff * self.wheel_radius)
    }

    /// Generator torque limit at `rpm`, clamped to the end samples outside the map.
    pub fn torque_limit(&self, rpm: f64) -> f64 {
        interp_clamped(&self.torque_limit_map, rpm)
    }

    pub fn regen_limit_force(&self, v: f64) -> f64 {
        let t = self.torque_limit(self.motor_speed(v));
        t * self.gear_ratio(v) * self.final_drive / self.wheel_radius
    }

    /// `(F_Load,α, F_Load,β)`: rolling plus aero, and grade.
    pub fn road_load(&self, v: f64, slope: f64) -> (f64, f64) {
        let alpha = self.rolling_c0 * slope.cos() + self.rolling_c1 * v + self.aero_c2 * v * v;
        let beta = self.effective_mass * GRAVITY * slope.sin();
        (alpha, beta)
    }

    pub fn road_load_total(&self, v: f64, slope: f64) -> f64 {
        let (a, b) = self.road_load(v, slope);
        a + b
    }

    /// Regenerative power and the force breakdown for a braking operating point.
    ///
    /// When the required force is tractive (`F_Brk > 0`, e.g. holding speed
    /// uphill) nothing is recuperated and `f_rgn = 0`.
    pub fn regen_power(&self, v: f64, a_d: f64, slope: f64) -> Result<(f64, ForceBreakdown)> {
        if a_d > 0.0 {
            return Err(Error::InvalidParam(format!("braking model needs a_d <= 0, got {a_d}")));
        }
        if v < 0.0 {
            return Err(Error::InvalidParam(format!("speed must be >= 0, got {v}")));
        }
        Ok(self.regen_power_unchecked(v, a_d, slope))
    }

    pub(crate) fn regen_power_unchecked(&self, v: f64, a_d: f64, slope: f64) -> (f64, ForceBreakdown) {
        let (f_load_alpha, f_load_beta) = self.road_load(v, slope);
        let f_act = self.effective_mass * a_d;
        let f_brk = f_load_alpha + f_load_beta + f_act;
        let f_lmt = self.regen_limit_force(v);
        let f_rgn = f_brk.max(f_lmt).min(0.0);
        let f_frc = (f_brk - f_rgn).min(0.0);
        let bd = ForceBreakdown {
            f_brk,
            f_load_alpha,
            f_load_beta,
            f_act,
            f_lmt,
            f_rgn,
            f_frc,
        };
        (f_rgn * v, bd)
    }
}

/// Linear interpolation over sorted samples, clamped to the end values.
pub fn interp_clamped(map: &[MapPoint], x: f64) -> f64 {
    let n = map.len();
    if x <= map[0].0 {
        return map[0].1;
    }
    if x >= map[n - 1].0 {
        return map[n - 1].1;
    }
    let i = map.partition_point(|&(b, _)| b <= x);
    let (x0, y0) = map[i - 1];
    let (x1, y1) = map[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}
