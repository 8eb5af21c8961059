//! Route geometry: grade samples along distance and the signalised
//! intersections placed on it.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Phase, SpatState};
use crate::export::fmt9;

/// Grade sanity band, rad.
pub const SLOPE_LIMIT: f64 = 0.5;

/// A fixed-time traffic light. The cycle runs red → green → yellow and the
/// cycle position at absolute time `t` is `(t + phase_offset_s) mod cycle`,
/// with position 0 at the start of red.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalLight {
    pub position_m: f64,
    pub green_s: f64,
    pub yellow_s: f64,
    pub red_s: f64,
    pub phase_offset_s: f64,
}

impl SignalLight {
    pub fn cycle(&self) -> f64 {
        self.green_s + self.yellow_s + self.red_s
    }

    /// Phase and timing snapshot at absolute time `t`.
    pub fn spat_at(&self, t: f64) -> SpatState {
        let cycle = self.cycle();
        let pos = (t + self.phase_offset_s).rem_euclid(cycle);
        let (phase, start, dur) = if pos < self.red_s {
            (Phase::Red, 0.0, self.red_s)
        } else if pos < self.red_s + self.green_s {
            (Phase::Green, self.red_s, self.green_s)
        } else {
            (Phase::Yellow, self.red_s + self.green_s, self.yellow_s)
        };
        let t_cur = (start + dur - pos).max(0.0);
        SpatState {
            phase,
            t_cur,
            t_red: self.red_s,
            t_yellow: self.yellow_s,
            t_green: self.green_s,
            cycle_anchor: t - (pos - start),
        }
    }

    pub fn phase_at(&self, t: f64) -> Phase {
        self.spat_at(t).phase
    }

    fn validate(&self) -> Result<()> {
        if !(self.green_s > 0.0 && self.yellow_s > 0.0 && self.red_s > 0.0) {
            return Err(Error::InvalidParam("light phase durations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// `(distance m, slope rad)` with strictly increasing distance from 0.
    pub samples: Vec<(f64, f64)>,
    pub total_length: f64,
    pub lights: Vec<SignalLight>,
}

impl Route {
    pub fn new(samples: Vec<(f64, f64)>, lights: Vec<SignalLight>) -> Result<Self> {
        if samples.is_empty() || samples[0].0 != 0.0 {
            return Err(Error::InvalidParam("route must start with a sample at 0 m".into()));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidParam(
                "route distances must be strictly increasing".into(),
            ));
        }
        if samples.iter().any(|&(_, s)| !(s.abs() <= SLOPE_LIMIT)) {
            return Err(Error::InvalidParam(format!("route slope outside ±{SLOPE_LIMIT} rad")));
        }
        for l in &lights {
            l.validate()?;
        }
        if lights.windows(2).any(|w| w[1].position_m < w[0].position_m) {
            return Err(Error::InvalidParam("lights must be sorted by position".into()));
        }
        let total_length = samples.last().unwrap().0;
        Ok(Route {
            samples,
            total_length,
            lights,
        })
    }

    pub fn flat(length: f64, lights: Vec<SignalLight>) -> Result<Self> {
        Route::new(vec![(0.0, 0.0), (length, 0.0)], lights)
    }

    /// Grade at `d`, interpolated linearly and clamped to the route ends.
    pub fn slope_at(&self, d: f64) -> f64 {
        crate::powertrain::interp_clamped(&self.samples, d)
    }

    /// Route slice starting at `from` and `length` long, re-based to 0.
    pub fn slice(&self, from: f64, length: f64) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, self.slope_at(from))];
        for &(d, s) in &self.samples {
            if d > from && d < from + length {
                out.push((d - from, s));
            }
        }
        out.push((length.max(1e-9), self.slope_at(from + length)));
        out.dedup_by(|b, a| b.0 <= a.0);
        out
    }

    /// The standard synthetic test route: 12.4 km, 46 fixed-time lights on a
    /// 12/3/10 s green/yellow/red cycle, band-limited grade inside
    /// [−0.22, 0.41] rad. Offsets and grade are seeded.
    pub fn synthetic(seed: u64) -> Route {
        const LENGTH: f64 = 12_400.0;
        const N_LIGHTS: usize = 46;
        const STEP: f64 = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sum of a few random sinusoids: smooth, mostly gentle urban grade
        let waves: Vec<(f64, f64, f64)> = (0..6)
            .map(|i| {
                let wavelength = rng.gen_range(300.0..2500.0) / (1.0 + i as f64 * 0.3);
                let amp = rng.gen_range(0.005..0.02);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (wavelength, amp, phase)
            })
            .collect();
        let n = (LENGTH / STEP) as usize;
        let mut samples = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let d = i as f64 * STEP;
            let mut s: f64 = waves
                .iter()
                .map(|&(wl, a, ph)| a * (std::f64::consts::TAU * d / wl + ph).sin())
                .sum();
            s = s.clamp(-0.22, 0.41);
            samples.push((d, s));
        }
        let spacing = LENGTH / (N_LIGHTS as f64 + 1.0);
        // two short steep ramps, just past a light, reach the extremes of the grade band
        for (after_light, peak) in [(11.0, 0.41), (33.0, -0.22)] {
            let centre = ((after_light * spacing + 40.0) / STEP).round() * STEP;
            for (d, s) in samples.iter_mut() {
                let x = (*d - centre) / 25.0;
                if x.abs() < 1.0 {
                    *s = peak * (1.0 - x * x);
                }
            }
        }
        let lights = (1..=N_LIGHTS)
            .map(|i| SignalLight {
                position_m: (i as f64 * spacing).round(),
                green_s: 12.0,
                yellow_s: 3.0,
                red_s: 10.0,
                phase_offset_s: rng.gen_range(0.0..25.0f64).round(),
            })
            .collect();
        Route::new(samples, lights).expect("synthetic route is valid")
    }
}

pub const ROUTE_HEADER: &str = "distance_m,slope_rad";

pub fn write_route_csv<W: Write>(mut w: W, route: &Route) -> Result<()> {
    writeln!(w, "{ROUTE_HEADER}")?;
    for &(d, s) in &route.samples {
        writeln!(w, "{},{}", fmt9(d), fmt9(s))?;
    }
    Ok(())
}

pub fn read_route_csv<R: BufRead>(r: R) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if n == 0 {
            if line != ROUTE_HEADER {
                return Err(Error::Parse(format!("route header must be `{ROUTE_HEADER}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {}: expected 2 columns", n + 1)))?;
        let p = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        };
        out.push((p(a)?, p(b)?));
    }
    Ok(out)
}

pub fn read_lights_json(text: &str) -> Result<Vec<SignalLight>> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_lookup() {
        let r = Route::new(vec![(0.0, 0.0), (100.0, 0.1), (200.0, -0.1)], vec![]).unwrap();
        assert_eq!(r.slope_at(100.0), 0.1);
        assert!((r.slope_at(50.0) - 0.05).abs() < 1e-15);
        assert_eq!(r.slope_at(500.0), -0.1);
        assert_eq!(r.slope_at(-5.0), 0.0);
    }

    #[test]
    fn invalid_routes() {
        assert!(Route::new(vec![(1.0, 0.0), (2.0, 0.0)], vec![]).is_err());
        assert!(Route::new(vec![(0.0, 0.0), (0.0, 0.0)], vec![]).is_err());
        assert!(Route::new(vec![(0.0, 0.6), (10.0, 0.0)], vec![]).is_err());
    }

    #[test]
    fn light_cycle() {
        let l = SignalLight {
            position_m: 0.0,
            green_s: 12.0,
            yellow_s: 3.0,
            red_s: 10.0,
            phase_offset_s: 0.0,
        };
        let s = l.spat_at(3.0);
        assert_eq!(s.phase, Phase::Red);
        assert!((s.t_cur - 7.0).abs() < 1e-12);
        assert_eq!(l.phase_at(10.0), Phase::Green);
        assert_eq!(l.phase_at(22.5), Phase::Yellow);
        assert_eq!(l.phase_at(25.0), Phase::Red);
    }

    #[test]
    fn synthetic_route_shape() {
        let r = Route::synthetic(1);
        assert_eq!(r.total_length, 12_400.0);
        assert_eq!(r.lights.len(), 46);
        let (lo, hi) = r
            .samples
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), &(_, s)| (a.min(s), b.max(s)));
        assert!((lo + 0.22).abs() < 1e-9 && (hi - 0.41).abs() < 1e-9, "{lo} {hi}");
        assert_eq!(Route::synthetic(1), r);
    }
}

/// Grade along a route slice, re-based so the slice starts at 0 m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeTable {
    pub samples: Vec<(f64, f64)>,
}

impl SlopeTable {
    pub fn constant(slope: f64, length: f64) -> Self {
        SlopeTable {
            samples: vec![(0.0, slope), (length.max(1e-9), slope)],
        }
    }

    pub fn slope_at(&self, d: f64) -> f64 {
        crate::powertrain::interp_clamped(&self.samples, d)
    }

    pub fn extent(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.0)
    }
}

impl Route {
    pub fn slope_table(&self, from: f64, length: f64) -> SlopeTable {
        SlopeTable {
            samples: self.slice(from, length),
        }
    }
}
