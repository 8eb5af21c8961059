//! Deceleration-time envelopes fitted from braking tests.
//!
//! Each surface is the additive cubic
//! `c0 + c1·v_i + c2·v_i² + c3·v_i³ + c4·v_f + c5·v_f² + c6·v_f³` (seconds).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::powertrain::VehicleParams;

pub const BASIS_NAMES: [&str; 7] = ["1", "v_i", "v_i^2", "v_i^3", "v_f", "v_f^2", "v_f^3"];

/// Smallest speed drop that counts as a deceleration event, m/s.
pub const MIN_SPEED_GAP: f64 = 2.0;

/// Runs start at 140 km/h.
pub const SYNTH_START_SPEED: f64 = 38.89;

/// One row of the braking corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrakingRecord {
    pub set_id: u32,
    pub t: f64,
    pub v: f64,
    pub a: f64,
    pub bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakingObservation {
    pub v_initial: f64,
    pub v_final: f64,
    /// Seconds between crossing `v_initial` and `v_final`.
    pub decel_time: f64,
    pub bps: f64,
    pub set_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub v_i: (f64, f64),
    pub v_f: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub coeffs_min: [f64; 7],
    pub coeffs_max: [f64; 7],
    pub fit_rmse_min: f64,
    pub fit_rmse_max: f64,
    pub domain: Domain,
    #[serde(default)]
    pub provenance: String,
}

/// Speeds after clamping into the envelope domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub v_i: f64,
    pub v_f: f64,
    pub clamped: bool,
}

/// Step bounds on the deceleration time at one speed pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdBounds {
    pub n_d_min: usize,
    pub n_d_max: usize,
    pub clamped: bool,
    /// Rounding inverted the bounds and both were collapsed to the midpoint.
    pub collapsed: bool,
}

/// Horner evaluation of `c0 + c1 x + c2 x² + c3 x³ + c4 y + c5 y² + c6 y³`.
pub fn eval_surface(c: &[f64; 7], v_i: f64, v_f: f64) -> f64 {
    c[0] + v_i * (c[1] + v_i * (c[2] + v_i * c[3])) + v_f * (c[4] + v_f * (c[5] + v_f * c[6]))
}

fn basis_row(v_i: f64, v_f: f64) -> [f64; 7] {
    [1.0, v_i, v_i * v_i, v_i * v_i * v_i, v_f, v_f * v_f, v_f * v_f * v_f]
}

impl Envelope {
    pub fn nd_min_s(&self, v_i: f64, v_f: f64) -> f64 {
        eval_surface(&self.coeffs_min, v_i, v_f)
    }

    pub fn nd_max_s(&self, v_i: f64, v_f: f64) -> f64 {
        eval_surface(&self.coeffs_max, v_i, v_f)
    }

    /// Clamps a query into the training domain, keeping the minimum speed gap.
    pub fn clamp(&self, v_i: f64, v_f: f64) -> Clamped {
        let (vi_lo, vi_hi) = self.domain.v_i;
        let (vf_lo, vf_hi) = self.domain.v_f;
        let mut ci = v_i.clamp(vi_lo, vi_hi);
        let mut cf = v_f.clamp(vf_lo, vf_hi);
        if ci - cf < MIN_SPEED_GAP {
            if ci - MIN_SPEED_GAP >= vf_lo {
                cf = ci - MIN_SPEED_GAP;
            } else {
                cf = vf_lo;
                ci = (cf + MIN_SPEED_GAP).min(vi_hi);
            }
        }
        Clamped {
            v_i: ci,
            v_f: cf,
            clamped: ci != v_i || cf != v_f,
        }
    }

    /// Deceleration-time bounds in seconds after domain clamping.
    pub fn nd_seconds(&self, v_i: f64, v_f: f64) -> (f64, f64, bool) {
        let c = self.clamp(v_i, v_f);
        let lo = self.nd_min_s(c.v_i, c.v_f).max(0.0);
        let hi = self.nd_max_s(c.v_i, c.v_f).max(lo);
        (lo, hi, c.clamped)
    }

    pub fn nd_bounds(&self, v_i: f64, v_f: f64, dt: f64) -> NdBounds {
        let (lo_s, hi_s, clamped) = self.nd_seconds(v_i, v_f);
        let mut n_min = (lo_s / dt - 1e-9).ceil().max(1.0) as usize;
        let mut n_max = (hi_s / dt + 1e-9).floor().max(1.0) as usize;
        let mut collapsed = false;
        if n_min > n_max {
            let mid = (0.5 * (lo_s + hi_s) / dt).round().max(1.0) as usize;
            n_min = mid;
            n_max = mid;
            collapsed = true;
        }
        NdBounds {
            n_d_min: n_min,
            n_d_max: n_max,
            clamped,
            collapsed,
        }
    }

    /// Trapezoidal distance bounds `½(v_i + v_f)·N_d` for both surfaces.
    pub fn distance_surfaces(&self, v_i: f64, v_f: f64) -> (f64, f64) {
        let (lo, hi, _) = self.nd_seconds(v_i, v_f);
        let m = 0.5 * (v_i + v_f);
        (m * lo, m * hi)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    }
}

fn cell_key(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

struct LsFit {
    coeffs: [f64; 7],
    rmse: f64,
}

/// Least squares on the additive cubic basis. Columns are scaled to unit norm
/// before the SVD so rank detection is independent of speed units.
fn least_squares(points: &[(f64, f64, f64)]) -> Result<LsFit> {
    let n = points.len();
    let mut a = DMatrix::<f64>::zeros(n, 7);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &(vi, vf, t)) in points.iter().enumerate() {
        for (j, x) in basis_row(vi, vf).iter().enumerate() {
            a[(i, j)] = *x;
        }
        b[i] = t;
    }
    let mut scale = [1.0; 7];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = a.column(j).norm();
        *s = if norm > 0.0 { norm } else { 1.0 };
        a.column_mut(j).scale_mut(1.0 / *s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1e-300);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let weak: Vec<String> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= tol)
        .map(|(k, _)| {
            let row = v_t.row(k);
            let (j, _) = row.iter().enumerate().fold(
                (0, 0.0),
                |(bj, bv), (j, &x)| if x.abs() > bv { (j, x.abs()) } else { (bj, bv) },
            );
            BASIS_NAMES[j].to_string()
        })
        .collect();
    if !weak.is_empty() {
        return Err(Error::RankDeficient(weak));
    }
    let x = svd
        .solve(&b, tol)
        .map_err(|e| Error::Parse(format!("SVD solve failed: {e}")))?;
    let mut coeffs = [0.0; 7];
    for j in 0..7 {
        coeffs[j] = x[j] / scale[j];
    }
    let sse: f64 = points
        .iter()
        .map(|&(vi, vf, t)| (eval_surface(&coeffs, vi, vf) - t).powi(2))
        .sum();
    Ok(LsFit {
        coeffs,
        rmse: (sse / n as f64).sqrt(),
    })
}

/// Per-cell lower/upper quantiles of the observed times.
pub fn cell_quantiles(obs: &[BrakingObservation], band: f64) -> Vec<(f64, f64, f64, f64)> {
    let mut cells: BTreeMap<(i64, i64), (f64, f64, Vec<f64>)> = BTreeMap::new();
    for o in obs {
        cells
            .entry((cell_key(o.v_initial), cell_key(o.v_final)))
            .or_insert_with(|| (o.v_initial, o.v_final, Vec::new()))
            .2
            .push(o.decel_time);
    }
    cells
        .into_values()
        .map(|(vi, vf, mut ts)| {
            ts.sort_by(|a, b| a.total_cmp(b));
            (vi, vf, quantile(&ts, band), quantile(&ts, 1.0 - band))
        })
        .collect()
}

/// Fits the lower and upper deceleration-time surfaces.
///
/// `quantile_band` selects which per-cell quantiles are treated as the
/// extremes: 0.05 fits the 5th and 95th percentiles.
pub fn fit_envelope(obs: &[BrakingObservation], quantile_band: f64) -> Result<Envelope> {
    if obs.len() < 7 {
        return Err(Error::NotEnoughData {
            needed: 7,
            got: obs.len(),
        });
    }
    if !(0.0..0.5).contains(&quantile_band) {
        return Err(Error::InvalidParam(format!(
            "quantile band {quantile_band} outside [0, 0.5)"
        )));
    }
    let cells = cell_quantiles(obs, quantile_band);
    let lo: Vec<_> = cells.iter().map(|&(vi, vf, l, _)| (vi, vf, l)).collect();
    let hi: Vec<_> = cells.iter().map(|&(vi, vf, _, h)| (vi, vf, h)).collect();
    let fit_lo = least_squares(&lo)?;
    let fit_hi = least_squares(&hi)?;
    let fold = |f: fn(&BrakingObservation) -> f64| {
        obs.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
    };
    Ok(Envelope {
        coeffs_min: fit_lo.coeffs,
        coeffs_max: fit_hi.coeffs,
        fit_rmse_min: fit_lo.rmse,
        fit_rmse_max: fit_hi.rmse,
        domain: Domain {
            v_i: fold(|o| o.v_initial),
            v_f: fold(|o| o.v_final),
        },
        provenance: String::new(),
    })
}

/// Time at which the series first falls to `level`, linearly interpolated.
fn first_crossing(series: &[BrakingRecord], level: f64, from: usize) -> Option<(usize, f64)> {
    for j in from..series.len().saturating_sub(1) {
        let (a, b) = (series[j], series[j + 1]);
        if a.v > level && b.v <= level {
            let f = (a.v - level) / (a.v - b.v);
            return Some((j, a.t + f * (b.t - a.t)));
        }
    }
    None
}

/// Result of scanning a corpus for decelerating speed pairs.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub observations: Vec<BrakingObservation>,
    /// Pairs skipped because speed rose between the two crossings.
    pub non_monotone: usize,
}

/// Rise in speed, m/s, above which a segment is treated as non-monotone.
const RISE_TOLERANCE: f64 = 0.5;

/// Scans every series for each `(v_i, v_f)` grid pair with `v_i − v_f ≥ 2`.
pub fn extract_observations(records: &[BrakingRecord], grid_step: f64) -> Extraction {
    let mut out = Extraction::default();
    for series in split_series(records) {
        let bps = series.iter().map(|r| r.bps).sum::<f64>() / series.len() as f64;
        let set_id = series[0].set_id;
        let top = series.iter().map(|r| r.v).fold(f64::NEG_INFINITY, f64::max);
        let n_levels = (top / grid_step).floor() as usize;
        let levels: Vec<f64> = (0..=n_levels).map(|i| i as f64 * grid_step).collect();
        for (ii, &vi) in levels.iter().enumerate().rev() {
            let Some((ji, ti)) = first_crossing(series, vi, 0) else {
                continue;
            };
            for &vf in levels[..ii].iter().rev() {
                if vi - vf < MIN_SPEED_GAP - 1e-9 {
                    continue;
                }
                let Some((jf, tf)) = first_crossing(series, vf, ji) else {
                    continue;
                };
                let rises = series[ji..=jf + 1].windows(2).any(|w| w[1].v - w[0].v > RISE_TOLERANCE);
                if rises {
                    out.non_monotone += 1;
                    continue;
                }
                out.observations.push(BrakingObservation {
                    v_initial: vi,
                    v_final: vf,
                    decel_time: tf - ti,
                    bps,
                    set_id,
                });
            }
        }
    }
    if out.non_monotone > 0 {
        warn!("skipped {} non-monotone speed segments", out.non_monotone);
    }
    out
}

/// Splits a flat corpus into consecutive runs sharing a `set_id`.
pub fn split_series(records: &[BrakingRecord]) -> Vec<&[BrakingRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].set_id != records[start].set_id {
            if i > start {
                out.push(&records[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Synthetic braking corpus: ten runs from 38.89 m/s to standstill at brake
/// pedal levels spread evenly over 0–30 %, with sensor noise.
///
/// Pedal deceleration rises with a first-order lag; coasting drag combines a
/// fixed regenerative drag with the vehicle's road load.
pub fn synth_braking_data(seed: u64, params: &VehicleParams) -> Vec<BrakingRecord> {
    const SAMPLE_DT: f64 = 0.1;
    const LAG: f64 = 0.6;
    const COAST_DRAG: f64 = 0.15;
    const PEDAL_GAIN: f64 = 0.26;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for set in 0..10u32 {
        let bps = 30.0 * set as f64 / 9.0;
        let gain = PEDAL_GAIN * (1.0 + rng.gen_range(-0.05..0.05));
        let mut v = SYNTH_START_SPEED;
        let mut t = 0.0;
        let mut pedal = 0.0;
        loop {
            let load = params.road_load_total(v, 0.0) / params.effective_mass;
            let a = -(COAST_DRAG + load + pedal);
            let noise_v: f64 = rng.gen_range(-0.03..0.03);
            let noise_a: f64 = rng.gen_range(-0.05..0.05);
            let v_meas = if t == 0.0 {
                v
            } else if v > 0.0 {
                (v + noise_v).max(0.0)
            } else {
                0.0
            };
            out.push(BrakingRecord {
                set_id: set + 1,
                t: round9(t),
                v: round9(v_meas),
                a: round9(if v > 0.0 { a + noise_a } else { 0.0 }),
                bps: round9(bps),
            });
            if v <= 0.0 {
                break;
            }
            pedal += (bps * gain - pedal) * SAMPLE_DT / LAG;
            v = (v + a * SAMPLE_DT).max(0.0);
            t += SAMPLE_DT;
        }
    }
    out
}

fn round9(x: f64) -> f64 {
    crate::export::sig9(x)
}

pub const CORPUS_HEADER: &str = "set_id,t_s,v_mps,a_mps2,bps_pct";

pub fn write_corpus_csv<W: Write>(mut w: W, records: &[BrakingRecord]) -> Result<()> {
    writeln!(w, "{CORPUS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.set_id,
            crate::export::fmt9(r.t),
            crate::export::fmt9(r.v),
            crate::export::fmt9(r.a),
            crate::export::fmt9(r.bps)
        )?;
    }
    Ok(())
}

pub fn read_corpus_csv<R: BufRead>(r: R) -> Result<Vec<BrakingRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if n == 0 {
            if line != CORPUS_HEADER {
                return Err(Error::Parse(format!("corpus header must be `{CORPUS_HEADER}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 columns", n + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        };
        out.push(BrakingRecord {
            set_id: f[0]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?,
            t: num(f[1])?,
            v: num(f[2])?,
            a: num(f[3])?,
            bps: num(f[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp(set_id: u32, v0: f64, a: f64, dt: f64) -> Vec<BrakingRecord> {
        let mut v = v0;
        let mut t = 0.0;
        let mut out = vec![];
        while v > 0.0 {
            out.push(BrakingRecord {
                set_id,
                t,
                v,
                a,
                bps: 10.0,
            });
            v = (v + a * dt).max(0.0);
            t += dt;
        }
        out.push(BrakingRecord {
            set_id,
            t,
            v: 0.0,
            a: 0.0,
            bps: 10.0,
        });
        out
    }

    #[test]
    fn constant_decel_crossing() {
        let recs = ramp(1, 21.0, -2.0, 0.01);
        let ex = extract_observations(&recs, 2.0);
        let o = ex
            .observations
            .iter()
            .find(|o| o.v_initial == 20.0 && o.v_final == 10.0)
            .unwrap();
        assert_relative_eq!(o.decel_time, 5.0, epsilon = 1e-6);
        assert!(ex.observations.iter().all(|o| o.v_initial - o.v_final >= 2.0));
    }

    #[test]
    fn never_reaching_final_speed() {
        let mut recs = ramp(1, 21.0, -2.0, 0.1);
        recs.retain(|r| r.v > 9.0);
        let ex = extract_observations(&recs, 2.0);
        assert!(ex.observations.iter().all(|o| o.v_final >= 10.0));
    }

    #[test]
    fn non_monotone_segments_are_counted() {
        let mut recs = ramp(1, 21.0, -1.0, 0.1);
        // bump speed up by 2 m/s in the middle
        let mid = recs.len() / 2;
        recs[mid].v += 2.0;
        let ex = extract_observations(&recs, 2.0);
        assert!(ex.non_monotone > 0);
    }

    #[test]
    fn rank_deficient_single_final_speed() {
        let obs: Vec<_> = (0..12)
            .map(|i| BrakingObservation {
                v_initial: 4.0 + i as f64,
                v_final: 0.0,
                decel_time: 1.0 + i as f64,
                bps: 0.0,
                set_id: 1,
            })
            .collect();
        match fit_envelope(&obs, 0.0) {
            Err(Error::RankDeficient(dirs)) => {
                assert!(dirs.iter().any(|d| d.starts_with("v_f") || d == "1"), "{dirs:?}")
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(matches!(fit_envelope(&obs[..3], 0.0), Err(Error::NotEnoughData { .. })));
    }

    #[test]
    fn clamps_equal_speeds() {
        let env = Envelope {
            coeffs_min: [1.0, 0.1, 0.0, 0.0, -0.1, 0.0, 0.0],
            coeffs_max: [2.0, 0.5, 0.0, 0.0, -0.5, 0.0, 0.0],
            fit_rmse_min: 0.0,
            fit_rmse_max: 0.0,
            domain: Domain {
                v_i: (2.0, 38.0),
                v_f: (0.0, 36.0),
            },
            provenance: String::new(),
        };
        let b = env.nd_bounds(20.0, 20.0, 0.5);
        assert!(b.clamped);
        assert!(b.n_d_min <= b.n_d_max);
        let c = env.clamp(20.0, 20.0);
        assert_eq!((c.v_i, c.v_f), (20.0, 18.0));
    }

    #[test]
    fn degenerate_band_collapses() {
        let env = Envelope {
            coeffs_min: [3.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            coeffs_max: [3.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            fit_rmse_min: 0.0,
            fit_rmse_max: 0.0,
            domain: Domain {
                v_i: (2.0, 38.0),
                v_f: (0.0, 36.0),
            },
            provenance: String::new(),
        };
        let b = env.nd_bounds(20.0, 10.0, 1.0);
        assert_eq!(b.n_d_min, b.n_d_max);
        assert!(b.collapsed);
        let b = env.nd_bounds(20.0, 10.0, 0.4);
        assert_eq!((b.n_d_min, b.n_d_max), (8, 8));
    }

    #[test]
    fn distance_surface_hand_value() {
        let env = Envelope {
            coeffs_min: [5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            coeffs_max: [9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            fit_rmse_min: 0.0,
            fit_rmse_max: 0.0,
            domain: Domain {
                v_i: (2.0, 38.0),
                v_f: (0.0, 36.0),
            },
            provenance: String::new(),
        };
        let (lo, hi) = env.distance_surfaces(20.0, 0.0);
        assert_relative_eq!(lo, 50.0);
        assert_relative_eq!(hi, 90.0);
    }

    #[test]
    fn synthetic_corpus_properties() {
        let p = VehicleParams::synthetic();
        let a = synth_braking_data(7, &p);
        let b = synth_braking_data(7, &p);
        assert_eq!(a, b);
        let runs = split_series(&a);
        assert_eq!(runs.len(), 10);
        let mut bps: Vec<f64> = runs.iter().map(|r| r[0].bps).collect();
        bps.dedup();
        assert_eq!(bps.len(), 10);
        assert_eq!(bps[0], 0.0);
        assert_relative_eq!(bps[9], 30.0);
        for r in &runs {
            assert_eq!(r[0].v, SYNTH_START_SPEED);
            assert_eq!(r.last().unwrap().v, 0.0);
        }
        let stop_times: Vec<f64> = runs.iter().map(|r| r.last().unwrap().t).collect();
        assert!(stop_times.windows(2).all(|w| w[1] < w[0]), "{stop_times:?}");
    }

    #[test]
    fn corpus_csv_round_trip() {
        let p = VehicleParams::synthetic();
        let recs = synth_braking_data(3, &p);
        let mut buf = Vec::new();
        write_corpus_csv(&mut buf, &recs).unwrap();
        let back = read_corpus_csv(&buf[..]).unwrap();
        assert_eq!(back, recs);
    }
}
