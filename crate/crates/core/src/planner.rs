//! Dynamic-programming deceleration planner over a per-stage (speed,
//! travelled distance) grid.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::constraints::{self, StageBounds};
use crate::decel_model::{DecelShape, NORMALIZATION_BAND};
use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::events::SpatState;
use crate::export::fmt9;
use crate::powertrain::{ForceBreakdown, VehicleParams};
use crate::route::SlopeTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    /// Successor states snap to the nearest node; the recursion is then exact
    /// on the snapped process.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub dt: f64,
    pub speed_grid_points: usize,
    pub distance_grid_points: usize,
    pub nd_candidates: usize,
    pub blend_w: f64,
    pub beta_clamp: (f64, f64),
    pub infeasible_cost: f64,
    pub interpolation: Interpolation,
    /// Width of the terminal speed window above `v_f0`.
    pub terminal_speed_tol: f64,
    /// Width of the terminal distance window below `d_res`.
    pub terminal_distance_tol: f64,
    /// Quadratic cost per unit² of terminal speed or distance error outside
    /// the windows.
    pub terminal_penalty: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            dt: 0.5,
            speed_grid_points: 21,
            distance_grid_points: 21,
            nd_candidates: 5,
            blend_w: 0.5,
            beta_clamp: (0.5, 2.0),
            infeasible_cost: 1e12,
            interpolation: Interpolation::Bilinear,
            terminal_speed_tol: 1.0,
            terminal_distance_tol: 3.0,
            terminal_penalty: 1e5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("planner config: {m}")));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.speed_grid_points < 2 || self.distance_grid_points < 2 || self.nd_candidates < 2 {
            return bad("grid and candidate counts must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.blend_w) {
            return bad("blend_w must lie in [0, 1]");
        }
        if !(self.beta_clamp.0 > 0.0 && self.beta_clamp.0 <= 1.0 && self.beta_clamp.1 >= 1.0) {
            return bad("beta_clamp must bracket 1 and be positive");
        }
        if !(self.infeasible_cost > 0.0)
            || !(self.terminal_speed_tol > 0.0)
            || !(self.terminal_distance_tol > 0.0)
            || !(self.terminal_penalty >= 0.0)
        {
            return bad("infeasible_cost and terminal tolerances must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecelPlanRequest {
    pub v_i0: f64,
    pub v_f0: f64,
    pub d_res: f64,
    pub t_req: f64,
    /// Grade along the remaining distance, starting at the vehicle.
    pub slopes: SlopeTable,
    #[serde(default)]
    pub spat: Option<SpatState>,
}

impl DecelPlanRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_f0 >= 0.0) || !(self.v_f0 < self.v_i0) || !self.v_i0.is_finite() {
            return Err(Error::InvalidParam(format!(
                "need 0 <= v_f0 < v_i0, got v_i0 = {}, v_f0 = {}",
                self.v_i0, self.v_f0
            )));
        }
        if !(self.d_res > 0.0) || !(self.t_req > 0.0) {
            return Err(Error::InvalidParam("d_res and t_req must be positive".into()));
        }
        if self.slopes.samples.is_empty() {
            return Err(Error::InvalidParam("empty slope table".into()));
        }
        Ok(())
    }
}

pub fn horizon_steps(t_req: f64, dt: f64) -> Result<usize> {
    if !(t_req > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParam("t_req and dt must be positive".into()));
    }
    let n = (t_req / dt + 1e-9).floor() as usize;
    if n < 2 {
        return Err(Error::HorizonTooShort { steps: n });
    }
    Ok(n)
}

/// Slopes at the given distances and their mean.
pub fn slope_candidates(slopes: &SlopeTable, distances: &[f64]) -> (Vec<f64>, f64) {
    let rho: Vec<f64> = distances.iter().map(|&d| slopes.slope_at(d)).collect();
    let mean = if rho.is_empty() {
        0.0
    } else {
        rho.iter().sum::<f64>() / rho.len() as f64
    };
    (rho, mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    fn new(lo: f64, hi: f64, n: usize) -> Self {
        if hi > lo {
            Axis { lo, hi, n }
        } else {
            Axis { lo: hi, hi, n: 1 }
        }
    }

    pub fn cell(&self) -> f64 {
        if self.n > 1 {
            (self.hi - self.lo) / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.cell() * i as f64
        }
    }

    /// Lower node index and weight of the upper node, clamped to the axis.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.n == 1 {
            return (0, 0.0);
        }
        let u = ((x - self.lo) / self.cell()).clamp(0.0, (self.n - 1) as f64);
        let i = (u.floor() as usize).min(self.n - 2);
        (i, u - i as f64)
    }

    pub fn nearest(&self, x: f64) -> usize {
        let (i, f) = self.locate(x);
        if f > 0.5 {
            i + 1
        } else {
            i
        }
    }

    fn contains_within(&self, x: f64, slack: f64) -> bool {
        x >= self.lo - slack && x <= self.hi + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGrid {
    pub k: usize,
    pub v_axis: Axis,
    pub d_axis: Axis,
    pub candidates: Vec<usize>,
    pub nd_lo: usize,
    pub nd_hi: usize,
    pub rho_bar: f64,
    pub nd_fallback: bool,
    pub infeasible_shapes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub a: f64,
    pub cost: f64,
    pub v_next: f64,
    pub d_next: f64,
}

/// A deceleration-time candidate whose exponent and scale are tuned so that
/// holding it over the whole horizon ends at `v_f0` inside the terminal
/// distance window.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateShape {
    pub shape: DecelShape,
    pub scale: f64,
}

const P_SCAN: (f64, f64, usize) = (0.05, 200.0, 40);

/// Deceleration the road load alone produces; the profile never asks for
/// less braking than this, since that would need propulsion.
fn coast_decel(params: &VehicleParams, slopes: &SlopeTable, v: f64, d: f64) -> f64 {
    -params.road_load_total(v, slopes.slope_at(d)) / params.effective_mass
}

/// Deceleration applied for a shape value at a state.
fn applied(shape_a: f64, coast: f64, v: f64, dt: f64) -> f64 {
    shape_a.min(0.0).min(coast).max(-v / dt)
}

type Coast<'a> = &'a dyn Fn(f64, f64) -> f64;

/// Distance and cumulative speed change of the blended curve held fixed.
fn blended_rollout(shape: &DecelShape, scale: f64, v_i0: f64, w: f64, d_res: f64, coast: Coast) -> (f64, f64) {
    let dt = shape.dt;
    let (mut v, mut d, mut dv) = (v_i0, 0.0, 0.0);
    for k in 0..shape.n_total {
        let delta = (w * d / d_res).clamp(0.0, w);
        let a = applied(scale * shape.blended(k, delta), coast(v, d), v, dt);
        dv += a * dt;
        d += v * dt;
        v = (v + a * dt).max(0.0);
    }
    (d, dv)
}

fn normalized(shape: &DecelShape, v_i0: f64, v_f0: f64, w: f64, d_res: f64, coast: Coast) -> (f64, f64) {
    let mut scale = 1.0;
    let mut d = 0.0;
    for _ in 0..12 {
        let (dist, dv) = blended_rollout(shape, scale, v_i0, w, d_res, coast);
        d = dist;
        if dv == 0.0 || ((v_f0 - v_i0) - dv).abs() < 1e-12 {
            break;
        }
        scale *= (v_f0 - v_i0) / dv;
    }
    (d, scale)
}

#[allow(clippy::too_many_arguments)]
fn calibrate(
    v_i0: f64,
    v_f0: f64,
    nd: usize,
    n: usize,
    dt: f64,
    w: f64,
    d_res: f64,
    target: f64,
    coast: Coast,
) -> Option<CandidateShape> {
    let eval = |lp: f64| -> Option<(f64, CandidateShape)> {
        let shape = DecelShape::with_p(v_i0, v_f0, nd, n, dt, lp.exp()).ok()?;
        let (d, scale) = normalized(&shape, v_i0, v_f0, w, d_res, coast);
        d.is_finite().then_some((d, CandidateShape { shape, scale }))
    };
    let (lo, hi, m) = (P_SCAN.0.ln(), P_SCAN.1.ln(), P_SCAN.2);
    let grid: Vec<(f64, Option<(f64, CandidateShape)>)> = (0..m)
        .map(|i| {
            let lp = lo + (hi - lo) * i as f64 / (m - 1) as f64;
            (lp, eval(lp))
        })
        .collect();
    let mut bracket = None;
    for pair in grid.windows(2) {
        if let ((a, Some((da, _))), (b, Some((db, _)))) = (&pair[0], &pair[1]) {
            if (da - target) * (db - target) <= 0.0 {
                bracket = Some((*a, *b, *da));
                break;
            }
        }
    }
    let (mut a, mut b, da) = bracket?;
    let rising = da <= target;
    for _ in 0..50 {
        let mid = 0.5 * (a + b);
        let (dm, _) = eval(mid)?;
        if (dm <= target) == rising {
            a = mid;
        } else {
            b = mid;
        }
    }
    let (_, cand) = eval(0.5 * (a + b))?;
    (NORMALIZATION_BAND.0..=NORMALIZATION_BAND.1)
        .contains(&cand.scale)
        .then_some(cand)
}

/// Everything the recursion needs for one request, plus the value tables.
#[derive(Debug, Clone)]
pub struct Planner {
    pub request: DecelPlanRequest,
    pub params: VehicleParams,
    pub cfg: PlannerConfig,
    pub n: usize,
    pub v_ref: Vec<f64>,
    pub v_1a: f64,
    pub v_load: Vec<f64>,
    pub d_ref: Vec<f64>,
    pub nd_env: (usize, usize),
    pub envelope_clamped: bool,
    pub slope_past_end: bool,
    pub stages: Vec<StageGrid>,
    /// Bilinear lookups drop infeasible corners and need at least this much
    /// of the cell weight left; 1 means every touched corner is feasible.
    pub min_feasible_weight: f64,
    shapes: BTreeMap<usize, CandidateShape>,
    values: Vec<Vec<f64>>,
    solved: bool,
}

const MIN_SLACK_V: f64 = 0.05;
/// Share of a bilinear cell that must be feasible on the relaxed retry.
const RELAXED_WEIGHT: f64 = 0.5;
const MIN_SLACK_D: f64 = 0.1;

fn sample_integers(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if hi + 1 - lo <= count {
        return (lo..=hi).collect();
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| (lo as f64 + (hi - lo) as f64 * i as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

impl Planner {
    pub fn new(
        request: &DecelPlanRequest,
        params: &VehicleParams,
        env: &Envelope,
        cfg: &PlannerConfig,
    ) -> Result<Self> {
        request.validate()?;
        params.validate()?;
        cfg.validate()?;
        let n = horizon_steps(request.t_req, cfg.dt)?;
        let dt = cfg.dt;
        let (v_i0, v_f0, d_res) = (request.v_i0, request.v_f0, request.d_res);
        let (v_ref, v_1a) = constraints::reference_speed(v_i0, v_f0, d_res, n, dt)?;
        let d_ref = constraints::reference_distance(&v_ref, d_res, dt);
        let (v_load, slope_past_end) = constraints::load_adjusted_bound(params, &v_ref, &request.slopes, v_i0, dt);
        let nb = env.nd_bounds(v_i0, v_f0, dt);

        let d_tol = cfg.terminal_distance_tol.min(0.5 * d_res);
        let target = d_res - 0.5 * d_tol;
        let coast = |v: f64, d: f64| coast_decel(params, &request.slopes, v, d);
        let mut shapes: BTreeMap<usize, Option<CandidateShape>> = BTreeMap::new();
        let admit = |shapes: &mut BTreeMap<usize, Option<CandidateShape>>, cands: &mut Vec<usize>| -> usize {
            let before = cands.len();
            cands.retain(|&nd| {
                shapes
                    .entry(nd)
                    .or_insert_with(|| calibrate(v_i0, v_f0, nd, n, dt, cfg.blend_w, d_res, target, &coast))
                    .is_some()
            });
            before - cands.len()
        };

        // axes follow the box reachable with the stage candidates
        let mut v_box = (v_i0, v_i0);
        let mut d_box = (0.0f64, 0.0f64);
        let mut stages = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let (v_axis, d_axis) = if k == 0 {
                (Axis::new(v_i0, v_i0, 1), Axis::new(0.0, 0.0, 1))
            } else {
                let d_hi = if k == n { d_box.1.min(d_res) } else { d_box.1 };
                (
                    Axis::new(v_box.0, v_box.1, cfg.speed_grid_points),
                    Axis::new(d_box.0.min(d_hi), d_hi, cfg.distance_grid_points),
                )
            };
            let mut grid = StageGrid {
                k,
                v_axis,
                d_axis,
                candidates: Vec::new(),
                nd_lo: 0,
                nd_hi: 0,
                rho_bar: 0.0,
                nd_fallback: false,
                infeasible_shapes: 0,
            };
            if k < n {
                let probes: Vec<f64> = (0..v_axis.n)
                    .map(|i| d_ref[k].max(0.0) + v_axis.value(i) * dt)
                    .collect();
                let (_, rho_bar) = slope_candidates(&request.slopes, &probes);
                let (lo, hi, fallback) = constraints::slope_adaptive_nd(nb.n_d_min, nb.n_d_max, n, rho_bar);
                let mut cands: Vec<usize> = sample_integers(lo, hi, cfg.nd_candidates);
                let mut dropped = admit(&mut shapes, &mut cands);
                let mut fb = fallback;
                if cands.is_empty() && !fallback {
                    let lo = nb.n_d_min.max(1);
                    let hi = nb.n_d_max.max(lo);
                    cands = sample_integers(lo, hi, cfg.nd_candidates);
                    dropped += admit(&mut shapes, &mut cands);
                    fb = true;
                }
                if cands.is_empty() {
                    return Err(Error::NoFeasibleTrajectory {
                        stage: k,
                        reason: format!(
                            "no admissible deceleration shape for N_d in [{}, {}] over N = {n}",
                            nb.n_d_min, nb.n_d_max
                        ),
                    });
                }
                cands.reverse();
                let (mut a_lo, mut a_hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &nd in &cands {
                    let c = shapes[&nd].as_ref().unwrap();
                    for d in [d_box.0, d_box.1] {
                        let delta = (cfg.blend_w * d / d_res).clamp(0.0, cfg.blend_w);
                        let a = c.scale * c.shape.blended(k, delta);
                        for v in [v_box.0, v_box.1] {
                            let a = applied(a, coast(v, d), f64::INFINITY, dt);
                            a_lo = a_lo.min(a);
                            a_hi = a_hi.max(a);
                        }
                    }
                }
                d_box = (d_box.0 + v_box.0 * dt, d_box.1 + v_box.1 * dt);
                v_box = ((v_box.0 + a_lo * dt).max(0.0), (v_box.1 + a_hi * dt).max(0.0));
                grid.candidates = cands;
                grid.nd_lo = lo;
                grid.nd_hi = hi;
                grid.rho_bar = rho_bar;
                grid.nd_fallback = fb;
                grid.infeasible_shapes = dropped;
            }
            stages.push(grid);
        }
        let shapes = shapes.into_iter().filter_map(|(k, s)| s.map(|s| (k, s))).collect();
        Ok(Planner {
            request: request.clone(),
            params: params.clone(),
            cfg: cfg.clone(),
            n,
            v_ref,
            v_1a,
            v_load,
            d_ref,
            nd_env: (nb.n_d_min, nb.n_d_max),
            envelope_clamped: nb.clamped,
            slope_past_end,
            stages,
            min_feasible_weight: 1.0,
            shapes,
            values: Vec::new(),
            solved: false,
        })
    }

    pub fn shape(&self, nd: usize) -> Option<&CandidateShape> {
        self.shapes.get(&nd)
    }

    /// Applies candidate `nd` at stage `k` from state `(v, d)`.
    pub fn transition(&self, k: usize, v: f64, d: f64, nd: usize) -> Option<Step> {
        let shape = self.shapes.get(&nd)?;
        let dt = self.cfg.dt;
        let w = self.cfg.blend_w;
        let delta = (w * d / self.request.d_res).clamp(0.0, w);
        let coast = coast_decel(&self.params, &self.request.slopes, v, d);
        let a = applied(shape.scale * shape.shape.blended(k, delta), coast, v, dt);
        let rho = self.request.slopes.slope_at(d);
        let (p, _) = self.params.regen_power_unchecked(v, a, rho);
        Some(Step {
            a,
            cost: p * dt,
            v_next: (v + a * dt).max(0.0),
            d_next: d + v * dt,
        })
    }

    pub fn terminal_cost(&self, v: f64, d: f64) -> f64 {
        let rho = self.request.slopes.slope_at(d);
        let short = (self.request.d_res - self.d_tol() - d).max(0.0);
        let fast = (v - self.request.v_f0 - self.cfg.terminal_speed_tol).max(0.0);
        let slow = (self.request.v_f0 - v).max(0.0);
        self.params.regen_power_unchecked(v, 0.0, rho).0 * self.cfg.dt
            + self.cfg.terminal_penalty * (short * short + fast * fast + slow * slow)
    }

    fn d_tol(&self) -> f64 {
        self.cfg.terminal_distance_tol.min(0.5 * self.request.d_res)
    }

    fn slack(&self, k: usize) -> (f64, f64) {
        let g = &self.stages[k];
        (g.v_axis.cell().max(MIN_SLACK_V), g.d_axis.cell().max(MIN_SLACK_D))
    }

    /// Speed bounds for a state at stage `k` with travelled distance `d`.
    pub fn bounds_at(&self, k: usize, d: f64) -> Result<StageBounds> {
        let mut b = constraints::stage_bounds(
            self.v_ref.get(k).copied().unwrap_or(self.request.v_f0),
            self.v_load[k].min(self.request.v_i0),
            self.d_ref[k],
            d,
            k,
            self.request.v_f0,
            self.cfg.dt,
            self.cfg.beta_clamp,
        )?;
        b.rho_bar = self.stages[k].rho_bar;
        Ok(b)
    }

    /// Whether a state reached at stage `k` may be continued from.
    pub fn admissible(&self, k: usize, v: f64, d: f64) -> bool {
        let g = &self.stages[k];
        let (sv, sd) = self.slack(k);
        if !g.v_axis.contains_within(v, sv) || !g.d_axis.contains_within(d, sd) {
            return false;
        }
        if k == self.n {
            // a stop must be completed by the final braking step before the line
            let overrun = if self.request.v_f0 == 0.0 {
                v.max(0.0) * self.cfg.dt
            } else {
                0.0
            };
            return d + overrun <= self.request.d_res + 1e-9;
        }
        match self.bounds_at(k, d) {
            Ok(b) => v >= b.v_lo - sv && v <= b.v_hi + sv,
            Err(_) => false,
        }
    }

    fn idx(&self, k: usize, iv: usize, id: usize) -> usize {
        iv * self.stages[k].d_axis.n + id
    }

    pub fn snap(&self, k: usize, v: f64, d: f64) -> (f64, f64) {
        let g = &self.stages[k];
        (g.v_axis.value(g.v_axis.nearest(v)), g.d_axis.value(g.d_axis.nearest(d)))
    }

    /// Cost-to-go at an arbitrary state of stage `k`; `None` when infeasible.
    pub fn value_at(&self, k: usize, v: f64, d: f64) -> Option<f64> {
        let g = &self.stages[k];
        let table = &self.values[k];
        let inf = self.cfg.infeasible_cost;
        match self.cfg.interpolation {
            Interpolation::Nearest => {
                let x = table[self.idx(k, g.v_axis.nearest(v), g.d_axis.nearest(d))];
                (x < inf).then_some(x)
            }
            Interpolation::Bilinear => {
                let (iv, fv) = g.v_axis.locate(v);
                let (id, fd) = g.d_axis.locate(d);
                let (mut acc, mut weight) = (0.0, 0.0);
                for (di, wv) in [(0, 1.0 - fv), (1, fv)] {
                    for (dj, wd) in [(0, 1.0 - fd), (1, fd)] {
                        let w = wv * wd;
                        if w == 0.0 {
                            continue;
                        }
                        let x = table[self.idx(k, iv + di, id + dj)];
                        if x < inf {
                            acc += w * x;
                            weight += w;
                        }
                    }
                }
                (weight >= self.min_feasible_weight - 1e-12).then(|| acc / weight)
            }
        }
    }

    /// Best candidate from `(v, d)` at stage `k` against the stage `k + 1`
    /// table. Ties go to the larger `N_d`.
    pub fn best_action(&self, k: usize, v: f64, d: f64) -> Option<(usize, f64, Step)> {
        let mut best: Option<(usize, f64, Step)> = None;
        for &nd in &self.stages[k].candidates {
            let Some(step) = self.transition(k, v, d, nd) else {
                continue;
            };
            if !self.admissible(k + 1, step.v_next, step.d_next) {
                continue;
            }
            let Some(tail) = self.value_at(k + 1, step.v_next, step.d_next) else {
                continue;
            };
            let q = step.cost + tail;
            if best.as_ref().is_none_or(|b| q < b.1) {
                best = Some((nd, q, step));
            }
        }
        best
    }

    /// Backward recursion over all stage grids.
    pub fn solve(&mut self) {
        let inf = self.cfg.infeasible_cost;
        self.values = self.stages.iter().map(|g| vec![inf; g.v_axis.n * g.d_axis.n]).collect();
        let n = self.n;
        let g = self.stages[n].clone();
        for iv in 0..g.v_axis.n {
            for id in 0..g.d_axis.n {
                let i = self.idx(n, iv, id);
                self.values[n][i] = self.terminal_cost(g.v_axis.value(iv), g.d_axis.value(id));
            }
        }
        for k in (0..n).rev() {
            let g = self.stages[k].clone();
            let mut table = vec![inf; g.v_axis.n * g.d_axis.n];
            for iv in 0..g.v_axis.n {
                for id in 0..g.d_axis.n {
                    let (v, d) = (g.v_axis.value(iv), g.d_axis.value(id));
                    if k > 0 && !self.admissible(k, v, d) {
                        continue;
                    }
                    if let Some((_, q, _)) = self.best_action(k, v, d) {
                        table[iv * g.d_axis.n + id] = q;
                    }
                }
            }
            self.values[k] = table;
        }
        self.solved = true;
    }

    pub fn bellman_value(&self) -> Option<f64> {
        if !self.solved {
            return None;
        }
        let x = self.values[0][0];
        (x < self.cfg.infeasible_cost).then_some(x)
    }

    /// Node values of stage `k`, speed-major.
    pub fn value_table(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// Candidate sequence chosen by the policy on the planner's own state
    /// dynamics (snapped in nearest mode).
    fn policy_sequence(&self) -> Result<Vec<usize>> {
        let mut seq = Vec::with_capacity(self.n);
        let (mut v, mut d) = (self.request.v_i0, 0.0);
        for k in 0..self.n {
            let Some((nd, _, step)) = self.best_action(k, v, d) else {
                return Err(self.failure(k));
            };
            seq.push(nd);
            (v, d) = match self.cfg.interpolation {
                Interpolation::Nearest => self.snap(k + 1, step.v_next, step.d_next),
                Interpolation::Bilinear => (step.v_next, step.d_next),
            };
        }
        Ok(seq)
    }

    fn failure(&self, k: usize) -> Error {
        let empty = self.stages[..self.n]
            .iter()
            .position(|g| g.candidates.is_empty())
            .unwrap_or(k);
        Error::NoFeasibleTrajectory {
            stage: empty,
            reason: format!(
                "every candidate leaves the admissible region (N = {}, d_res = {:.3} m, T = {:.3} s)",
                self.n, self.request.d_res, self.request.t_req
            ),
        }
    }

    /// Continuous-state rollout of a candidate sequence.
    pub fn rollout(&self, seq: &[usize]) -> Result<SpeedProfile> {
        if seq.len() != self.n {
            return Err(Error::Mismatch(format!(
                "sequence has {} entries, horizon is {}",
                seq.len(),
                self.n
            )));
        }
        let dt = self.cfg.dt;
        let mut p = SpeedProfile {
            dt,
            v: vec![self.request.v_i0],
            a: Vec::new(),
            d: vec![0.0],
            nd: seq.to_vec(),
        };
        for (k, &nd) in seq.iter().enumerate() {
            let step = self
                .transition(k, p.v[k], p.d[k], nd)
                .ok_or_else(|| Error::InfeasibleShape(format!("no shape for N_d = {nd}")))?;
            p.a.push(step.a);
            p.v.push(step.v_next);
            p.d.push(step.d_next);
        }
        p.a.push(0.0);
        p.nd.push(0);
        Ok(p)
    }
}

/// Time-consistent speed trajectory with `n + 1` points; the last point
/// carries no deceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub dt: f64,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub d: Vec<f64>,
    pub nd: Vec<usize>,
}

impl SpeedProfile {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    /// Distance covered through the last point; the last step is not driven.
    pub fn distance(&self) -> f64 {
        self.d.last().copied().unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.v.len();
        if n == 0 || self.a.len() != n || self.d.len() != n || self.nd.len() != n {
            return Err(Error::Integrity("profile columns have unequal lengths".into()));
        }
        for k in 0..n - 1 {
            let dd = self.d[k + 1] - self.d[k] - self.v[k] * self.dt;
            let dv = self.v[k + 1] - self.v[k] - self.a[k] * self.dt;
            if dd.abs() > 1e-6 * self.d[k + 1].abs().max(1.0) || dv.abs() > 1e-6 * self.v[k].abs().max(1.0) {
                return Err(Error::Integrity(format!("profile not time-consistent at step {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub energy: f64,
    pub power: Vec<f64>,
    pub rho: Vec<f64>,
    pub forces: Vec<ForceBreakdown>,
}

/// Re-scores a profile: `Σ P_Rgn·Δt` over every point.
pub fn evaluate_profile(profile: &SpeedProfile, params: &VehicleParams, slopes: &SlopeTable) -> Result<Evaluation> {
    profile.check()?;
    let mut ev = Evaluation {
        energy: 0.0,
        power: Vec::with_capacity(profile.len()),
        rho: Vec::with_capacity(profile.len()),
        forces: Vec::with_capacity(profile.len()),
    };
    for k in 0..profile.len() {
        let rho = slopes.slope_at(profile.d[k]);
        let (p, f) = params.regen_power(profile.v[k], profile.a[k], rho)?;
        ev.energy += p * profile.dt;
        ev.power.push(p);
        ev.rho.push(rho);
        ev.forces.push(f);
    }
    Ok(ev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub bounds: StageBounds,
    pub nd_lo: usize,
    pub nd_hi: usize,
    pub candidates: Vec<usize>,
    pub nd_fallback: bool,
    pub infeasible_shapes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub n_steps: usize,
    pub profile: SpeedProfile,
    /// Re-scored energy of `profile` (J, ≤ 0 when recuperating).
    pub total_recup_energy: f64,
    /// Recursion value at the initial state.
    pub bellman_value: f64,
    pub nd_sequence: Vec<usize>,
    pub power: Vec<f64>,
    pub rho: Vec<f64>,
    pub forces: Vec<ForceBreakdown>,
    pub v_1a: f64,
    pub nd_envelope: (usize, usize),
    pub envelope_clamped: bool,
    pub slope_past_end: bool,
    pub stages: Vec<StageDiagnostics>,
}

pub fn plan(
    request: &DecelPlanRequest,
    params: &VehicleParams,
    env: &Envelope,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let mut planner = Planner::new(request, params, env, cfg)?;
    planner.solve();
    match finish(&planner) {
        Err(first @ Error::NoFeasibleTrajectory { .. }) if cfg.interpolation == Interpolation::Bilinear => {
            planner.min_feasible_weight = RELAXED_WEIGHT;
            planner.solve();
            finish(&planner).map_err(|_| first)
        }
        other => other,
    }
}

fn finish(planner: &Planner) -> Result<PlanResult> {
    let bellman = planner.bellman_value().ok_or_else(|| planner.failure(0))?;
    let seq = planner.policy_sequence()?;
    let profile = planner.rollout(&seq)?;
    let ev = evaluate_profile(&profile, &planner.params, &planner.request.slopes)?;
    let mut stages = Vec::with_capacity(planner.n);
    for k in 0..planner.n {
        let g = &planner.stages[k];
        let bounds = if k == 0 {
            let mut b = planner.bounds_at(0, planner.d_ref[1].max(1e-9))?;
            b.beta = 1.0;
            b.beta_clamped = false;
            b.v_lo = planner.request.v_f0;
            b.v_hi = planner.request.v_i0;
            b
        } else {
            planner.bounds_at(k, profile.d[k].max(1e-9))?
        };
        stages.push(StageDiagnostics {
            bounds,
            nd_lo: g.nd_lo,
            nd_hi: g.nd_hi,
            candidates: g.candidates.clone(),
            nd_fallback: g.nd_fallback,
            infeasible_shapes: g.infeasible_shapes,
        });
    }
    Ok(PlanResult {
        n_steps: planner.n,
        total_recup_energy: ev.energy,
        bellman_value: bellman,
        nd_sequence: seq,
        power: ev.power,
        rho: ev.rho,
        forces: ev.forces,
        v_1a: planner.v_1a,
        nd_envelope: planner.nd_env,
        envelope_clamped: planner.envelope_clamped,
        slope_past_end: planner.slope_past_end,
        stages,
        profile,
    })
}

pub const PROFILE_HEADER: &str = "k,t_s,v_mps,a_mps2,d_m,rho_rad,f_rgn_n,f_lmt_n,p_rgn_w,nd_steps";

/// Profile CSV preceded by a `# {json}` metadata line.
pub fn write_profile_csv<W: Write>(mut w: W, result: &PlanResult, meta: &serde_json::Value) -> Result<()> {
    let mut meta = meta.clone();
    crate::export::round_json(&mut meta);
    writeln!(w, "# {}", serde_json::to_string(&meta)?)?;
    writeln!(w, "{PROFILE_HEADER}")?;
    let p = &result.profile;
    for k in 0..p.len() {
        writeln!(
            w,
            "{k},{},{},{},{},{},{},{},{},{}",
            fmt9(k as f64 * p.dt),
            fmt9(p.v[k]),
            fmt9(p.a[k]),
            fmt9(p.d[k]),
            fmt9(result.rho[k]),
            fmt9(result.forces[k].f_rgn),
            fmt9(result.forces[k].f_lmt),
            fmt9(result.power[k]),
            p.nd[k]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::Domain;

    pub(crate) fn test_env(lo: f64, hi: f64) -> Envelope {
        Envelope {
            coeffs_min: [lo, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            coeffs_max: [hi, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            fit_rmse_min: 0.0,
            fit_rmse_max: 0.0,
            domain: Domain {
                v_i: (2.0, 40.0),
                v_f: (0.0, 30.0),
            },
            provenance: "test".into(),
        }
    }

    fn request(slope: f64) -> DecelPlanRequest {
        DecelPlanRequest {
            v_i0: 15.0,
            v_f0: 0.0,
            d_res: 90.0,
            t_req: 12.0,
            slopes: SlopeTable::constant(slope, 200.0),
            spat: None,
        }
    }

    #[test]
    fn horizon() {
        assert_eq!(horizon_steps(10.0, 0.5).unwrap(), 20);
        assert_eq!(horizon_steps(10.4, 1.0).unwrap(), 10);
        assert!(matches!(
            horizon_steps(0.5, 1.0),
            Err(Error::HorizonTooShort { steps: 0 })
        ));
    }

    #[test]
    fn slope_lookup_for_candidates() {
        let t = SlopeTable::constant(0.03, 100.0);
        let (r, m) = slope_candidates(&t, &[1.0, 50.0, 99.0]);
        assert!(r.iter().all(|&x| x == 0.03));
        assert_eq!(m, 0.03);
        let step = SlopeTable {
            samples: vec![(0.0, 0.0), (50.0, 0.0), (50.001, 0.05), (100.0, 0.05)],
        };
        let (r, _) = slope_candidates(&step, &[40.0, 60.0]);
        assert_ne!(r[0], r[1]);
        let sym = SlopeTable {
            samples: vec![(0.0, -0.04), (10.0, 0.04)],
        };
        assert!(slope_candidates(&sym, &[0.0, 10.0]).1.abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_requests() {
        let p = VehicleParams::synthetic();
        let env = test_env(4.0, 16.0);
        let mut r = request(0.0);
        r.v_f0 = r.v_i0;
        assert!(matches!(
            plan(&r, &p, &env, &PlannerConfig::default()),
            Err(Error::InvalidParam(_))
        ));
        let mut r = request(0.0);
        r.t_req = 0.6;
        assert!(matches!(
            plan(&r, &p, &env, &PlannerConfig::default()),
            Err(Error::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn plan_reaches_target() {
        let p = VehicleParams::synthetic();
        let env = test_env(4.0, 16.0);
        let cfg = PlannerConfig::default();
        let res = plan(&request(0.0), &p, &env, &cfg).unwrap();
        let prof = &res.profile;
        assert_eq!(prof.len(), res.n_steps + 1);
        assert_eq!(prof.v[0], 15.0);
        assert!(prof.v[res.n_steps] <= cfg.terminal_speed_tol + 1e-9);
        assert!(prof.distance() <= 90.0 + 1e-9);
        assert!(prof.distance() >= 90.0 - cfg.terminal_distance_tol - 1.0);
        assert!(res.total_recup_energy < 0.0);
        let ev = evaluate_profile(prof, &p, &SlopeTable::constant(0.0, 200.0)).unwrap();
        assert!((ev.energy - res.total_recup_energy).abs() <= 1e-9 * ev.energy.abs());
        assert!(prof.a.iter().all(|&a| a <= 0.0));
    }

    #[test]
    fn downhill_recuperates_more() {
        let p = VehicleParams::synthetic();
        let env = test_env(4.0, 16.0);
        let cfg = PlannerConfig::default();
        let flat = plan(&request(0.0), &p, &env, &cfg).unwrap();
        let down = plan(&request(-0.03), &p, &env, &cfg).unwrap();
        assert!(down.total_recup_energy.abs() >= flat.total_recup_energy.abs());
    }

    #[test]
    fn profile_integrity() {
        let prof = SpeedProfile {
            dt: 1.0,
            v: vec![10.0, 9.0, 9.0],
            a: vec![-1.0, 0.0, 0.0],
            d: vec![0.0, 10.0, 19.0],
            nd: vec![3, 3, 0],
        };
        prof.check().unwrap();
        let mut bad = prof.clone();
        bad.d[2] = 25.0;
        assert!(matches!(bad.check(), Err(Error::Integrity(_))));
        let flat = SlopeTable::constant(0.0, 100.0);
        let p = VehicleParams::synthetic();
        let e1 = evaluate_profile(&prof, &p, &flat).unwrap().energy;
        let doubled = SpeedProfile {
            dt: 1.0,
            v: vec![12.0, 11.0, 11.0],
            a: vec![-1.0, 0.0, 0.0],
            d: vec![0.0, 12.0, 23.0],
            nd: vec![3, 3, 0],
        };
        let e2 = evaluate_profile(&doubled, &p, &flat).unwrap().energy;
        assert!(e2.abs() > e1.abs());
    }

    #[test]
    fn cruise_profile_has_no_regen_on_flat() {
        let prof = SpeedProfile {
            dt: 1.0,
            v: vec![10.0; 3],
            a: vec![0.0; 3],
            d: vec![0.0, 10.0, 20.0],
            nd: vec![0; 3],
        };
        let p = VehicleParams::synthetic();
        let ev = evaluate_profile(&prof, &p, &SlopeTable::constant(0.0, 100.0)).unwrap();
        assert_eq!(ev.energy, 0.0);
    }

    #[test]
    fn csv_export_shape() {
        let p = VehicleParams::synthetic();
        let env = test_env(4.0, 16.0);
        let res = plan(&request(0.0), &p, &env, &PlannerConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_profile_csv(&mut buf, &res, &serde_json::json!({"v_i0": 15.0})).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# {"));
        assert_eq!(lines[1], PROFILE_HEADER);
        assert_eq!(lines.len(), res.n_steps + 3);
    }
}
