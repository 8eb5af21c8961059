//! Closed-loop route simulation: cruise, hand each light to the event logic
//! once it comes into preview range, follow the planned profile, then
//! accelerate back to cruise.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::events::{self, EventDecision, Phase, SpatState};
use crate::export::fmt9;
use crate::planner::{self, DecelPlanRequest, PlanResult, PlannerConfig};
use crate::powertrain::VehicleParams;
use crate::route::{Route, SignalLight};

pub const STOP_TOLERANCE: f64 = 0.1;
/// Average-speed band, as a fraction of the speed drop above `v_f`, that the
/// simulator asks the planner for.
const RATIO_BAND: (f64, f64) = (0.42, 0.6);
const OPTIONS_PER_TARGET: usize = 4;
const BRAKE_MARGIN: f64 = 0.2;
/// Deceleration at which the approach guard starts braking for a red light.
const GUARD_DECEL: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub cruise_speed: f64,
    pub preview_distance: f64,
    pub accel_rate: f64,
    pub dt: f64,
    pub candidate_tol: f64,
    pub candidate_max_n: usize,
    pub planner: PlannerConfig,
    pub vehicle: VehicleParams,
    pub envelope: Envelope,
}

impl SimConfig {
    pub fn new(vehicle: VehicleParams, envelope: Envelope) -> Self {
        SimConfig {
            cruise_speed: 60.0 / 3.6,
            preview_distance: 150.0,
            accel_rate: 1.5,
            dt: 0.5,
            candidate_tol: events::DEFAULT_TOL,
            candidate_max_n: events::DEFAULT_MAX_N,
            planner: PlannerConfig::default(),
            vehicle,
            envelope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cruise_speed > 0.0) || !(self.preview_distance > 0.0) || !(self.accel_rate > 0.0) || !(self.dt > 0.0)
        {
            return Err(Error::InvalidParam(
                "cruise_speed, preview_distance, accel_rate and dt must be positive".into(),
            ));
        }
        if (self.dt - self.planner.dt).abs() > 1e-12 {
            return Err(Error::InvalidParam("simulation and planner time steps differ".into()));
        }
        self.planner.validate()?;
        self.vehicle.validate()
    }
}

/// Where decisions and plans come from: in-process or over the wire.
pub trait PlanService {
    fn decide(&mut self, spat: &SpatState, v_i: f64, d_res: f64) -> Result<EventDecision>;
    fn plan(&mut self, request: &DecelPlanRequest) -> Result<PlanResult>;
}

pub struct LocalService<'a> {
    pub params: &'a VehicleParams,
    pub envelope: &'a Envelope,
    pub cfg: &'a PlannerConfig,
    pub tol: f64,
    pub max_n: usize,
}

impl<'a> LocalService<'a> {
    pub fn from_config(cfg: &'a SimConfig) -> Self {
        LocalService {
            params: &cfg.vehicle,
            envelope: &cfg.envelope,
            cfg: &cfg.planner,
            tol: cfg.candidate_tol,
            max_n: cfg.candidate_max_n,
        }
    }
}

/// Event decision with the query speed clamped into the envelope domain.
pub fn decide_event(
    env: &Envelope,
    spat: &SpatState,
    v_i: f64,
    d_res: f64,
    tol: f64,
    max_n: usize,
) -> Result<EventDecision> {
    let v_q = v_i.clamp(env.domain.v_i.0, env.domain.v_i.1);
    let cand = events::target_candidates(env, v_q, d_res, tol, max_n)?;
    let mut d = events::decide(spat, &cand, v_i)?;
    if d.c_trans == 4 {
        d.v_f = v_i;
    }
    Ok(d)
}

impl PlanService for LocalService<'_> {
    fn decide(&mut self, spat: &SpatState, v_i: f64, d_res: f64) -> Result<EventDecision> {
        decide_event(self.envelope, spat, v_i, d_res, self.tol, self.max_n)
    }

    fn plan(&mut self, request: &DecelPlanRequest) -> Result<PlanResult> {
        planner::plan(request, self.params, self.envelope, self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub light: usize,
    pub position_m: f64,
    pub trigger_time: f64,
    pub trigger_gap: f64,
    pub v_i: f64,
    /// `None` when no target speed matched the remaining distance.
    pub decision: Option<EventDecision>,
    pub c_trans: u8,
    pub request: Option<DecelPlanRequest>,
    pub plan: Option<PlanResult>,
    pub energy: f64,
    pub fallback: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub d: f64,
    pub v: f64,
    pub a: f64,
    pub p_rgn: f64,
    pub light_state: Option<Phase>,
    pub event_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub preview_distance: f64,
    pub trip_time: f64,
    pub total_recup_energy: f64,
    pub events: Vec<EventRecord>,
    pub trace: Vec<TraceRow>,
    pub transition_counts: BTreeMap<u8, usize>,
    pub avg_decel: f64,
    pub max_decel: f64,
    pub fallbacks: usize,
    pub red_violations: usize,
    /// Steps where the approach guard braked for a red light.
    pub guard_steps: usize,
}

enum Mode {
    Drive,
    Follow { event: usize, k: usize, start: f64 },
    Brake { event: usize, a: f64 },
}

fn next_green_start(spat: &SpatState, after: f64) -> f64 {
    // phase boundaries from now, through two cycles
    let mut t = spat.t_cur;
    let mut phase = spat.phase;
    for _ in 0..6 {
        phase = match phase {
            Phase::Red => Phase::Green,
            Phase::Green => Phase::Yellow,
            Phase::Yellow => Phase::Red,
        };
        if phase == Phase::Green && t >= after {
            return t;
        }
        t += spat.duration(phase);
    }
    t
}

/// Request candidates in priority order: each envelope target arriving no
/// earlier than the decided time, then stops at the line.
fn request_options(
    light: &SignalLight,
    t_now: f64,
    v: f64,
    gap: f64,
    dec: &EventDecision,
    dt: f64,
) -> Vec<(f64, f64, bool)> {
    let spat = light.spat_at(t_now);
    let times = |v_f: f64| -> Vec<f64> {
        let dv = v - v_f;
        let lo = (gap / (v_f + RATIO_BAND.1 * dv) / dt).ceil() as i64;
        let hi = (gap / (v_f + RATIO_BAND.0 * dv) / dt).floor() as i64;
        (lo.max(2)..=hi).map(|i| i as f64 * dt).collect()
    };
    let mut out = Vec::new();
    let mut targets = vec![dec.v_f];
    targets.extend(dec.v_f_cand.iter().copied());
    let mut seen = Vec::new();
    for v_f in targets {
        if !(v_f > 0.0 && v_f < v - 1e-9) || seen.contains(&v_f) {
            continue;
        }
        seen.push(v_f);
        let earliest = dec.planning_time;
        let green = next_green_start(&spat, earliest);
        let ok = |t: f64| t >= earliest && (light.phase_at(t_now + t) == Phase::Green || t >= green);
        out.extend(
            times(v_f)
                .into_iter()
                .filter(|&t| ok(t))
                .take(OPTIONS_PER_TARGET)
                .map(|t| (v_f, t, true)),
        );
    }
    let mut stops = times(0.0);
    let mid = 0.5 * (RATIO_BAND.0 + RATIO_BAND.1);
    let ratio = |t: f64| gap / t / v;
    stops.sort_by(|a, b| (ratio(*a) - mid).abs().total_cmp(&(ratio(*b) - mid).abs()));
    out.extend(stops.into_iter().take(OPTIONS_PER_TARGET).map(|t| (0.0, t, false)));
    out
}

/// Constant deceleration that stops within `gap` under the simulator's
/// position update, which advances with the speed at the start of a step.
fn stopping_decel(v: f64, gap: f64, dt: f64) -> f64 {
    let room = gap - v * dt - BRAKE_MARGIN;
    if room <= 1e-9 {
        return -v / dt;
    }
    -(v * v) / (2.0 * room)
}

fn crossing_is_green(light: &SignalLight, t_end: f64, v_end: f64, short: f64, dt: f64) -> bool {
    let t_cross = t_end + dt + if v_end > STOP_TOLERANCE { short / v_end } else { 0.0 };
    light.phase_at(t_end) == Phase::Green && light.phase_at(t_cross) == Phase::Green
}

pub fn run(route: &Route, cfg: &SimConfig) -> Result<SimResult> {
    let mut service = LocalService::from_config(cfg);
    run_with(route, cfg, &mut service)
}

pub fn run_with(route: &Route, cfg: &SimConfig, service: &mut dyn PlanService) -> Result<SimResult> {
    cfg.validate()?;
    let dt = cfg.dt;
    let lights = &route.lights;
    if lights.windows(2).any(|w| w[1].position_m <= w[0].position_m) {
        return Err(Error::InvalidParam("lights must be sorted by position".into()));
    }
    let mut t = 0.0;
    let mut pos = 0.0;
    let mut v = cfg.cruise_speed;
    let mut next_light = 0usize;
    let mut events: Vec<EventRecord> = Vec::new();
    let mut trace = Vec::new();
    let mut mode = Mode::Drive;
    let mut violations = 0usize;
    let mut guards = 0usize;
    let max_steps = (route.total_length / (0.1 * cfg.cruise_speed) / dt) as usize + 100_000;

    for _ in 0..max_steps {
        if pos >= route.total_length {
            break;
        }
        while next_light < lights.len() && lights[next_light].position_m < pos {
            next_light += 1;
        }
        if let (Mode::Drive, Some(light)) = (&mode, lights.get(next_light)) {
            let gap = light.position_m - pos;
            let handled = events.last().is_some_and(|e| e.light == next_light);
            if !handled && gap <= cfg.preview_distance && gap > 0.0 {
                let (rec, new_mode) = handle_event(route, cfg, service, next_light, t, pos, v, events.len())?;
                events.push(rec);
                mode = new_mode;
            }
        }

        let light = lights.get(next_light);
        let gap = light.map(|l| l.position_m - pos);
        let light_state = light.map(|l| l.phase_at(t));
        let (a, p, v_next, d_next, event_id, done) = match &mode {
            Mode::Follow { event, k, start } => {
                let plan = events[*event].plan.as_ref().unwrap();
                let prof = &plan.profile;
                let k = *k;
                if k + 1 < prof.len() {
                    (
                        prof.a[k],
                        plan.power[k],
                        prof.v[k + 1],
                        start + prof.d[k + 1],
                        Some(*event),
                        false,
                    )
                } else {
                    // the last point holds speed, or brakes to rest when the plan was a stop
                    let stop = events[*event].request.as_ref().is_some_and(|r| r.v_f0 == 0.0);
                    let a = if stop { -prof.v[k] / dt } else { 0.0 };
                    let p = if stop {
                        cfg.vehicle.regen_power(v, a, route.slope_at(pos))?.0
                    } else {
                        plan.power[k]
                    };
                    (
                        a,
                        p,
                        (prof.v[k] + a * dt).max(0.0),
                        start + prof.d[k] + prof.v[k] * dt,
                        Some(*event),
                        true,
                    )
                }
            }
            Mode::Brake { event, a } => {
                let gap = gap.unwrap_or(f64::INFINITY).max(0.0);
                let a = a.min(stopping_decel(v, gap, dt)).max(-v / dt);
                let rho = route.slope_at(pos);
                let (p, _) = cfg.vehicle.regen_power(v, a, rho)?;
                let v_next = (v + a * dt).max(0.0);
                let done = v_next <= 0.0;
                (a, p, v_next, pos + v * dt, Some(*event), done)
            }
            Mode::Drive => {
                let hold = v <= STOP_TOLERANCE
                    && light.is_some_and(|l| l.phase_at(t) != Phase::Green)
                    && gap.is_some_and(|g| g <= cfg.preview_distance);
                let guard = match (light, gap) {
                    (Some(l), Some(g)) if v > STOP_TOLERANCE && g > 0.0 => {
                        l.phase_at(t + g / v) == Phase::Red && g <= v * v / (2.0 * GUARD_DECEL) + 1.5 * v * dt
                    }
                    _ => false,
                };
                if hold {
                    (0.0, 0.0, 0.0, pos, None, false)
                } else if guard {
                    let g = gap.unwrap();
                    let a = stopping_decel(v, g, dt).max(-v / dt);
                    let (p, _) = cfg.vehicle.regen_power(v, a, route.slope_at(pos))?;
                    guards += 1;
                    let owner = events.iter().rposition(|e| e.light == next_light);
                    let p = if owner.is_some() { p } else { 0.0 };
                    (a, p, (v + a * dt).max(0.0), pos + v * dt, owner, false)
                } else {
                    let a = if v < cfg.cruise_speed {
                        ((cfg.cruise_speed - v) / dt).min(cfg.accel_rate)
                    } else {
                        0.0
                    };
                    (a, 0.0, (v + a * dt).min(cfg.cruise_speed), pos + v * dt, None, false)
                }
            }
        };
        if let Some(l) = light {
            if pos < l.position_m && d_next >= l.position_m && v > STOP_TOLERANCE {
                let frac = (l.position_m - pos) / (d_next - pos);
                if l.phase_at(t + frac * dt) == Phase::Red {
                    violations += 1;
                }
            }
        }
        trace.push(TraceRow {
            t,
            d: pos,
            v,
            a,
            p_rgn: p,
            light_state,
            event_id,
        });
        if let Some(e) = event_id {
            events[e].energy += p * dt;
        }
        t += dt;
        pos = d_next;
        v = v_next;
        mode = match mode {
            Mode::Follow { event, k, start } if !done => Mode::Follow { event, k: k + 1, start },
            Mode::Brake { event, a } if !done => Mode::Brake { event, a },
            Mode::Drive => Mode::Drive,
            _ => Mode::Drive,
        };
    }
    if pos < route.total_length {
        return Err(Error::Integrity("simulation did not reach the end of the route".into()));
    }
    Ok(summarize(cfg.preview_distance, t, events, trace, violations, guards))
}

#[allow(clippy::too_many_arguments)]
fn handle_event(
    route: &Route,
    cfg: &SimConfig,
    service: &mut dyn PlanService,
    light_idx: usize,
    t: f64,
    pos: f64,
    v: f64,
    event_id: usize,
) -> Result<(EventRecord, Mode)> {
    let light = &route.lights[light_idx];
    let gap = light.position_m - pos;
    let mut rec = EventRecord {
        light: light_idx,
        position_m: light.position_m,
        trigger_time: t,
        trigger_gap: gap,
        v_i: v,
        decision: None,
        c_trans: 0,
        request: None,
        plan: None,
        energy: 0.0,
        fallback: false,
        note: String::new(),
    };
    let spat = light.spat_at(t);
    let dec = match service.decide(&spat, v, gap) {
        Ok(d) => d,
        Err(Error::InfeasibleRequest(msg)) => {
            // nothing in the envelope matches; classify by cruising arrival
            let tau = gap / v.max(STOP_TOLERANCE);
            let conds = events::classify_transition(&spat, &[tau]);
            let c = conds[0];
            let (_, planning_time) = events::table_row(c, &spat)?;
            rec.note = msg;
            EventDecision {
                c_trans: c,
                phase: spat.phase,
                v_f: if c == 4 { v } else { 0.0 },
                planning_time,
                v_f_cand: Vec::new(),
                nd_cand: Vec::new(),
                s_d_cand: Vec::new(),
                conditions: conds,
            }
        }
        Err(e) => return Err(e),
    };
    rec.c_trans = dec.c_trans;
    let cruise_arrival = t + gap / v.max(STOP_TOLERANCE);
    let cruise_ok = v > STOP_TOLERANCE && light.phase_at(cruise_arrival) == Phase::Green;
    rec.decision = Some(dec.clone());
    if !dec.needs_plan() && cruise_ok {
        return Ok((rec, Mode::Drive));
    }
    let slopes = route.slope_table(pos, gap + 2.0 * cfg.preview_distance);
    let mut attempts: Vec<String> = Vec::new();
    for (v_f, t_req, check) in request_options(light, t, v, gap, &dec, cfg.dt) {
        let request = DecelPlanRequest {
            v_i0: v,
            v_f0: v_f,
            d_res: gap,
            t_req,
            slopes: slopes.clone(),
            spat: Some(spat),
        };
        match service.plan(&request) {
            Ok(plan) => {
                let prof = &plan.profile;
                let t_end = t + prof.duration();
                let short = gap - prof.distance();
                if check && !crossing_is_green(light, t_end, prof.v[prof.len() - 1], short, cfg.dt) {
                    attempts.push(format!("v_f {v_f} T {t_req}: planned arrival misses the green phase"));
                    continue;
                }
                rec.request = Some(request);
                rec.plan = Some(plan);
                if !attempts.is_empty() {
                    rec.note = attempts.join("; ");
                }
                return Ok((
                    rec,
                    Mode::Follow {
                        event: event_id,
                        k: 0,
                        start: pos,
                    },
                ));
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => attempts.push(format!("v_f {v_f} T {t_req}: {e}")),
        }
    }
    if cruise_ok && !dec.needs_plan() {
        return Ok((rec, Mode::Drive));
    }
    rec.fallback = true;
    rec.note = attempts.join("; ");
    log::warn!("light {light_idx}: planner fallback ({})", rec.note);
    let a = stopping_decel(v, gap, cfg.dt);
    Ok((rec, Mode::Brake { event: event_id, a }))
}

fn summarize(
    preview: f64,
    t: f64,
    events: Vec<EventRecord>,
    trace: Vec<TraceRow>,
    violations: usize,
    guards: usize,
) -> SimResult {
    let mut counts: BTreeMap<u8, usize> = (1..=4).map(|c| (c, 0)).collect();
    for e in &events {
        *counts.entry(e.c_trans).or_insert(0) += 1;
    }
    let decels: Vec<f64> = trace
        .iter()
        .filter(|r| r.event_id.is_some() && r.a < 0.0)
        .map(|r| r.a)
        .collect();
    let avg = if decels.is_empty() {
        0.0
    } else {
        decels.iter().sum::<f64>() / decels.len() as f64
    };
    let max = decels.iter().copied().fold(0.0, f64::min);
    SimResult {
        preview_distance: preview,
        trip_time: t,
        total_recup_energy: events.iter().map(|e| e.energy).sum(),
        fallbacks: events.iter().filter(|e| e.fallback).count(),
        events,
        trace,
        transition_counts: counts,
        avg_decel: avg,
        max_decel: max,
        red_violations: violations,
        guard_steps: guards,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preview_distance: f64,
    pub trip_time: f64,
    pub total_recup_energy: f64,
    pub avg_decel: f64,
    pub max_decel: f64,
    pub transition_counts: BTreeMap<u8, usize>,
    pub fallbacks: usize,
    pub red_violations: usize,
    pub guard_steps: usize,
}

impl From<&SimResult> for SweepRow {
    fn from(r: &SimResult) -> Self {
        SweepRow {
            preview_distance: r.preview_distance,
            trip_time: r.trip_time,
            total_recup_energy: r.total_recup_energy,
            avg_decel: r.avg_decel,
            max_decel: r.max_decel,
            transition_counts: r.transition_counts.clone(),
            fallbacks: r.fallbacks,
            red_violations: r.red_violations,
            guard_steps: r.guard_steps,
        }
    }
}

/// Independent runs per preview distance, executed in parallel.
pub fn sweep(route: &Route, cfg: &SimConfig, previews: &[f64]) -> Result<(Vec<SimResult>, Vec<SweepRow>)> {
    if previews.is_empty() {
        return Err(Error::InvalidParam("empty preview distance list".into()));
    }
    let results: Vec<Result<SimResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = previews
            .iter()
            .map(|&pd| {
                s.spawn(move || {
                    let mut c = cfg.clone();
                    c.preview_distance = pd;
                    run(route, &c)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = results.iter().map(SweepRow::from).collect();
    Ok((results, rows))
}

pub const TRACE_HEADER: &str = "t_s,d_m,v_mps,a_mps2,p_rgn_w,light_state,event_id";

pub fn write_trace_csv<W: Write>(mut w: W, result: &SimResult) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in &result.trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt9(r.t),
            fmt9(r.d),
            fmt9(r.v),
            fmt9(r.a),
            fmt9(r.p_rgn),
            r.light_state.map_or(-1, |p| p.code() as i32),
            r.event_id.map_or(-1, |e| e as i64)
        )?;
    }
    Ok(())
}

pub const SWEEP_HEADER: &str =
    "preview_m,trip_time_s,recup_energy_j,avg_decel_mps2,max_decel_mps2,cond1,cond2,cond3,cond4,fallbacks,red_violations";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let c = |k: u8| r.transition_counts.get(&k).copied().unwrap_or(0);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt9(r.preview_distance),
            fmt9(r.trip_time),
            fmt9(r.total_recup_energy),
            fmt9(r.avg_decel),
            fmt9(r.max_decel),
            c(1),
            c(2),
            c(3),
            c(4),
            r.fallbacks,
            r.red_violations
        )?;
    }
    Ok(())
}
