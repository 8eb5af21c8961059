//! Traffic-light event decisions: candidate target speeds from the envelope
//! distance surfaces, arrival-phase classification and the mapping from
//! transition condition to target speed and planning time.

use serde::{Deserialize, Serialize};

use crate::envelope::{Envelope, MIN_SPEED_GAP};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 0.5;
pub const DEFAULT_MAX_N: usize = 5;
pub const VF_GRID_STEP: f64 = 0.25;
/// Points sampled across each `[S_d,min, S_d,max]` band.
pub const BAND_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Red,
    Green,
    Yellow,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Red => 0,
            Phase::Green => 1,
            Phase::Yellow => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Red => "red",
            Phase::Green => "green",
            Phase::Yellow => "yellow",
        }
    }

    fn next(self) -> Phase {
        match self {
            Phase::Red => Phase::Green,
            Phase::Green => Phase::Yellow,
            Phase::Yellow => Phase::Red,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatState {
    pub phase: Phase,
    /// Remaining duration of the current phase.
    pub t_cur: f64,
    pub t_red: f64,
    pub t_yellow: f64,
    pub t_green: f64,
    /// Absolute start time of the current phase.
    pub cycle_anchor: f64,
}

impl SpatState {
    pub fn validate(&self) -> Result<()> {
        let dur = self.duration(self.phase);
        let ok = [self.t_red, self.t_yellow, self.t_green]
            .iter()
            .all(|&d| d.is_finite() && d > 0.0)
            && self.t_cur.is_finite()
            && self.t_cur >= 0.0
            && self.t_cur <= dur + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("inconsistent SPaT state {self:?}")))
        }
    }

    pub fn duration(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Red => self.t_red,
            Phase::Green => self.t_green,
            Phase::Yellow => self.t_yellow,
        }
    }

    /// Phase shown `tau` seconds from now.
    pub fn phase_after(&self, tau: f64) -> Phase {
        let cycle = self.t_red + self.t_green + self.t_yellow;
        let mut phase = self.phase;
        let mut left = self.t_cur;
        let mut tau = tau.max(0.0);
        if tau >= left {
            tau = (tau - left) % cycle;
            phase = phase.next();
            left = self.duration(phase);
            while tau >= left {
                tau -= left;
                phase = phase.next();
                left = self.duration(phase);
            }
        }
        phase
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub v_f: Vec<f64>,
    pub s_d: Vec<f64>,
    /// Deceleration durations in seconds.
    pub nd: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDecision {
    pub c_trans: u8,
    pub phase: Phase,
    pub v_f: f64,
    pub planning_time: f64,
    pub v_f_cand: Vec<f64>,
    pub nd_cand: Vec<f64>,
    pub s_d_cand: Vec<f64>,
    pub conditions: Vec<u8>,
}

impl EventDecision {
    pub fn needs_plan(&self) -> bool {
        self.c_trans != 4
    }
}

/// Target speeds whose distance band best matches `d_res`.
pub fn target_candidates(env: &Envelope, v_i: f64, d_res: f64, tol: f64, max_n: usize) -> Result<Candidates> {
    if !(d_res > 0.0) || !(v_i > 0.0) {
        return Err(Error::InvalidParam(format!(
            "need v_i > 0 and d_res > 0, got {v_i}, {d_res}"
        )));
    }
    let (vi_lo, vi_hi) = env.domain.v_i;
    if v_i < vi_lo - 1e-9 || v_i > vi_hi + 1e-9 {
        return Err(Error::Domain(format!("v_i {v_i} outside [{vi_lo}, {vi_hi}]")));
    }
    let vf_top = env.domain.v_f.1.min(v_i - MIN_SPEED_GAP);
    let mut rows = Vec::new();
    let mut j = 0usize;
    loop {
        let v_f = env.domain.v_f.0 + VF_GRID_STEP * j as f64;
        if v_f > vf_top + 1e-9 {
            break;
        }
        let (lo, hi, _) = env.nd_seconds(v_i, v_f);
        let m = 0.5 * (v_i + v_f);
        for i in 0..BAND_SAMPLES {
            let nd = lo + (hi - lo) * i as f64 / (BAND_SAMPLES - 1) as f64;
            let s_d = m * nd;
            rows.push((v_f, s_d, nd, (d_res - s_d).abs()));
        }
        j += 1;
    }
    let best = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    if rows.is_empty() || best > tol {
        return Err(Error::InfeasibleRequest(format!(
            "no target speed reaches {d_res:.3} m from {v_i:.3} m/s (best residual {best:.3} m)"
        )));
    }
    let mut keep: Vec<_> = rows.into_iter().filter(|r| r.3 <= best + tol).collect();
    keep.sort_by(|a, b| a.3.total_cmp(&b.3).then(a.0.total_cmp(&b.0)).then(a.2.total_cmp(&b.2)));
    keep.truncate(max_n.max(1));
    keep.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.total_cmp(&b.2)));
    Ok(Candidates {
        v_f: keep.iter().map(|r| r.0).collect(),
        s_d: keep.iter().map(|r| r.1).collect(),
        nd: keep.iter().map(|r| r.2).collect(),
        residual: keep.iter().map(|r| r.3).collect(),
    })
}

fn condition(spat: &SpatState, tau: f64) -> u8 {
    let arrival = spat.phase_after(tau);
    match (spat.phase, arrival) {
        (Phase::Red | Phase::Yellow, Phase::Green) => 1,
        (Phase::Red | Phase::Yellow, _) => 2,
        (Phase::Green, Phase::Green) if tau < spat.t_cur => 4,
        (Phase::Green, _) => 3,
    }
}

/// One transition condition per candidate duration.
pub fn classify_transition(spat: &SpatState, nd_cand: &[f64]) -> Vec<u8> {
    nd_cand.iter().map(|&tau| condition(spat, tau)).collect()
}

/// Median of the condition candidates, ties rounded half to even.
pub fn median_condition(conds: &[u8]) -> Option<u8> {
    if conds.is_empty() {
        return None;
    }
    let mut c = conds.to_vec();
    c.sort_unstable();
    let n = c.len();
    let m = if n % 2 == 1 {
        c[n / 2] as f64
    } else {
        0.5 * (c[n / 2 - 1] as f64 + c[n / 2] as f64)
    };
    Some(m.round_ties_even() as u8)
}

/// Target speed rule and planning time for a condition in a given phase.
pub fn table_row(c_trans: u8, spat: &SpatState) -> Result<(TargetRule, f64)> {
    let SpatState {
        t_cur, t_red, t_yellow, ..
    } = *spat;
    let row = match (c_trans, spat.phase) {
        (1, Phase::Red) => (TargetRule::Max, t_cur),
        (2, Phase::Red) => (TargetRule::Min, t_cur),
        (1, Phase::Yellow) => (TargetRule::Max, t_cur + t_red),
        (2, Phase::Yellow) => (TargetRule::Min, t_cur + t_red),
        (3, Phase::Green) => (TargetRule::Min, t_cur + t_yellow + t_red),
        (4, Phase::Green) => (TargetRule::Current, t_cur + t_yellow),
        (c, p) => {
            return Err(Error::Classification {
                c_trans: c,
                phase: p.name().to_string(),
            })
        }
    };
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    Max,
    Min,
    Current,
}

pub fn decide(spat: &SpatState, cand: &Candidates, v_i: f64) -> Result<EventDecision> {
    spat.validate()?;
    if cand.nd.is_empty() || cand.nd.len() != cand.v_f.len() || cand.s_d.len() != cand.v_f.len() {
        return Err(Error::Mismatch("candidate sets empty or of unequal length".into()));
    }
    let conditions = classify_transition(spat, &cand.nd);
    let c_trans = median_condition(&conditions).unwrap();
    let (rule, planning_time) = table_row(c_trans, spat)?;
    let v_f = match rule {
        TargetRule::Max => cand.v_f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        TargetRule::Min => cand.v_f.iter().copied().fold(f64::INFINITY, f64::min),
        TargetRule::Current => v_i,
    };
    Ok(EventDecision {
        c_trans,
        phase: spat.phase,
        v_f,
        planning_time,
        v_f_cand: cand.v_f.clone(),
        nd_cand: cand.nd.clone(),
        s_d_cand: cand.s_d.clone(),
        conditions,
    })
}
