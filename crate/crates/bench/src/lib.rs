//! Shared fixtures for the benchmarks.

use edps::envelope::{self, Envelope};
use edps::planner::DecelPlanRequest;
use edps::route::SlopeTable;
use edps::VehicleParams;

/// Envelope fitted to the synthetic braking corpus (seed 7).
pub fn synthetic_envelope() -> Envelope {
    let recs = envelope::synth_braking_data(7, &VehicleParams::synthetic());
    let ex = envelope::extract_observations(&recs, 2.0);
    envelope::fit_envelope(&ex.observations, 0.05).expect("synthetic corpus fits")
}

/// Stop from 60 km/h over 150 m in 20 s on a slight climb.
pub fn stop_request() -> DecelPlanRequest {
    DecelPlanRequest {
        v_i0: 60.0 / 3.6,
        v_f0: 0.0,
        d_res: 150.0,
        t_req: 20.0,
        slopes: SlopeTable::constant(0.01, 150.0),
        spat: None,
    }
}
