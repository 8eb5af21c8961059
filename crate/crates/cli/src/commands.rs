use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use edps::envelope::{self, BASIS_NAMES};
use edps::export::{fmt9, to_json_string};
use edps::planner::{self, DecelPlanRequest};
use edps::route::{self, SlopeTable};
use edps::simroute::{self, SimResult, SweepRow};
use edps::v2i::{self, RemoteError, ServiceContext};
use edps::{Error, Result, VehicleParams};
use serde_json::json;

use crate::scenario::{fit_corpus, FitSettings, Scenario, ScenarioConfig};
use crate::{Command, ScenarioArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            seed,
            route_seed,
            out_dir,
        } => synth_data(seed, route_seed, &out_dir),
        Command::Fit {
            corpus,
            out,
            quantile,
            grid_step,
            report,
        } => fit(&corpus, &out, &FitSettings { grid_step, quantile }, report),
        Command::Plan {
            scenario,
            v_i0,
            v_f0,
            d_res,
            t_req,
            slope,
            from,
        } => plan(&load(&scenario)?, v_i0, v_f0, d_res, t_req, slope, from),
        Command::Simulate {
            scenario,
            preview,
            remote,
            timeout_ms,
        } => simulate(
            &load(&scenario)?,
            preview,
            remote.as_deref(),
            Duration::from_millis(timeout_ms),
        ),
        Command::Sweep { scenario, distances } => sweep(&load(&scenario)?, &distances),
        Command::Serve { scenario, endpoint } => serve(&load(&scenario)?, &endpoint),
    }
}

fn load(args: &ScenarioArgs) -> Result<Scenario> {
    let mut cfg = match &args.scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(d) = &args.out_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.resolve()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::InvalidParam(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidParam(format!("cannot create {}: {e}", path.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_with(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn remove_stale(dir: &Path, names: &[&str]) {
    for n in names {
        let _ = fs::remove_file(dir.join(n));
    }
}

fn synth_data(seed: u64, route_seed: u64, out: &Path) -> Result<()> {
    let vehicle = VehicleParams::synthetic();
    let records = envelope::synth_braking_data(seed, &vehicle);
    let route = edps::Route::synthetic(route_seed);
    write_with(&out.join("corpus.csv"), |w| envelope::write_corpus_csv(w, &records))?;
    write_text(&out.join("vehicle.json"), &to_json_string(&vehicle)?)?;
    write_with(&out.join("route.csv"), |w| route::write_route_csv(w, &route))?;
    write_text(&out.join("lights.json"), &to_json_string(&route.lights)?)?;
    let scenario = json!({
        "vehicle": "vehicle.json",
        "route": "route.csv",
        "lights": "lights.json",
        "fit_from": "corpus.csv",
        "output_dir": "out",
        "seed": seed,
        "route_seed": route_seed,
    });
    write_text(&out.join("scenario.json"), &to_json_string(&scenario)?)?;
    let sets = records
        .iter()
        .map(|r| r.set_id)
        .collect::<std::collections::BTreeSet<_>>();
    println!(
        "{} records in {} sets written to {}",
        records.len(),
        sets.len(),
        out.display()
    );
    Ok(())
}

fn fit(corpus: &Path, out: &Path, settings: &FitSettings, report: Option<PathBuf>) -> Result<()> {
    if !corpus.is_file() {
        return Err(Error::InvalidParam(format!(
            "corpus file {} does not exist",
            corpus.display()
        )));
    }
    let (env, ex) = fit_corpus(corpus, settings)?;
    let report_doc = json!({
        "corpus": corpus.display().to_string(),
        "quantile": settings.quantile,
        "grid_step": settings.grid_step,
        "observations": ex.observations.len(),
        "non_monotone_skipped": ex.non_monotone,
        "basis": BASIS_NAMES,
        "coeffs_min": env.coeffs_min,
        "coeffs_max": env.coeffs_max,
        "fit_rmse_min": env.fit_rmse_min,
        "fit_rmse_max": env.fit_rmse_max,
        "domain": env.domain,
    });
    let report_text = to_json_string(&report_doc)?;
    write_text(out, &to_json_string(&env)?)?;
    let report = report.unwrap_or_else(|| out.with_file_name("fit_report.json"));
    write_text(&report, &report_text)?;
    print!("{report_text}");
    Ok(())
}

fn plan(s: &Scenario, v_i0: f64, v_f0: f64, d_res: f64, t_req: f64, slope: Option<f64>, from: f64) -> Result<()> {
    let slopes = match slope {
        Some(r) => SlopeTable::constant(r, d_res),
        None => s.route.slope_table(from, d_res),
    };
    let request = DecelPlanRequest {
        v_i0,
        v_f0,
        d_res,
        t_req,
        slopes,
        spat: None,
    };
    let inputs = json!({ "v_i0": v_i0, "v_f0": v_f0, "d_res": d_res, "t_req": t_req });
    let result = match planner::plan(&request, &s.vehicle, &s.envelope, &s.config.planner) {
        Ok(r) => r,
        Err(e) => {
            let report = json!({
                "status": "error",
                "exit_code": e.exit_code(),
                "message": e.to_string(),
                "error": RemoteError::from_error(&e),
                "inputs": inputs,
            });
            let text = to_json_string(&report)?;
            if e.exit_code() == 3 {
                remove_stale(&s.output_dir, &["profile.csv", "plan_summary.json"]);
                write_text(&s.output_dir.join("infeasible.json"), &text)?;
                print!("{text}");
            }
            return Err(e);
        }
    };
    remove_stale(&s.output_dir, &["infeasible.json"]);
    let eval = planner::evaluate_profile(&result.profile, &s.vehicle, &request.slopes)?;
    let p = &result.profile;
    let summary = json!({
        "status": "ok",
        "inputs": inputs,
        "n_steps": result.n_steps,
        "duration_s": p.duration(),
        "final_speed": p.v.last(),
        "distance": p.distance(),
        "total_recup_energy": result.total_recup_energy,
        "evaluated_energy": eval.energy,
        "bellman_value": result.bellman_value,
        "v_1a": result.v_1a,
        "nd_envelope": result.nd_envelope,
        "nd_sequence": result.nd_sequence,
        "envelope_clamped": result.envelope_clamped,
        "slope_past_end": result.slope_past_end,
    });
    write_with(&s.output_dir.join("profile.csv"), |w| {
        planner::write_profile_csv(w, &result, &inputs)
    })?;
    let text = to_json_string(&summary)?;
    write_text(&s.output_dir.join("plan_summary.json"), &text)?;
    print!("{text}");
    Ok(())
}

const EVENTS_HEADER: &str =
    "light,position_m,trigger_time_s,trigger_gap_m,v_i,c_trans,v_f,planning_time_s,t_req_s,energy_j,fallback,note";

fn write_events_csv<W: Write>(mut w: W, r: &SimResult) -> Result<()> {
    writeln!(w, "{EVENTS_HEADER}")?;
    let opt = |x: Option<f64>| x.map_or(String::new(), fmt9);
    for e in &r.events {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},\"{}\"",
            e.light,
            fmt9(e.position_m),
            fmt9(e.trigger_time),
            fmt9(e.trigger_gap),
            fmt9(e.v_i),
            e.c_trans,
            opt(e
                .request
                .as_ref()
                .map(|q| q.v_f0)
                .or(e.decision.as_ref().map(|d| d.v_f))),
            opt(e.decision.as_ref().map(|d| d.planning_time)),
            opt(e.request.as_ref().map(|q| q.t_req)),
            fmt9(e.energy),
            e.fallback,
            e.note.replace('"', "'")
        )?;
    }
    Ok(())
}

fn sim_summary(r: &SimResult) -> serde_json::Value {
    json!({
        "result": SweepRow::from(r),
        "events": r.events.len(),
        "trace_rows": r.trace.len(),
    })
}

fn simulate(s: &Scenario, preview: Option<f64>, remote: Option<&str>, timeout: Duration) -> Result<()> {
    let mut cfg = s.sim_config();
    if let Some(p) = preview {
        cfg.preview_distance = p;
    }
    let result = match remote {
        None => simroute::run(&s.route, &cfg)?,
        Some(addr) => {
            let mut client = v2i::Client::connect(addr, timeout)?;
            client.tol = cfg.candidate_tol;
            client.max_n = cfg.candidate_max_n;
            let r = simroute::run_with(&s.route, &cfg, &mut client)?;
            client.close()?;
            r
        }
    };
    write_with(&s.output_dir.join("trace.csv"), |w| {
        simroute::write_trace_csv(w, &result)
    })?;
    write_with(&s.output_dir.join("events.csv"), |w| write_events_csv(w, &result))?;
    let text = to_json_string(&sim_summary(&result))?;
    write_text(&s.output_dir.join("sim_summary.json"), &text)?;
    print!("{text}");
    Ok(())
}

/// Metrics as rows, one column per preview distance.
fn comparison_table(rows: &[SweepRow]) -> Vec<(String, Vec<String>)> {
    let mut t: Vec<(String, Vec<String>)> = vec![
        ("trip_time_s".into(), rows.iter().map(|r| fmt9(r.trip_time)).collect()),
        (
            "recup_energy_j".into(),
            rows.iter().map(|r| fmt9(r.total_recup_energy)).collect(),
        ),
        (
            "avg_decel_mps2".into(),
            rows.iter().map(|r| fmt9(r.avg_decel)).collect(),
        ),
        (
            "max_decel_mps2".into(),
            rows.iter().map(|r| fmt9(r.max_decel)).collect(),
        ),
    ];
    for c in 1..=4u8 {
        t.push((
            format!("cond{c}"),
            rows.iter()
                .map(|r| r.transition_counts.get(&c).copied().unwrap_or(0).to_string())
                .collect(),
        ));
    }
    t.push((
        "fallbacks".into(),
        rows.iter().map(|r| r.fallbacks.to_string()).collect(),
    ));
    t.push((
        "red_violations".into(),
        rows.iter().map(|r| r.red_violations.to_string()).collect(),
    ));
    t
}

fn sweep(s: &Scenario, distances: &[f64]) -> Result<()> {
    let cfg = s.sim_config();
    let (results, rows) = simroute::sweep(&s.route, &cfg, distances)?;
    for r in &results {
        let name = format!("trace_{}.csv", fmt9(r.preview_distance));
        write_with(&s.output_dir.join(name), |w| simroute::write_trace_csv(w, r))?;
    }
    write_with(&s.output_dir.join("sweep.csv"), |w| simroute::write_sweep_csv(w, &rows))?;
    let table = comparison_table(&rows);
    let heads: Vec<String> = rows
        .iter()
        .map(|r| format!("preview_{}m", fmt9(r.preview_distance)))
        .collect();
    write_with(&s.output_dir.join("comparison.csv"), |w| {
        writeln!(w, "metric,{}", heads.join(","))?;
        for (m, vals) in &table {
            writeln!(w, "{m},{}", vals.join(","))?;
        }
        Ok(())
    })?;
    println!(
        "{:<16}{}",
        "metric",
        heads.iter().map(|h| format!("{h:>16}")).collect::<String>()
    );
    for (m, vals) in &table {
        println!("{m:<16}{}", vals.iter().map(|v| format!("{v:>16}")).collect::<String>());
    }
    Ok(())
}

fn serve(s: &Scenario, endpoint: &str) -> Result<()> {
    let ctx = ServiceContext {
        params: s.vehicle.clone(),
        envelope: s.envelope.clone(),
        cfg: s.config.planner.clone(),
    };
    let handle =
        v2i::spawn(endpoint, ctx).map_err(|e| Error::InvalidParam(format!("cannot listen on {endpoint}: {e}")))?;
    println!("listening on {}", handle.addr);
    std::io::stdout().flush()?;
    let mut sink = Vec::new();
    std::io::stdin().read_to_end(&mut sink)?;
    log::info!("stdin closed, shutting down");
    handle.shutdown();
    Ok(())
}
