use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use edps::planner::{self, DecelPlanRequest, SpeedProfile};
use edps::route::SlopeTable;
use edps::v2i::{self, Kind, WireMessage};
use edps::VehicleParams;
use serde_json::Value;
use tempfile::TempDir;

fn edps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edps"))
        .args(args)
        .env("EDPS_LOG", "error")
        .output()
        .expect("failed to run edps")
}

fn ok(args: &[&str]) -> Output {
    let out = edps(args);
    assert!(
        out.status.success(),
        "edps {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Two-light, 1.2 km route with a slight climb, fitted from the synthetic
/// corpus.
fn short_scenario(dir: &Path) -> PathBuf {
    fs::write(
        dir.join("route.csv"),
        "distance_m,slope_rad\n0,0\n600,0.02\n1200,-0.01\n",
    )
    .unwrap();
    fs::write(
        dir.join("lights.json"),
        r#"[
  {"position_m": 400, "green_s": 20, "yellow_s": 3, "red_s": 25, "phase_offset_s": 5},
  {"position_m": 900, "green_s": 25, "yellow_s": 3, "red_s": 20, "phase_offset_s": 30}
]"#,
    )
    .unwrap();
    let path = dir.join("scenario.json");
    fs::write(
        &path,
        r#"{"route": "route.csv", "lights": "lights.json", "output_dir": "out", "seed": 7}"#,
    )
    .unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_data_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth-data", "--seed", "7", "--out-dir", s(&a)]);
    ok(&["synth-data", "--seed", "7", "--out-dir", s(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let corpus = fs::read_to_string(a.join("corpus.csv")).unwrap();
    let mut lines = corpus.lines();
    assert_eq!(lines.next(), Some("set_id,t_s,v_mps,a_mps2,bps_pct"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let sets: BTreeSet<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(sets.len(), 10);
    for id in &sets {
        let first = rows.iter().find(|r| r[0] == *id).unwrap();
        assert_eq!(first[2].parse::<f64>().unwrap(), 38.89);
    }

    ok(&["synth-data", "--seed", "8", "--out-dir", s(&b)]);
    assert_ne!(
        fs::read(a.join("corpus.csv")).unwrap(),
        fs::read(b.join("corpus.csv")).unwrap()
    );
}

/// Crossing times that follow a cubic in speed make every decel time an
/// exact member of the fitted basis.
#[test]
fn fit_recovers_exact_cubic_corpus() {
    let t = TempDir::new().unwrap();
    let g = |v: f64| {
        let u = 40.0 - v;
        2.0 * u + 0.01 * u * u - 1e-4 * u * u * u
    };
    let dg = |v: f64| {
        let u = 40.0 - v;
        2.0 + 0.02 * u - 3e-4 * u * u
    };
    let mut csv = String::from("set_id,t_s,v_mps,a_mps2,bps_pct\n");
    for set in 1..=10 {
        for k in 0..=760 {
            let v = (760 - k) as f64 / 20.0;
            csv.push_str(&format!("{set},{},{v},{},20\n", g(v) - g(38.0), -1.0 / dg(v)));
        }
    }
    let corpus = t.path().join("cubic.csv");
    fs::write(&corpus, csv).unwrap();
    let env = t.path().join("env").join("envelope.json");
    let out = ok(&["fit", "--corpus", s(&corpus), "--out", s(&env)]);

    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, read_json(&env.with_file_name("fit_report.json")));
    let n_coeffs = report["coeffs_min"].as_array().unwrap().len() + report["coeffs_max"].as_array().unwrap().len();
    assert_eq!(n_coeffs, 14);
    for key in ["fit_rmse_min", "fit_rmse_max"] {
        let rmse = report[key].as_f64().unwrap();
        assert!(rmse < 1e-6, "{key} = {rmse}");
    }
    let fitted = edps::Envelope::from_json(&fs::read_to_string(&env).unwrap()).unwrap();
    let expect = g(6.0) - g(20.0);
    let (lo, hi) = (fitted.nd_min_s(20.0, 6.0), fitted.nd_max_s(20.0, 6.0));
    assert!(
        (lo - expect).abs() < 1e-5 && (hi - expect).abs() < 1e-5,
        "{lo} {hi} {expect}"
    );
}

#[test]
fn fit_missing_corpus_exits_2() {
    let t = TempDir::new().unwrap();
    let out = edps(&[
        "fit",
        "--corpus",
        s(&t.path().join("none.csv")),
        "--out",
        s(&t.path().join("e.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.csv"));
}

#[test]
fn missing_referenced_file_exits_2() {
    let t = TempDir::new().unwrap();
    let sc = t.path().join("scenario.json");
    fs::write(&sc, r#"{"vehicle": "missing.json"}"#).unwrap();
    let out = edps(&[
        "plan",
        "-s",
        s(&sc),
        "--v-i0",
        "16",
        "--v-f0",
        "0",
        "--d-res",
        "150",
        "--t-req",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&sc, r#"{"unknown_field": 1}"#).unwrap();
    let out = edps(&[
        "plan",
        "-s",
        s(&sc),
        "--v-i0",
        "16",
        "--v-f0",
        "0",
        "--d-res",
        "150",
        "--t-req",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_summary_and_profile_are_consistent() {
    let t = TempDir::new().unwrap();
    let out_dir = t.path().join("out");
    let args = [
        "plan",
        "--out-dir",
        s(&out_dir),
        "--v-i0",
        "16.67",
        "--v-f0",
        "0",
        "--d-res",
        "150",
        "--t-req",
        "20",
        "--slope",
        "0.01",
    ];
    ok(&args);
    let summary = read_json(&out_dir.join("plan_summary.json"));
    assert_eq!(summary["inputs"]["v_i0"], 16.67);
    assert_eq!(summary["inputs"]["v_f0"], 0.0);
    assert_eq!(summary["inputs"]["d_res"], 150.0);
    assert_eq!(summary["inputs"]["t_req"], 20.0);

    let csv = fs::read_to_string(out_dir.join("profile.csv")).unwrap();
    let mut lines = csv.lines();
    let meta: Value = serde_json::from_str(lines.next().unwrap().strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(meta, summary["inputs"]);
    assert_eq!(lines.next(), Some(planner::PROFILE_HEADER));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let profile = SpeedProfile {
        dt: 0.5,
        v: rows.iter().map(|r| r[2]).collect(),
        a: rows.iter().map(|r| r[3]).collect(),
        d: rows.iter().map(|r| r[4]).collect(),
        nd: rows.iter().map(|r| r[9] as usize).collect(),
    };
    assert_eq!(profile.len(), summary["n_steps"].as_u64().unwrap() as usize + 1);
    let eval = planner::evaluate_profile(
        &profile,
        &VehicleParams::synthetic(),
        &SlopeTable::constant(0.01, 150.0),
    )
    .unwrap();
    let reported = summary["total_recup_energy"].as_f64().unwrap();
    assert!(reported < 0.0);
    assert!(
        (eval.energy - reported).abs() <= 1e-6 * reported.abs(),
        "{} vs {reported}",
        eval.energy
    );
    let power_sum: f64 = rows.iter().map(|r| r[8] * 0.5).sum();
    assert!((power_sum - reported).abs() <= 1e-6 * reported.abs());

    let again = t.path().join("again");
    let mut args2 = args;
    args2[2] = s(&again);
    ok(&args2);
    assert_eq!(dir_bytes(&out_dir), dir_bytes(&again));
}

#[test]
fn infeasible_plan_exits_3_with_report() {
    let t = TempDir::new().unwrap();
    let out_dir = t.path().join("out");
    let out = edps(&[
        "plan",
        "--out-dir",
        s(&out_dir),
        "--v-i0",
        "16.67",
        "--v-f0",
        "0",
        "--d-res",
        "15",
        "--t-req",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let report = read_json(&out_dir.join("infeasible.json"));
    assert_eq!(report, serde_json::from_slice::<Value>(&out.stdout).unwrap());
    assert_eq!(report["status"], "error");
    assert_eq!(report["exit_code"], 3);
    assert!(report["error"]["variant"].is_string());
    assert_eq!(report["inputs"]["d_res"], 15.0);
    assert!(!out_dir.join("profile.csv").exists());
}

#[test]
fn sweep_is_deterministic_and_table_shaped() {
    let t = TempDir::new().unwrap();
    let sc = short_scenario(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["sweep", "-s", s(&sc), "--out-dir", s(&a), "--distances", "200,150,100"]);
    ok(&["sweep", "-s", s(&sc), "--out-dir", s(&b), "--distances", "200,150,100"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let table = fs::read_to_string(a.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["metric", "preview_200m", "preview_150m", "preview_100m"]);
    let metrics: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    for m in [
        "trip_time_s",
        "recup_energy_j",
        "avg_decel_mps2",
        "max_decel_mps2",
        "cond1",
        "cond2",
        "cond3",
        "cond4",
    ] {
        assert!(metrics.contains(&m), "{m}");
    }
    assert!(rows.iter().all(|r| r.len() == 4));

    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    for line in sweep.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let trip: f64 = cols[1].parse().unwrap();
        let trace = fs::read_to_string(a.join(format!("trace_{}.csv", cols[0]))).unwrap();
        let n = trace.lines().count() - 1;
        assert!((n as f64 - trip / 0.5).abs() <= 1.0, "{n} rows for {trip} s");
    }
}

struct Server {
    child: Child,
    addr: String,
}

fn start_server(args: &[&str]) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_edps"))
        .arg("serve")
        .args(args)
        .env("EDPS_LOG", "error")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("no address line")
        .to_string();
    Server { child, addr }
}

fn vector_bytes(name: &str) -> Vec<u8> {
    let path = format!("{}/../core/tests/vectors/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    hex::decode(v["hex"].as_str().unwrap()).unwrap()
}

#[test]
fn serve_accepts_hello_and_drains_in_flight_request() {
    let mut srv = start_server(&["--endpoint", "127.0.0.1:0"]);
    let mut stream = TcpStream::connect(&srv.addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let hello = vector_bytes("hello");
    stream.write_all(&hello).unwrap();
    let reply = v2i::read_message(&mut stream).unwrap();
    assert_eq!(v2i::encode(&reply).unwrap(), hello);

    let req = DecelPlanRequest {
        v_i0: 16.67,
        v_f0: 0.0,
        d_res: 150.0,
        t_req: 20.0,
        slopes: SlopeTable::constant(0.0, 150.0),
        spat: None,
    };
    v2i::write_message(&mut stream, &WireMessage::new(Kind::PlanRequest, 2, &req).unwrap()).unwrap();
    drop(srv.child.stdin.take());
    let reply = v2i::read_message(&mut stream).unwrap();
    assert_eq!(reply.kind, Kind::PlanResponse);
    assert_eq!(reply.seq, 2);
    let status = srv.child.wait().unwrap();
    assert!(status.success());
}

#[test]
fn serve_bad_endpoint_exits_2() {
    let out = edps(&["serve", "--endpoint", "not-a-host:99999"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn remote_simulation_matches_local() {
    let t = TempDir::new().unwrap();
    let sc = short_scenario(t.path());
    let mut srv = start_server(&["-s", s(&sc), "--endpoint", "127.0.0.1:0"]);
    let (local, remote) = (t.path().join("local"), t.path().join("remote"));
    ok(&["simulate", "-s", s(&sc), "--out-dir", s(&local)]);
    ok(&["simulate", "-s", s(&sc), "--out-dir", s(&remote), "--remote", &srv.addr]);
    assert_eq!(dir_bytes(&local), dir_bytes(&remote));
    drop(srv.child.stdin.take());
    assert!(srv.child.wait().unwrap().success());

    let out = edps(&["simulate", "-s", s(&sc), "--out-dir", s(&remote), "--remote", &srv.addr]);
    assert_eq!(out.status.code(), Some(4));
}
