use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod scenario;

/// Energy-optimal deceleration planning for P2 electrified vehicles.
///
/// Exit codes: 0 success, 2 input or configuration error, 3 infeasible
/// request, 4 transport error. Log level comes from EDPS_LOG (default warn).
#[derive(Debug, Parser)]
#[command(name = "edps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario JSON; without one the built-in synthetic scenario is used.
    #[arg(long, short)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the seed of the synthetic corpus.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic braking corpus (corpus.csv: set_id,t_s,v_mps,a_mps2,bps_pct)
    /// plus a matching vehicle.json, route.csv, lights.json and scenario.json.
    SynthData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        route_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fits the deceleration-time envelope to a corpus CSV and writes the
    /// envelope JSON plus a fit report (coefficients, RMSE, domain).
    Fit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-cell quantile taken as the extremes (0.05 fits the 5th/95th).
        #[arg(long, default_value_t = 0.05)]
        quantile: f64,
        #[arg(long, default_value_t = 2.0)]
        grid_step: f64,
        /// Report path; defaults to fit_report.json next to the envelope.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Plans one deceleration event. Writes profile.csv
    /// (k,t_s,v_mps,a_mps2,d_m,rho_rad,f_rgn_n,f_lmt_n,p_rgn_w,nd_steps) and
    /// plan_summary.json; an infeasible request writes infeasible.json and
    /// exits 3.
    Plan {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        v_i0: f64,
        #[arg(long)]
        v_f0: f64,
        #[arg(long)]
        d_res: f64,
        #[arg(long)]
        t_req: f64,
        /// Constant grade in rad instead of the scenario route.
        #[arg(long, allow_hyphen_values = true)]
        slope: Option<f64>,
        /// Route position of the vehicle when grades come from the route, m.
        #[arg(long, default_value_t = 0.0)]
        from: f64,
    },
    /// Simulates the scenario route. Writes trace.csv
    /// (t_s,d_m,v_mps,a_mps2,p_rgn_w,light_state,event_id), events.csv and
    /// sim_summary.json.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        preview: Option<f64>,
        /// Plan through a running `edps serve` at this address.
        #[arg(long)]
        remote: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Simulates once per preview distance and writes sweep.csv,
    /// comparison.csv (metrics by preview) and trace_<preview>.csv.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [200.0, 150.0, 100.0])]
        distances: Vec<f64>,
    },
    /// Serves plans and event decisions over TCP. Prints the bound address
    /// and runs until stdin is closed, then drains open sessions.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EDPS_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edps: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
