//! Scenario file: one JSON document naming the input artifacts plus planner
//! and simulation settings. Relative paths resolve against the scenario's
//! own directory.
//!
//! ```json
//! {
//!   "vehicle": "vehicle.json",
//!   "route": "route.csv",
//!   "lights": "lights.json",
//!   "fit_from": "corpus.csv",
//!   "planner": { "dt": 0.5 },
//!   "sim": { "cruise_speed": 16.6667, "preview_distance": 150 },
//!   "output_dir": "out",
//!   "seed": 7
//! }
//! ```
//!
//! Every field is optional. A missing vehicle is the built-in synthetic one, a
//! missing route is the synthetic route for `route_seed`, and with neither
//! `envelope` nor `fit_from` the envelope is fitted to a corpus synthesised
//! from `seed`.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use edps::envelope::{self, Envelope};
use edps::planner::PlannerConfig;
use edps::route::{self, Route};
use edps::simroute::SimConfig;
use edps::{events, Error, Result, VehicleParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    /// Speed grid used to extract (v_i, v_f) pairs from the corpus, m/s.
    pub grid_step: f64,
    pub quantile: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            grid_step: 2.0,
            quantile: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub cruise_speed: f64,
    pub preview_distance: f64,
    pub accel_rate: f64,
    pub candidate_tol: f64,
    pub candidate_max_n: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            cruise_speed: 60.0 / 3.6,
            preview_distance: 150.0,
            accel_rate: 1.5,
            candidate_tol: events::DEFAULT_TOL,
            candidate_max_n: events::DEFAULT_MAX_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub vehicle: Option<PathBuf>,
    pub route: Option<PathBuf>,
    pub lights: Option<PathBuf>,
    pub envelope: Option<PathBuf>,
    pub fit_from: Option<PathBuf>,
    pub fit: FitSettings,
    pub planner: PlannerConfig,
    pub sim: SimSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub route_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            vehicle: None,
            route: None,
            lights: None,
            envelope: None,
            fit_from: None,
            fit: FitSettings::default(),
            planner: PlannerConfig::default(),
            sim: SimSettings::default(),
            output_dir: PathBuf::from("out"),
            seed: 7,
            route_seed: 1,
        }
    }
}

/// Everything a command needs, loaded and validated.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub vehicle: VehicleParams,
    pub envelope: Envelope,
    pub route: Route,
    pub output_dir: PathBuf,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidParam(format!("cannot read {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidParam(format!("cannot open {}: {e}", path.display())))
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Json(j) => Error::Parse(format!("{}: {j}", path.display())),
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a braking corpus and fits both envelope surfaces.
pub fn fit_corpus(path: &Path, fit: &FitSettings) -> Result<(Envelope, envelope::Extraction)> {
    let records = in_file(path, envelope::read_corpus_csv(open(path)?))?;
    let ex = envelope::extract_observations(&records, fit.grid_step);
    let mut env = envelope::fit_envelope(&ex.observations, fit.quantile)?;
    env.provenance = format!("fitted to {}", path.display());
    Ok((env, ex))
}

pub fn synthetic_envelope(seed: u64, vehicle: &VehicleParams, fit: &FitSettings) -> Result<Envelope> {
    let records = envelope::synth_braking_data(seed, vehicle);
    let ex = envelope::extract_observations(&records, fit.grid_step);
    let mut env = envelope::fit_envelope(&ex.observations, fit.quantile)?;
    env.provenance = format!("fitted to synthetic corpus, seed {seed}");
    Ok(env)
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut cfg: ScenarioConfig = in_file(path, serde_json::from_str(&text).map_err(Error::from))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.vehicle);
        resolve(&mut cfg.route);
        resolve(&mut cfg.lights);
        resolve(&mut cfg.envelope);
        resolve(&mut cfg.fit_from);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn resolve(self) -> Result<Scenario> {
        if self.envelope.is_some() && self.fit_from.is_some() {
            return Err(Error::InvalidParam("scenario sets both envelope and fit_from".into()));
        }
        for p in [&self.vehicle, &self.route, &self.lights, &self.envelope, &self.fit_from]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::InvalidParam(format!(
                    "referenced file {} does not exist",
                    p.display()
                )));
            }
        }
        let vehicle = match &self.vehicle {
            Some(p) => in_file(p, VehicleParams::from_json(&read_text(p)?))?,
            None => VehicleParams::synthetic(),
        };
        let envelope = match (&self.envelope, &self.fit_from) {
            (Some(p), _) => in_file(p, Envelope::from_json(&read_text(p)?))?,
            (None, Some(p)) => fit_corpus(p, &self.fit)?.0,
            (None, None) => synthetic_envelope(self.seed, &vehicle, &self.fit)?,
        };
        let synthetic = Route::synthetic(self.route_seed);
        let samples = match &self.route {
            Some(p) => in_file(p, route::read_route_csv(open(p)?))?,
            None => synthetic.samples.clone(),
        };
        let lights = match &self.lights {
            Some(p) => in_file(p, route::read_lights_json(&read_text(p)?))?,
            None if self.route.is_none() => synthetic.lights.clone(),
            None => Vec::new(),
        };
        let route = Route::new(samples, lights)?;
        self.planner.validate()?;
        Ok(Scenario {
            output_dir: self.output_dir.clone(),
            config: self,
            vehicle,
            envelope,
            route,
        })
    }
}

impl Scenario {
    pub fn sim_config(&self) -> SimConfig {
        let s = &self.config.sim;
        let mut c = SimConfig::new(self.vehicle.clone(), self.envelope.clone());
        c.cruise_speed = s.cruise_speed;
        c.preview_distance = s.preview_distance;
        c.accel_rate = s.accel_rate;
        c.candidate_tol = s.candidate_tol;
        c.candidate_max_n = s.candidate_max_n;
        c.dt = self.config.planner.dt;
        c.planner = self.config.planner.clone();
        c
    }
}
