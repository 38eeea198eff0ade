//! Run configuration: a flat `key = value` file overlaid with command-line
//! settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pm_gmrf::engine::{Bounds, EngineConfig, Route};
use pm_gmrf::mesh::MeshConfig;
use pm_gmrf::models::ModelKind;
use pm_gmrf::synth::{SimConfig, StationLayout, TrueParams, TruthKind};
use pm_gmrf::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every accepted key with its meaning and default.
pub const KEYS: &[(&str, &str)] = &[
    ("input", "panel CSV (required by fit, cv, sweep, export-precision)"),
    ("output", "output directory [out]"),
    ("models", "comma list of lmm, gmrf [lmm,gmrf]"),
    (
        "region_cell_km",
        "side of the square regions assigned when the input has no region_id [25]",
    ),
    ("min_per_day", "drop days with fewer observations [30]"),
    ("min_per_station", "drop stations with fewer observations [30]"),
    (
        "mesh_buffer_fraction",
        "mesh extension beyond the station hull, as a fraction of the diameter, in [0, 1] [0.2]",
    ),
    ("mesh_max_edge", "longest mesh edge in km [station diameter / 40]"),
    ("schemes", "comma list of kfold, lpo for cv [kfold,lpo]"),
    ("k", "folds of the random K-fold scheme, >= 2 [10]"),
    ("p", "test stations per leave-p-out iteration, >= 1 [20]"),
    ("h", "exclusion radius in km for cv, >= 0 [0]"),
    ("h_list", "ascending comma list of radii for sweep [0,10,...,100]"),
    ("n_iter", "leave-p-out iterations, >= 1 [10]"),
    ("seed", "random seed [1]"),
    ("route", "auto, precision or covariance [auto]"),
    ("parallel", "use the thread pool, true or false [true]"),
    ("tolerance", "outer optimizer log-likelihood tolerance, > 0 [1e-6]"),
    ("max_rounds", "outer optimizer rounds, >= 2 [200]"),
    ("max_evaluations", "evaluations per Nelder-Mead round [1500]"),
    (
        "warm_start",
        "start fold fits from the full-data estimate, true or false [true]",
    ),
    ("start_lmm", "comma list of 5 starting variances for the LMM"),
    ("start_gmrf", "comma list of 7 starting values for the GMRF"),
    ("lower_lmm", "comma list of 5 lower bounds for the LMM"),
    ("upper_lmm", "comma list of 5 upper bounds for the LMM"),
    ("lower_gmrf", "comma list of 7 lower bounds for the GMRF"),
    ("upper_gmrf", "comma list of 7 upper bounds for the GMRF"),
    ("fit_dir", "directory holding fit_<model>.json [output]"),
    ("targets", "prediction targets CSV [input]"),
    (
        "day",
        "day label for export-precision and export-surface [first fitted day]",
    ),
    ("raster_nx", "surface raster columns, >= 2 [100]"),
    ("raster_ny", "surface raster rows, >= 2 [100]"),
    (
        "raster_bbox",
        "x0,x1,y0,y1 of the surface raster [station bounding box]",
    ),
    ("sim_stations", "simulated stations [60]"),
    ("sim_days", "simulated days [30]"),
    ("sim_domain_km", "side of the simulated square domain [100]"),
    ("sim_layout", "uniform or clustered [uniform]"),
    ("sim_truth", "gmrf or lmm [gmrf]"),
    ("sim_covariates", "number of simulated covariates [0]"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Kfold,
    Lpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub models: Vec<ModelKind>,
    pub region_cell_km: f64,
    pub min_per_day: usize,
    pub min_per_station: usize,
    pub mesh_buffer_fraction: f64,
    pub mesh_max_edge: Option<f64>,
    pub schemes: Vec<SchemeKind>,
    pub k: usize,
    pub p: usize,
    pub h: f64,
    pub h_list: Vec<f64>,
    pub n_iter: usize,
    pub seed: u64,
    pub route: Route,
    pub parallel: bool,
    pub tolerance: f64,
    pub max_rounds: usize,
    pub max_evaluations: usize,
    pub warm_start: bool,
    pub start_lmm: Option<Vec<f64>>,
    pub start_gmrf: Option<Vec<f64>>,
    pub lower_lmm: Option<Vec<f64>>,
    pub upper_lmm: Option<Vec<f64>>,
    pub lower_gmrf: Option<Vec<f64>>,
    pub upper_gmrf: Option<Vec<f64>>,
    pub fit_dir: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub day: Option<i64>,
    pub raster_nx: usize,
    pub raster_ny: usize,
    pub raster_bbox: Option<[f64; 4]>,
    pub sim_stations: usize,
    pub sim_days: usize,
    pub sim_domain_km: f64,
    pub sim_layout: StationLayout,
    pub sim_truth: TruthKind,
    pub sim_covariates: usize,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: {key} set twice", i + 1)));
        }
    }
    Ok(out)
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn word<T: serde::de::DeserializeOwned>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => serde_json::from_value(serde_json::Value::String(v.to_ascii_lowercase()))
                .map_err(|_| Error::Config(format!("{key}: unknown value {v:?}"))),
        }
    }

    fn words<T: serde::de::DeserializeOwned>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| {
                    serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase()))
                        .map_err(|_| Error::Config(format!("{key}: unknown value {s:?}")))
                })
                .collect(),
        }
    }
}

fn check(ok: bool, key: &str, rule: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be {rule}")))
    }
}

impl RunConfig {
    pub fn from_settings(settings: &BTreeMap<String, String>) -> Result<Self> {
        for key in settings.keys() {
            if !KEYS.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        let r = Reader(settings);
        let bbox = r.list::<f64>("raster_bbox")?;
        let cfg = RunConfig {
            input: r.optional("input")?,
            output: r.parse("output", PathBuf::from("out"))?,
            models: r.words("models", vec![ModelKind::Lmm, ModelKind::Gmrf])?,
            region_cell_km: r.parse("region_cell_km", 25.0)?,
            min_per_day: r.parse("min_per_day", 30)?,
            min_per_station: r.parse("min_per_station", 30)?,
            mesh_buffer_fraction: r.parse("mesh_buffer_fraction", 0.2)?,
            mesh_max_edge: r.optional("mesh_max_edge")?,
            schemes: r.words("schemes", vec![SchemeKind::Kfold, SchemeKind::Lpo])?,
            k: r.parse("k", 10)?,
            p: r.parse("p", 20)?,
            h: r.parse("h", 0.0)?,
            h_list: r
                .list("h_list")?
                .unwrap_or_else(|| (0..=10).map(|i| 10.0 * i as f64).collect()),
            n_iter: r.parse("n_iter", 10)?,
            seed: r.parse("seed", 1)?,
            route: r.word("route", Route::Auto)?,
            parallel: r.parse("parallel", true)?,
            tolerance: r.parse("tolerance", EngineConfig::default().tolerance)?,
            max_rounds: r.parse("max_rounds", EngineConfig::default().max_rounds)?,
            max_evaluations: r.parse("max_evaluations", EngineConfig::default().max_evaluations)?,
            warm_start: r.parse("warm_start", true)?,
            start_lmm: r.list("start_lmm")?,
            start_gmrf: r.list("start_gmrf")?,
            lower_lmm: r.list("lower_lmm")?,
            upper_lmm: r.list("upper_lmm")?,
            lower_gmrf: r.list("lower_gmrf")?,
            upper_gmrf: r.list("upper_gmrf")?,
            fit_dir: r.optional("fit_dir")?,
            targets: r.optional("targets")?,
            day: r.optional("day")?,
            raster_nx: r.parse("raster_nx", 100)?,
            raster_ny: r.parse("raster_ny", 100)?,
            raster_bbox: match bbox {
                None => None,
                Some(v) if v.len() == 4 => Some([v[0], v[1], v[2], v[3]]),
                Some(_) => return Err(Error::Config("raster_bbox needs x0,x1,y0,y1".into())),
            },
            sim_stations: r.parse("sim_stations", 60)?,
            sim_days: r.parse("sim_days", 30)?,
            sim_domain_km: r.parse("sim_domain_km", 100.0)?,
            sim_layout: r.word("sim_layout", StationLayout::Uniform)?,
            sim_truth: r.word("sim_truth", TruthKind::Gmrf)?,
            sim_covariates: r.parse("sim_covariates", 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        check(!self.models.is_empty(), "models", "non-empty")?;
        check(!self.schemes.is_empty(), "schemes", "non-empty")?;
        check(
            self.region_cell_km > 0.0 && self.region_cell_km.is_finite(),
            "region_cell_km",
            "positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.mesh_buffer_fraction),
            "mesh_buffer_fraction",
            "in [0, 1]",
        )?;
        check(self.mesh_max_edge.is_none_or(|e| e > 0.0), "mesh_max_edge", "positive")?;
        check(self.k >= 2, "k", ">= 2")?;
        check(self.p >= 1, "p", ">= 1")?;
        check(self.h >= 0.0 && self.h.is_finite(), "h", ">= 0")?;
        check(
            !self.h_list.is_empty()
                && self.h_list.iter().all(|h| *h >= 0.0)
                && self.h_list.windows(2).all(|w| w[0] <= w[1]),
            "h_list",
            "a non-empty ascending list of radii >= 0",
        )?;
        check(self.n_iter >= 1, "n_iter", ">= 1")?;
        check(self.tolerance > 0.0, "tolerance", "positive")?;
        check(self.max_rounds >= 2, "max_rounds", ">= 2")?;
        check(self.max_evaluations >= 1, "max_evaluations", ">= 1")?;
        check(
            self.raster_nx >= 2 && self.raster_ny >= 2,
            "raster_nx and raster_ny",
            ">= 2",
        )?;
        check(
            self.sim_stations >= 1 && self.sim_days >= 1,
            "sim_stations and sim_days",
            ">= 1",
        )?;
        check(self.sim_domain_km > 0.0, "sim_domain_km", "positive")?;
        Ok(())
    }

    /// Reads the optional config file and overlays `overrides`.
    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<(Self, BTreeMap<String, String>)> {
        let mut settings = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?;
                parse_settings(&text)?
            }
            None => BTreeMap::new(),
        };
        settings.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok((RunConfig::from_settings(&settings)?, settings))
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            route: self.route,
            parallel: self.parallel,
            tolerance: self.tolerance,
            max_rounds: self.max_rounds,
            max_evaluations: self.max_evaluations,
            ..EngineConfig::default()
        }
    }

    pub fn mesh_config(&self, points: &[[f64; 2]]) -> MeshConfig {
        let mut m = MeshConfig::for_points(points);
        m.buffer_fraction = self.mesh_buffer_fraction;
        if let Some(e) = self.mesh_max_edge {
            m.max_edge = e;
        }
        m
    }

    pub fn start(&self, kind: ModelKind) -> Option<&Vec<f64>> {
        match kind {
            ModelKind::Lmm => self.start_lmm.as_ref(),
            ModelKind::Gmrf => self.start_gmrf.as_ref(),
        }
    }

    /// Overrides `defaults` with any configured bounds.
    pub fn bounds(&self, kind: ModelKind, defaults: Bounds) -> Result<Bounds> {
        let (lo, hi) = match kind {
            ModelKind::Lmm => (&self.lower_lmm, &self.upper_lmm),
            ModelKind::Gmrf => (&self.lower_gmrf, &self.upper_gmrf),
        };
        if lo.is_none() && hi.is_none() {
            return Ok(defaults);
        }
        Bounds::new(
            lo.clone().unwrap_or(defaults.lower),
            hi.clone().unwrap_or(defaults.upper),
        )
    }

    pub fn input(&self) -> Result<&Path> {
        let p = self
            .input
            .as_deref()
            .ok_or_else(|| Error::Config("input is required".into()))?;
        if !p.is_file() {
            return Err(Error::Config(format!("input {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn fit_path(&self, kind: ModelKind) -> PathBuf {
        self.fit_dir
            .as_deref()
            .unwrap_or(&self.output)
            .join(format!("fit_{kind}.json"))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            layout: self.sim_layout,
            n_stations: self.sim_stations,
            n_days: self.sim_days,
            domain_km: self.sim_domain_km,
            truth: self.sim_truth,
            params: TrueParams {
                beta: (0..self.sim_covariates)
                    .map(|i| if i % 2 == 0 { 1.0 } else { -0.5 })
                    .collect(),
                ..TrueParams::default()
            },
            region_cell_km: self.region_cell_km,
            seed: self.seed,
            layout_seed: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::from_settings(&BTreeMap::new()).unwrap();
        assert_eq!(c.models, vec![ModelKind::Lmm, ModelKind::Gmrf]);
        assert_eq!(c.k, 10);
        assert_eq!(c.p, 20);
        assert_eq!(c.h_list.len(), 11);
        assert_eq!(c.h_list[10], 100.0);
        assert_eq!(c.route, Route::Auto);
    }

    #[test]
    fn file_syntax() {
        let s = parse_settings("# run\nmodels = gmrf\n\n k=5 # folds\nh_list = 0, 25,50\n").unwrap();
        let c = RunConfig::from_settings(&s).unwrap();
        assert_eq!(c.models, vec![ModelKind::Gmrf]);
        assert_eq!(c.k, 5);
        assert_eq!(c.h_list, vec![0.0, 25.0, 50.0]);
        assert!(parse_settings("k 5").is_err());
        assert!(parse_settings("k=5\nk=6").is_err());
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "k = 5\nseed = 3\n").unwrap();
        let (c, _) = RunConfig::load(Some(&p), &settings(&[("k", "7")])).unwrap();
        assert_eq!((c.k, c.seed), (7, 3));
    }

    #[test]
    fn rejects_bad_values() {
        for (k, v) in [
            ("k", "1"),
            ("models", "lmm,krige"),
            ("mesh_buffer_fraction", "1.5"),
            ("h_list", "10,5"),
            ("route", "fast"),
            ("raster_bbox", "0,1,2"),
            ("nonsense", "1"),
            ("seed", "-1"),
        ] {
            assert!(
                matches!(RunConfig::from_settings(&settings(&[(k, v)])), Err(Error::Config(_))),
                "{k}={v}"
            );
        }
    }

    #[test]
    fn missing_input_is_reported() {
        let c = RunConfig::from_settings(&settings(&[("input", "/no/such/file.csv")])).unwrap();
        assert!(matches!(c.input(), Err(Error::Config(_))));
    }
}
