//! One function per subcommand. Each returns a JSON summary for the manifest
//! and records the files it wrote in [`Outputs`].

use std::path::{Path, PathBuf};

use pm_gmrf::domain::{Dataset, RegionGrid};
use pm_gmrf::io::{ingest_csv, read_targets, write_atomic, write_atomic_with, write_dataset_csv};
use pm_gmrf::mesh::Mesh;
use pm_gmrf::models::{build, write_predictions_csv, write_surface_csv, FittedModel, Layout, ModelKind, RasterSpec};
use pm_gmrf::synth::simulate;
use pm_gmrf::validation::{h_sweep, make_folds_kfold, make_folds_lpo_hblock, run_cv, EvalReport, ModelSettings};
use pm_gmrf::{Error, Result};
use serde_json::{json, Value};

use crate::config::{RunConfig, SchemeKind};

#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    pub files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write<F>(&mut self, name: &str, render: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        write_atomic_with(&self.dir.join(name), render)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn grid(cfg: &RunConfig) -> Result<RegionGrid> {
    RegionGrid::new(cfg.region_cell_km, (0.0, 0.0))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    ingest_csv(cfg.input()?, &grid(cfg)?, cfg.min_per_day, cfg.min_per_station)
}

fn station_mesh(cfg: &RunConfig, data: &Dataset) -> Result<Mesh> {
    let pts: Vec<[f64; 2]> = data.stations().iter().map(|s| s.location()).collect();
    Mesh::from_stations(data.stations(), &cfg.mesh_config(&pts))
}

fn load_fit(cfg: &RunConfig, kind: ModelKind) -> Result<FittedModel> {
    let path = cfg.fit_path(kind);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("fit {} cannot be read: {e}", path.display())))?;
    let fitted = FittedModel::from_json(&text)?;
    if fitted.kind != kind {
        return Err(Error::Config(format!("{} holds a {} fit", path.display(), fitted.kind)));
    }
    Ok(fitted)
}

fn fit_full(cfg: &RunConfig, kind: ModelKind, data: &Dataset, mesh: Option<&Mesh>, trace: bool) -> Result<FittedModel> {
    let built = build(kind, data, mesh)?;
    let bounds = cfg.bounds(kind, built.default_bounds()?)?;
    let theta0 = match cfg.start(kind) {
        Some(s) => s.clone(),
        None => built.initial_theta()?,
    };
    let engine = pm_gmrf::engine::EngineConfig {
        record_trace: trace,
        ..cfg.engine()
    };
    let mut fitted = built.fit_from(&theta0, &bounds, &engine)?;
    fitted.region_grid = Some(grid(cfg)?);
    Ok(fitted)
}

pub fn simulate_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let (data, truth) = simulate(&cfg.sim_config())?;
    out.write("data.csv", |b| write_dataset_csv(&data, b))?;
    out.write_bytes("truth.json", serde_json::to_string_pretty(&truth)?.as_bytes())?;
    Ok(json!({ "stations": data.stations().len(), "days": data.day_count(), "rows": data.n_obs() }))
}

pub fn fit_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let data = load_data(cfg)?;
    let mesh = if cfg.models.contains(&ModelKind::Gmrf) {
        Some(station_mesh(cfg, &data)?)
    } else {
        None
    };
    let mut summary = serde_json::Map::new();
    for &kind in &cfg.models {
        let fitted = fit_full(cfg, kind, &data, mesh.as_ref(), true)?;
        out.write(&format!("fit_{kind}.json"), |b| {
            b.extend_from_slice(fitted.to_json()?.as_bytes());
            Ok(())
        })?;
        out.write(&format!("trace_{kind}.csv"), |b| fitted.fit.write_trace_csv(b))?;
        if let Layout::Gmrf { mesh } = &fitted.layout {
            out.write("mesh_nodes.csv", |b| mesh.write_nodes_csv(b))?;
            out.write("mesh_triangles.csv", |b| mesh.write_triangles_csv(b))?;
        }
        summary.insert(
            kind.to_string(),
            json!({
                "theta_names": fitted.fit.theta_names,
                "theta": fitted.fit.theta,
                "fixed_names": fitted.fit.fixed_names,
                "beta": fitted.fit.beta,
                "loglik": fitted.fit.loglik,
                "converged": fitted.fit.convergence.converged,
            }),
        );
    }
    Ok(Value::Object(summary))
}

pub fn predict_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let path = match &cfg.targets {
        Some(t) => t.clone(),
        None => cfg.input()?.to_path_buf(),
    };
    let mut summary = serde_json::Map::new();
    for &kind in &cfg.models {
        let fitted = load_fit(cfg, kind)?;
        let file = std::fs::File::open(&path).map_err(|e| Error::Config(format!("targets {}: {e}", path.display())))?;
        let targets = read_targets(file, &fitted.covariate_names)?;
        let preds = fitted.predict(&targets)?;
        out.write(&format!("predictions_{kind}.csv"), |b| write_predictions_csv(&preds, b))?;
        summary.insert(kind.to_string(), json!({ "predictions": preds.len() }));
    }
    Ok(Value::Object(summary))
}

/// Fold settings per model; with `warm_start` the full-data estimate seeds
/// every fold fit.
fn fold_settings(cfg: &RunConfig, data: &Dataset) -> Result<Vec<ModelSettings>> {
    let mesh = if cfg.models.contains(&ModelKind::Gmrf) {
        Some(station_mesh(cfg, data)?)
    } else {
        None
    };
    cfg.models
        .iter()
        .map(|&kind| {
            let kind_mesh = if kind == ModelKind::Gmrf { mesh.clone() } else { None };
            let start = if cfg.warm_start {
                Some(fit_full(cfg, kind, data, kind_mesh.as_ref(), false)?.fit.theta)
            } else {
                cfg.start(kind).cloned()
            };
            Ok(ModelSettings {
                kind,
                mesh: kind_mesh,
                region_grid: Some(grid(cfg)?),
                start,
            })
        })
        .collect()
}

pub fn cv_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let data = load_data(cfg)?;
    let settings = fold_settings(cfg, &data)?;
    let engine = cfg.engine();
    let mut evals = Vec::new();
    for scheme in &cfg.schemes {
        let plan = match scheme {
            SchemeKind::Kfold => make_folds_kfold(&data, cfg.k, cfg.seed)?,
            SchemeKind::Lpo => make_folds_lpo_hblock(&data, cfg.p, cfg.h, cfg.n_iter, cfg.seed)?,
        };
        for s in &settings {
            evals.push(run_cv(&data, s, &plan, &engine)?);
        }
    }
    let report = EvalReport::new(evals);
    out.write("cv_table.csv", |b| report.write_table_csv(b))?;
    out.write("cv_folds.csv", |b| report.write_folds_csv(b))?;
    out.write("cv_paired.csv", |b| report.write_paired_csv(b))?;
    out.write_bytes("cv_report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(json!(report
        .evaluations
        .iter()
        .map(|e| json!({
            "model": e.model,
            "scheme": e.scheme.label(),
            "rmse": e.rmse,
            "r2": e.r2,
            "train_test_ratio": e.train_test_ratio,
        }))
        .collect::<Vec<_>>()))
}

pub fn sweep_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let data = load_data(cfg)?;
    let settings = fold_settings(cfg, &data)?;
    let sweep = h_sweep(
        &data,
        &settings,
        cfg.p,
        &cfg.h_list,
        cfg.n_iter,
        cfg.seed,
        &cfg.engine(),
    )?;
    out.write("sweep.csv", |b| sweep.write_csv(b))?;
    out.write("sweep_summary.csv", |b| sweep.write_summary_csv(b))?;
    Ok(json!({ "rows": sweep.rows.len() }))
}

fn export_day(cfg: &RunConfig, fitted: &FittedModel) -> Result<i64> {
    match cfg.day {
        Some(d) => {
            fitted.block_of_day(d)?;
            Ok(d)
        }
        None => fitted
            .days
            .first()
            .copied()
            .ok_or_else(|| Error::Config("fit has no days".into())),
    }
}

pub fn export_precision_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let data = load_data(cfg)?;
    let mut summary = serde_json::Map::new();
    for &kind in &cfg.models {
        let fitted = load_fit(cfg, kind)?;
        let mesh = match &fitted.layout {
            Layout::Gmrf { mesh } => Some(mesh),
            Layout::Lmm { .. } => None,
        };
        let built = build(kind, &data, mesh)?;
        if built.stations != fitted.stations || built.days != fitted.days {
            return Err(Error::Config(format!(
                "input does not match the data behind fit_{kind}.json"
            )));
        }
        let day = export_day(cfg, &fitted)?;
        let export = fitted.precision_export(&built, day)?;
        out.write(&format!("precision_{kind}_day{day}.mtx"), |b| {
            export.matrix.write_coordinate(b)
        })?;
        out.write(&format!("precision_{kind}_day{day}_labels.csv"), |b| {
            export.write_labels_csv(b)
        })?;
        summary.insert(
            kind.to_string(),
            json!({ "day": day, "dimension": export.labels.len(), "nonzeros_lower": export.matrix.nnz() }),
        );
    }
    Ok(Value::Object(summary))
}

pub fn export_surface_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let mut summary = serde_json::Map::new();
    for &kind in &cfg.models {
        let fitted = load_fit(cfg, kind)?;
        let [x0, x1, y0, y1] = match cfg.raster_bbox {
            Some(b) => b,
            None => {
                let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&[f64; 2]) -> f64| {
                    fitted.stations.iter().map(|s| pick(&s.location())).fold(init, f)
                };
                [
                    fold(f64::min, f64::INFINITY, |p| p[0]),
                    fold(f64::max, f64::NEG_INFINITY, |p| p[0]),
                    fold(f64::min, f64::INFINITY, |p| p[1]),
                    fold(f64::max, f64::NEG_INFINITY, |p| p[1]),
                ]
            }
        };
        let raster = RasterSpec::new(x0, x1, y0, y1, cfg.raster_nx, cfg.raster_ny)?;
        let day = export_day(cfg, &fitted)?;
        let surface = fitted.spatial_surface(day, &raster)?;
        out.write(&format!("surface_{kind}_day{day}.csv"), |b| {
            write_surface_csv(&surface, b)
        })?;
        summary.insert(kind.to_string(), json!({ "day": day, "points": surface.len() }));
    }
    Ok(Value::Object(summary))
}
