//! The day/day-region mixed model and the SPDE field model built on
//! [`LinearGaussianModel`], plus prediction and surface export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, RegionGrid, Station};
use crate::engine::{Bounds, Component, EngineConfig, FieldPrior, FitResult, LatentBlock, LinearGaussianModel, Term};
use crate::error::{Error, Result};
use crate::matern::{SpdeBasis, SpdeParams};
use crate::mesh::{assemble_fem, diameter, Mesh};
use crate::sparse::SymCsc;

pub const LMM_THETA: [&str; 5] = ["var_u", "var_v", "var_g", "var_h", "var_eps"];
pub const GMRF_THETA: [&str; 7] = [
    "range_gamma",
    "sd_gamma",
    "range_psi",
    "sd_psi",
    "var_u",
    "var_v",
    "var_eps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lmm,
    Gmrf,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lmm => "lmm",
            ModelKind::Gmrf => "gmrf",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lmm" => Ok(ModelKind::Lmm),
            "gmrf" => Ok(ModelKind::Gmrf),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Matérn field prior on a mesh, read from two θ coordinates (range, sd).
#[derive(Debug)]
pub struct SpdeField {
    basis: Arc<SpdeBasis>,
    range: usize,
    sd: usize,
}

impl SpdeField {
    pub fn new(basis: Arc<SpdeBasis>, range: usize, sd: usize) -> Self {
        SpdeField { basis, range, sd }
    }

    pub fn params(&self, theta: &[f64]) -> Result<SpdeParams> {
        SpdeParams::from_range_sd(theta[self.range], theta[self.sd])
    }
}

impl FieldPrior for SpdeField {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn pattern(&self) -> &SymCsc {
        self.basis.pattern()
    }

    fn precision(&self, theta: &[f64]) -> Result<SymCsc> {
        Ok(self.basis.precision(&self.params(theta)?))
    }
}

/// Per-day latent layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layout {
    /// `[u, v, g_r..., h_r...]` with regions listed per day in sorted order.
    Lmm { day_regions: Vec<Vec<String>> },
    /// `[γ (m), ψ (m), u, v]` on the shared mesh.
    Gmrf { mesh: Mesh },
}

/// A model ready to fit, with what prediction needs to read its latents.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub kind: ModelKind,
    pub model: LinearGaussianModel,
    pub days: Vec<i64>,
    pub covariate_names: Vec<String>,
    pub stations: Vec<Station>,
    pub layout: Layout,
}

/// Everything needed to predict without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub fit: FitResult,
    pub days: Vec<i64>,
    pub covariate_names: Vec<String>,
    pub stations: Vec<Station>,
    #[serde(default)]
    pub region_grid: Option<RegionGrid>,
    pub layout: Layout,
}

/// `[1, covariates..., AOD]`
fn design_row(covariates: &[f64], aod: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(covariates.len() + 2);
    row.push(1.0);
    row.extend_from_slice(covariates);
    row.push(aod);
    row
}

fn fixed_part(data: &Dataset) -> (Vec<f64>, DMatrix<f64>, Vec<String>) {
    let obs = data.observations();
    let k = data.n_covariates() + 2;
    let mut x = DMatrix::zeros(obs.len(), k);
    for (r, o) in obs.iter().enumerate() {
        for (c, v) in design_row(&o.covariates, o.aod).into_iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(data.covariate_names().iter().cloned());
    names.push("aod".into());
    (data.response(), x, names)
}

fn day_terms(rows: &[usize], data: &Dataset, u: usize, v: usize) -> [Term; 2] {
    let aod: Vec<f64> = rows.iter().map(|&r| data.observations()[r].aod).collect();
    [
        Term {
            component: u,
            size: 1,
            index: vec![0; rows.len()],
            weight: vec![1.0; rows.len()],
        },
        Term {
            component: v,
            size: 1,
            index: vec![0; rows.len()],
            weight: aod,
        },
    ]
}

/// Day effects `u_t`, `v_t·AOD` and per observed (day, region) effects
/// `g_rt`, `h_rt·AOD`. Every station needs a region label.
pub fn build_lmm(data: &Dataset) -> Result<BuiltModel> {
    let regions: Vec<&str> = data
        .stations()
        .iter()
        .map(|s| {
            s.region
                .as_deref()
                .ok_or_else(|| Error::InvalidValue(format!("station {} has no region", s.id)))
        })
        .collect::<Result<_>>()?;
    let (y, x, names) = fixed_part(data);
    let components = (0..4).map(|variance| Component::Iid { variance }).collect();
    let mut blocks = Vec::with_capacity(data.day_count());
    let mut day_regions = Vec::with_capacity(data.day_count());
    for rows in data.rows_by_day() {
        let present: BTreeSet<&str> = rows.iter().map(|&r| regions[data.observations()[r].station]).collect();
        let group: BTreeMap<&str, usize> = present.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let index: Vec<usize> = rows
            .iter()
            .map(|&r| group[regions[data.observations()[r].station]])
            .collect();
        let [tu, tv] = day_terms(&rows, data, 0, 1);
        let g = Term {
            component: 2,
            size: group.len(),
            index: index.clone(),
            weight: vec![1.0; rows.len()],
        };
        let h = Term {
            component: 3,
            size: group.len(),
            index,
            weight: tv.weight.clone(),
        };
        day_regions.push(present.iter().map(|s| s.to_string()).collect());
        blocks.push(LatentBlock {
            rows,
            terms: vec![tu, tv, g, h],
        });
    }
    let model = LinearGaussianModel::new(
        y,
        x,
        names,
        LMM_THETA.iter().map(|s| s.to_string()).collect(),
        4,
        components,
        blocks,
    )?;
    Ok(BuiltModel {
        kind: ModelKind::Lmm,
        model,
        days: data.day_labels().to_vec(),
        covariate_names: data.covariate_names().to_vec(),
        stations: data.stations().to_vec(),
        layout: Layout::Lmm { day_regions },
    })
}

/// Day effects as in the LMM plus per-day Matérn fields `γ_t` and
/// `ψ_t·AOD` sharing one mesh. Stations must lie inside the mesh.
pub fn build_gmrf(data: &Dataset, mesh: &Mesh) -> Result<BuiltModel> {
    let points: Vec<[f64; 2]> = data.stations().iter().map(Station::location).collect();
    let pool = mesh.project(&points)?;
    let basis = Arc::new(SpdeBasis::new(&assemble_fem(mesh)));
    let m = basis.dim();
    let (y, x, names) = fixed_part(data);
    let components = vec![
        Component::Field {
            prior: Arc::new(SpdeField::new(Arc::clone(&basis), 0, 1)),
            pool: pool.clone(),
        },
        Component::Field {
            prior: Arc::new(SpdeField::new(basis, 2, 3)),
            pool,
        },
        Component::Iid { variance: 4 },
        Component::Iid { variance: 5 },
    ];
    let mut blocks = Vec::with_capacity(data.day_count());
    for rows in data.rows_by_day() {
        let stations: Vec<usize> = rows.iter().map(|&r| data.observations()[r].station).collect();
        let [tu, tv] = day_terms(&rows, data, 2, 3);
        let gamma = Term {
            component: 0,
            size: m,
            index: stations.clone(),
            weight: vec![1.0; rows.len()],
        };
        let psi = Term {
            component: 1,
            size: m,
            index: stations,
            weight: tv.weight.clone(),
        };
        blocks.push(LatentBlock {
            rows,
            terms: vec![gamma, psi, tu, tv],
        });
    }
    let model = LinearGaussianModel::new(
        y,
        x,
        names,
        GMRF_THETA.iter().map(|s| s.to_string()).collect(),
        6,
        components,
        blocks,
    )?;
    Ok(BuiltModel {
        kind: ModelKind::Gmrf,
        model,
        days: data.day_labels().to_vec(),
        covariate_names: data.covariate_names().to_vec(),
        stations: data.stations().to_vec(),
        layout: Layout::Gmrf { mesh: mesh.clone() },
    })
}

/// Builds either model; the GMRF needs a mesh.
pub fn build(kind: ModelKind, data: &Dataset, mesh: Option<&Mesh>) -> Result<BuiltModel> {
    match kind {
        ModelKind::Lmm => build_lmm(data),
        ModelKind::Gmrf => {
            let mesh = mesh.ok_or_else(|| Error::Config("the GMRF model needs a mesh".into()))?;
            build_gmrf(data, mesh)
        }
    }
}

/// Residual variance of the ordinary least-squares fit of y on X.
pub fn ols_residual_variance(model: &LinearGaussianModel) -> Result<f64> {
    let x = model.fixed_design();
    let y = DVector::from_column_slice(model.response());
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    let resid = &y - x * beta;
    let dof = (model.n_obs() - x.ncols()).max(1);
    Ok(resid.norm_squared() / dof as f64)
}

impl BuiltModel {
    fn station_diameter(&self) -> f64 {
        let pts: Vec<[f64; 2]> = self.stations.iter().map(Station::location).collect();
        let d = diameter(&pts);
        if d > 0.0 {
            d
        } else {
            1.0
        }
    }

    fn variance_scale(&self) -> Result<f64> {
        let s2 = ols_residual_variance(&self.model)?;
        let y = self.model.response();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var_y = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        Ok(s2.max(1e-8 * var_y).max(1e-12))
    }

    /// Variance components at equal shares of the OLS residual variance;
    /// field ranges at a fifth of the station diameter.
    pub fn initial_theta(&self) -> Result<Vec<f64>> {
        let s2 = self.variance_scale()?;
        Ok(match self.kind {
            ModelKind::Lmm => vec![s2 / 5.0; 5],
            ModelKind::Gmrf => {
                let range = self.station_diameter() / 5.0;
                let sd = (s2 / 5.0).sqrt();
                vec![range, sd, range, sd, s2 / 5.0, s2 / 5.0, s2 / 5.0]
            }
        })
    }

    /// Variances within `[1e-6, 1e2]` times the OLS residual variance and
    /// ranges within `[diameter / 100, 5 · diameter]`.
    pub fn default_bounds(&self) -> Result<Bounds> {
        let s2 = self.variance_scale()?;
        let (vlo, vhi) = (1e-6 * s2, 1e2 * s2);
        let (rlo, rhi) = (self.station_diameter() / 100.0, 5.0 * self.station_diameter());
        let (lower, upper) = match self.kind {
            ModelKind::Lmm => (vec![vlo; 5], vec![vhi; 5]),
            ModelKind::Gmrf => (
                vec![rlo, vlo.sqrt(), rlo, vlo.sqrt(), vlo, vlo, vlo],
                vec![rhi, vhi.sqrt(), rhi, vhi.sqrt(), vhi, vhi, vhi],
            ),
        };
        Bounds::new(lower, upper)
    }

    pub fn fit(&self, cfg: &EngineConfig) -> Result<FittedModel> {
        self.fit_from(&self.initial_theta()?, &self.default_bounds()?, cfg)
    }

    pub fn fit_from(&self, theta0: &[f64], bounds: &Bounds, cfg: &EngineConfig) -> Result<FittedModel> {
        let fit = self.model.fit(theta0, bounds, cfg)?;
        Ok(self.fitted(fit))
    }

    /// Wraps an existing fit of this model.
    pub fn fitted(&self, fit: FitResult) -> FittedModel {
        FittedModel {
            kind: self.kind,
            fit,
            days: self.days.clone(),
            covariate_names: self.covariate_names.clone(),
            stations: self.stations.clone(),
            region_grid: None,
            layout: self.layout.clone(),
        }
    }
}

/// A location/day at which to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub day: i64,
    pub aod: f64,
    pub covariates: Vec<f64>,
    /// Region override for the LMM; looked up from the fit when `None`.
    pub region: Option<String>,
}

impl Target {
    /// One target per observation row, labelled by station id.
    pub fn from_dataset(data: &Dataset) -> Vec<Target> {
        data.observations()
            .iter()
            .map(|o| {
                let s = &data.stations()[o.station];
                Target {
                    label: s.id.clone(),
                    x: s.x,
                    y: s.y,
                    day: data.day_labels()[o.day],
                    aod: o.aod,
                    covariates: o.covariates.clone(),
                    region: s.region.clone(),
                }
            })
            .collect()
    }
}

/// `yhat = fixed + day_part + spatial_part`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub day: i64,
    pub yhat: f64,
    pub fixed: f64,
    pub day_part: f64,
    pub spatial_part: f64,
}

pub fn write_predictions_csv<W: Write>(rows: &[Prediction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "station_id",
        "x",
        "y",
        "day",
        "yhat",
        "fixed",
        "day_part",
        "spatial_part",
    ])?;
    for p in rows {
        w.write_record([
            p.label.clone(),
            p.x.to_string(),
            p.y.to_string(),
            p.day.to_string(),
            p.yhat.to_string(),
            p.fixed.to_string(),
            p.day_part.to_string(),
            p.spatial_part.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Regular raster with `nx × ny` grid points, corners included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub nx: usize,
    pub ny: usize,
}

impl RasterSpec {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 || !(x1 > x0) || !(y1 > y0) {
            return Err(Error::InvalidValue(format!(
                "raster [{x0}, {x1}] x [{y0}, {y1}] with {nx} x {ny} points"
            )));
        }
        Ok(RasterSpec { x0, x1, y0, y1, nx, ny })
    }

    /// Grid points, x varying fastest.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let dx = (self.x1 - self.x0) / (self.nx - 1) as f64;
        let dy = (self.y1 - self.y0) / (self.ny - 1) as f64;
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| [self.x0 + i as f64 * dx, self.y0 + j as f64 * dy]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "value"])?;
    for p in points {
        w.write_record([p.x.to_string(), p.y.to_string(), p.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row/column of an exported posterior precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentLabel {
    pub index: usize,
    /// `u`, `v`, `g`, `h`, `gamma` or `psi`.
    pub effect: String,
    pub region: String,
    /// Mesh node of a field latent.
    pub node: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PrecisionExport {
    pub day: i64,
    pub matrix: SymCsc,
    pub labels: Vec<LatentLabel>,
}

impl PrecisionExport {
    pub fn write_labels_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "effect", "region", "node"])?;
        for l in &self.labels {
            w.write_record([
                l.index.to_string(),
                l.effect.clone(),
                l.region.clone(),
                l.node.map(|n| n.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl FittedModel {
    pub fn block_of_day(&self, day: i64) -> Result<usize> {
        self.days.iter().position(|&d| d == day).ok_or(Error::UnseenDay(day))
    }

    pub fn beta(&self, name: &str) -> Option<f64> {
        self.fit
            .fixed_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.fit.beta[i])
    }

    /// Region of a location: the region grid when known, else the region of
    /// the nearest training station.
    pub fn region_at(&self, x: f64, y: f64) -> String {
        if let Some(grid) = &self.region_grid {
            return grid.label(x, y);
        }
        self.stations
            .iter()
            .min_by(|a, b| {
                let da = (a.x - x).powi(2) + (a.y - y).powi(2);
                let db = (b.x - x).powi(2) + (b.y - y).powi(2);
                da.total_cmp(&db)
            })
            .and_then(|s| s.region.clone())
            .unwrap_or_default()
    }

    fn mesh(&self) -> Option<&Mesh> {
        match &self.layout {
            Layout::Gmrf { mesh } => Some(mesh),
            Layout::Lmm { .. } => None,
        }
    }

    /// Index of `region` among the day's region effects.
    fn region_slot(&self, block: usize, region: &str) -> Option<usize> {
        match &self.layout {
            Layout::Lmm { day_regions } => day_regions[block].iter().position(|r| r == region),
            Layout::Gmrf { .. } => None,
        }
    }

    /// Point predictions with their fixed/day/spatial decomposition.
    pub fn predict(&self, targets: &[Target]) -> Result<Vec<Prediction>> {
        let k = self.covariate_names.len();
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.covariates.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: t.covariates.len(),
                    });
                }
                let b = self.block_of_day(t.day)?;
                let z = self.fit.block_latent(b);
                let fixed: f64 = design_row(&t.covariates, t.aod)
                    .iter()
                    .zip(&self.fit.beta)
                    .map(|(x, b)| x * b)
                    .sum();
                let (day_part, spatial_part) = match &self.layout {
                    Layout::Lmm { day_regions } => {
                        let n_regions = day_regions[b].len();
                        let region = t.region.clone().unwrap_or_else(|| self.region_at(t.x, t.y));
                        let spatial = self
                            .region_slot(b, &region)
                            .map(|g| z[2 + g] + z[2 + n_regions + g] * t.aod)
                            .unwrap_or(0.0);
                        (z[0] + z[1] * t.aod, spatial)
                    }
                    Layout::Gmrf { mesh } => {
                        let m = mesh.n_nodes();
                        let row = mesh
                            .locate([t.x, t.y])
                            .map(|(tri, w)| (mesh.triangles()[tri], w))
                            .ok_or(Error::PointOutsideMesh {
                                index: i,
                                x: t.x,
                                y: t.y,
                            })?;
                        let (nodes, w) = row;
                        let gamma: f64 = (0..3).map(|j| w[j] * z[nodes[j]]).sum();
                        let psi: f64 = (0..3).map(|j| w[j] * z[m + nodes[j]]).sum();
                        (z[2 * m] + z[2 * m + 1] * t.aod, gamma + psi * t.aod)
                    }
                };
                Ok(Prediction {
                    label: t.label.clone(),
                    x: t.x,
                    y: t.y,
                    day: t.day,
                    yhat: fixed + day_part + spatial_part,
                    fixed,
                    day_part,
                    spatial_part,
                })
            })
            .collect()
    }

    /// The day's spatial intercept effect on a raster: `ĝ` of the point's
    /// region (LMM, 0 for regions unobserved that day) or the interpolated
    /// `γ̂` (GMRF, NaN outside the mesh).
    pub fn spatial_surface(&self, day: i64, raster: &RasterSpec) -> Result<Vec<SurfacePoint>> {
        let b = self.block_of_day(day)?;
        let z = self.fit.block_latent(b);
        let points = raster.points();
        let values: Vec<f64> = match &self.layout {
            Layout::Lmm { .. } => points
                .iter()
                .map(|p| {
                    self.region_slot(b, &self.region_at(p[0], p[1]))
                        .map(|g| z[2 + g])
                        .unwrap_or(0.0)
                })
                .collect(),
            Layout::Gmrf { mesh } => mesh
                .project_lenient(&points)
                .into_iter()
                .map(|row| match row {
                    Some(row) => row.iter().map(|&(node, w)| w * z[node]).sum(),
                    None => f64::NAN,
                })
                .collect(),
        };
        Ok(points
            .iter()
            .zip(values)
            .map(|(p, value)| SurfacePoint {
                x: p[0],
                y: p[1],
                value,
            })
            .collect())
    }

    /// Posterior precision of one day's latents, reordered so that `u`, `v`
    /// come first and the remaining latents are grouped by region.
    pub fn precision_export(&self, built: &BuiltModel, day: i64) -> Result<PrecisionExport> {
        if built.kind != self.kind || built.days != self.days {
            return Err(Error::InvalidValue("model does not match the fit".into()));
        }
        let b = self.block_of_day(day)?;
        let q = built.model.posterior_precision(&self.fit.theta, b)?;
        let label = |index, effect: &str, region: String, node| LatentLabel {
            index,
            effect: effect.into(),
            region,
            node,
        };
        // (old index, label) in the exported order
        let mut order: Vec<(usize, LatentLabel)> = Vec::new();
        match &self.layout {
            Layout::Lmm { day_regions } => {
                let regions = &day_regions[b];
                let r = regions.len();
                order.push((0, label(0, "u", String::new(), None)));
                order.push((1, label(0, "v", String::new(), None)));
                for (g, name) in regions.iter().enumerate() {
                    order.push((2 + g, label(0, "g", name.clone(), None)));
                    order.push((2 + r + g, label(0, "h", name.clone(), None)));
                }
            }
            Layout::Gmrf { mesh } => {
                let m = mesh.n_nodes();
                order.push((2 * m, label(0, "u", String::new(), None)));
                order.push((2 * m + 1, label(0, "v", String::new(), None)));
                let mut nodes: Vec<(String, usize)> = mesh
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (self.region_at(p[0], p[1]), i))
                    .collect();
                nodes.sort();
                for (region, i) in nodes {
                    order.push((i, label(0, "gamma", region.clone(), Some(i))));
                    order.push((m + i, label(0, "psi", region, Some(i))));
                }
            }
        }
        let mut new_of = vec![0; q.dim()];
        for (new, (old, _)) in order.iter().enumerate() {
            new_of[*old] = new;
        }
        let trip: Vec<(usize, usize, f64)> = q
            .lower()
            .triplets()
            .map(|(i, j, v)| (new_of[i], new_of[j], v))
            .collect();
        let labels = order
            .into_iter()
            .enumerate()
            .map(|(new, (_, mut l))| {
                l.index = new;
                l
            })
            .collect();
        Ok(PrecisionExport {
            day,
            matrix: SymCsc::from_triplets(q.dim(), &trip),
            labels,
        })
    }

    /// Node-level posterior means `(γ̂, ψ̂)` of a GMRF day.
    pub fn field_means(&self, day: i64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mesh = self
            .mesh()
            .ok_or_else(|| Error::InvalidValue("LMM fits have no fields".into()))?;
        let z = self.fit.block_latent(self.block_of_day(day)?);
        let m = mesh.n_nodes();
        Ok((z[..m].to_vec(), z[m..2 * m].to_vec()))
    }

    /// SPDE parameters `(κ, τ)` of the γ and ψ fields.
    pub fn spde_params(&self) -> Result<(SpdeParams, SpdeParams)> {
        if self.kind != ModelKind::Gmrf {
            return Err(Error::InvalidValue("LMM fits have no fields".into()));
        }
        let t = &self.fit.theta;
        Ok((
            SpdeParams::from_range_sd(t[0], t[1])?,
            SpdeParams::from_range_sd(t[2], t[3])?,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests;
