//! Synthetic panels with known truth, and brute-force dense likelihoods.
//!
//! The field-truth simulator samples the analytic Matérn covariance at the
//! station locations, never the mesh, so fitted GMRFs are checked against
//! a truth that does not share their approximation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{assign_regions, Dataset, Observation, RegionGrid, Station};
use crate::engine::dense;
use crate::error::{Error, Result};
use crate::matern::{matern_cov, MaternParams, SpdeBasis, SpdeParams};
use crate::mesh::{assemble_fem, Mesh};
use crate::par;

/// Station cap for the dense sampling path.
pub const MAX_DENSE_STATIONS: usize = 3000;
/// Observation cap for [`dense_loglik_oracle`].
pub const MAX_ORACLE_ROWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationLayout {
    Uniform,
    /// Half the stations in Gaussian clusters, half uniform.
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthKind {
    /// Day effects plus per-day Matérn intercept and slope fields.
    Gmrf,
    /// Day effects plus per-day region effects.
    Lmm,
}

/// Generating parameters. Variances may be zero; field ranges must be
/// positive whenever the matching standard deviation is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub alpha: f64,
    /// One coefficient per covariate.
    pub beta: Vec<f64>,
    pub beta_aod: f64,
    pub var_u: f64,
    pub var_v: f64,
    pub var_g: f64,
    pub var_h: f64,
    pub range_gamma: f64,
    pub sd_gamma: f64,
    pub range_psi: f64,
    pub sd_psi: f64,
    pub var_eps: f64,
}

impl Default for TrueParams {
    fn default() -> Self {
        TrueParams {
            alpha: 10.0,
            beta: Vec::new(),
            beta_aod: 2.0,
            var_u: 1.0,
            var_v: 0.25,
            var_g: 1.0,
            var_h: 0.25,
            range_gamma: 30.0,
            sd_gamma: 1.5,
            range_psi: 30.0,
            sd_psi: 0.5,
            var_eps: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub layout: StationLayout,
    pub n_stations: usize,
    pub n_days: usize,
    /// Stations fall in `[0, domain_km]²`.
    pub domain_km: f64,
    pub truth: TruthKind,
    pub params: TrueParams,
    /// Side of the square regions used by the region-effect truth.
    pub region_cell_km: f64,
    pub seed: u64,
    /// Places stations from this seed instead of `seed`, so replicates can
    /// share one network.
    #[serde(default)]
    pub layout_seed: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            layout: StationLayout::Uniform,
            n_stations: 60,
            n_days: 30,
            domain_km: 100.0,
            truth: TruthKind::Gmrf,
            params: TrueParams::default(),
            region_cell_km: 25.0,
            seed: 1,
            layout_seed: None,
        }
    }
}

impl SimConfig {
    pub fn n_covariates(&self) -> usize {
        self.params.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_days == 0 {
            return Err(Error::InvalidValue("station and day counts must be positive".into()));
        }
        if self.n_stations > MAX_DENSE_STATIONS {
            return Err(Error::TooLarge(format!(
                "{} stations exceed the dense sampling limit of {MAX_DENSE_STATIONS}",
                self.n_stations
            )));
        }
        if !(self.domain_km > 0.0 && self.domain_km.is_finite()) {
            return Err(Error::InvalidValue(format!("domain size {}", self.domain_km)));
        }
        if !(self.region_cell_km > 0.0 && self.region_cell_km.is_finite()) {
            return Err(Error::InvalidValue(format!("region cell {}", self.region_cell_km)));
        }
        let p = &self.params;
        let variances = [p.var_u, p.var_v, p.var_g, p.var_h, p.var_eps, p.sd_gamma, p.sd_psi];
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidValue("variances must be finite and non-negative".into()));
        }
        for (range, sd) in [(p.range_gamma, p.sd_gamma), (p.range_psi, p.sd_psi)] {
            if sd > 0.0 && !(range > 0.0 && range.is_finite()) {
                return Err(Error::InvalidValue(format!("field range {range}")));
            }
        }
        let fixed = [p.alpha, p.beta_aod].into_iter().chain(p.beta.iter().copied());
        if fixed.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fixed effects".into()));
        }
        Ok(())
    }
}

/// Every latent draw behind a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: SimConfig,
    /// `u_t`, `v_t` per day.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Spatial intercept (γ or g) per day and station.
    pub spatial_intercept: Vec<Vec<f64>>,
    /// Spatial AOD slope (ψ or h) per day and station.
    pub spatial_slope: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn place_stations(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let d = cfg.domain_km;
    let uniform = |rng: &mut ChaCha8Rng| [d * rng.random::<f64>(), d * rng.random::<f64>()];
    match cfg.layout {
        StationLayout::Uniform => (0..cfg.n_stations).map(|_| uniform(rng)).collect(),
        StationLayout::Clustered => {
            let n_clustered = cfg.n_stations / 2;
            let n_centers = (n_clustered / 10).max(1);
            let centers: Vec<[f64; 2]> = (0..n_centers)
                .map(|_| {
                    [
                        d * (0.1 + 0.8 * rng.random::<f64>()),
                        d * (0.1 + 0.8 * rng.random::<f64>()),
                    ]
                })
                .collect();
            let spread = d / 25.0;
            let mut pts: Vec<[f64; 2]> = (0..n_clustered)
                .map(|i| {
                    let c = centers[i % n_centers];
                    [
                        (c[0] + spread * normal(rng)).clamp(0.0, d),
                        (c[1] + spread * normal(rng)).clamp(0.0, d),
                    ]
                })
                .collect();
            pts.extend((n_clustered..cfg.n_stations).map(|_| uniform(rng)));
            pts
        }
    }
}

/// Lower Cholesky factor of the Matérn covariance at `points`, with a
/// relative jitter of 1e-10 on the diagonal.
fn matern_factor(points: &[[f64; 2]], range: f64, sd: f64) -> Result<DMatrix<f64>> {
    let p = MaternParams::from_range_sd(range, sd)?;
    let n = points.len();
    let mut c = DMatrix::from_fn(n, n, |i, j| matern_cov(dist(points[i], points[j]), &p));
    for i in 0..n {
        c[(i, i)] *= 1.0 + 1e-10;
    }
    dense::cholesky_in_place(&mut c)?;
    Ok(c.lower_triangle())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn correlated_draw(factor: &Option<DMatrix<f64>>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match factor {
        Some(l) => {
            let z = DVector::from_fn(n, |_, _| normal(rng));
            (l * z).iter().copied().collect()
        }
        None => vec![0.0; n],
    }
}

/// Draws a full station × day panel. Stations are labelled `S0000`, ...,
/// days `1..=n_days`, and regions come from a grid of `region_cell_km`
/// cells anchored at the origin.
pub fn simulate(cfg: &SimConfig) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points = match cfg.layout_seed {
        Some(seed) => place_stations(cfg, &mut ChaCha8Rng::seed_from_u64(seed)),
        None => place_stations(cfg, &mut rng),
    };
    let grid = RegionGrid::new(cfg.region_cell_km, (0.0, 0.0))?;
    let stations: Vec<Station> = points
        .iter()
        .enumerate()
        .map(|(i, p)| Station::new(format!("S{i:04}"), p[0], p[1]))
        .collect();
    let stations = assign_regions(&stations, &grid);
    let p = &cfg.params;
    let n = stations.len();

    let (fg, fp) = match cfg.truth {
        TruthKind::Gmrf => (
            (p.sd_gamma > 0.0)
                .then(|| matern_factor(&points, p.range_gamma, p.sd_gamma))
                .transpose()?,
            (p.sd_psi > 0.0)
                .then(|| matern_factor(&points, p.range_psi, p.sd_psi))
                .transpose()?,
        ),
        TruthKind::Lmm => (None, None),
    };
    let mut region_ids: Vec<&str> = stations.iter().map(|s| s.region.as_deref().unwrap()).collect();
    region_ids.sort_unstable();
    region_ids.dedup();
    let group: Vec<usize> = stations
        .iter()
        .map(|s| region_ids.binary_search(&s.region.as_deref().unwrap()).unwrap())
        .collect();

    let k = cfg.n_covariates();
    let mut truth = Truth {
        config: cfg.clone(),
        u: Vec::with_capacity(cfg.n_days),
        v: Vec::with_capacity(cfg.n_days),
        spatial_intercept: Vec::with_capacity(cfg.n_days),
        spatial_slope: Vec::with_capacity(cfg.n_days),
    };
    let mut obs = Vec::with_capacity(n * cfg.n_days);
    for day in 0..cfg.n_days {
        let u = p.var_u.sqrt() * normal(&mut rng);
        let v = p.var_v.sqrt() * normal(&mut rng);
        let (gamma, psi) = match cfg.truth {
            TruthKind::Gmrf => (correlated_draw(&fg, n, &mut rng), correlated_draw(&fp, n, &mut rng)),
            TruthKind::Lmm => {
                let g: Vec<f64> = (0..region_ids.len())
                    .map(|_| p.var_g.sqrt() * normal(&mut rng))
                    .collect();
                let h: Vec<f64> = (0..region_ids.len())
                    .map(|_| p.var_h.sqrt() * normal(&mut rng))
                    .collect();
                (
                    group.iter().map(|&r| g[r]).collect(),
                    group.iter().map(|&r| h[r]).collect(),
                )
            }
        };
        for s in 0..n {
            let aod = normal(&mut rng);
            let covariates: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            let eps = p.var_eps.sqrt() * normal(&mut rng);
            let fixed = p.alpha + p.beta.iter().zip(&covariates).map(|(b, x)| b * x).sum::<f64>() + p.beta_aod * aod;
            let pm = fixed + u + gamma[s] + (v + psi[s]) * aod + eps;
            obs.push(Observation {
                station: s,
                day,
                pm,
                aod,
                covariates,
            });
        }
        truth.u.push(u);
        truth.v.push(v);
        truth.spatial_intercept.push(gamma);
        truth.spatial_slope.push(psi);
    }
    let names = (1..=k).map(|i| format!("x{i}")).collect();
    let data = Dataset::new(stations, obs, names, (1..=cfg.n_days as i64).collect())?;
    Ok((data, truth))
}

/// Replicate `r` uses seed `cfg.seed + r`.
pub fn simulate_replicates(cfg: &SimConfig, n: usize, parallel: bool) -> Result<Vec<(Dataset, Truth)>> {
    let configs: Vec<SimConfig> = (0..n as u64)
        .map(|r| SimConfig {
            seed: cfg.seed.wrapping_add(r),
            ..cfg.clone()
        })
        .collect();
    par::map(&configs, parallel, simulate).into_iter().collect()
}

/// Covariance model for [`dense_loglik_oracle`]. θ follows the order of
/// [`crate::models::LMM_THETA`] or [`crate::models::GMRF_THETA`].
#[derive(Debug, Clone)]
pub enum OracleModel {
    Lmm,
    /// Analytic Matérn covariances between stations.
    GmrfAnalytic,
    /// Field covariances `A Q⁻¹ Aᵀ` from the SPDE precision on a mesh.
    GmrfMesh(Mesh),
}

/// Dense marginal covariance of the response under `model`.
pub fn dense_covariance(data: &Dataset, model: &OracleModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = data.n_obs();
    if n > MAX_ORACLE_ROWS {
        return Err(Error::TooLarge(format!(
            "{n} rows exceed the oracle limit of {MAX_ORACLE_ROWS}"
        )));
    }
    let want = match model {
        OracleModel::Lmm => 5,
        _ => 7,
    };
    if theta.len() != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            got: theta.len(),
        });
    }
    if theta.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidValue("oracle parameters must be non-negative".into()));
    }
    let obs = data.observations();
    let st = data.stations();
    let m = st.len();
    // station-level field covariances (γ, ψ)
    let fields: Option<(DMatrix<f64>, DMatrix<f64>)> = match model {
        OracleModel::Lmm => None,
        OracleModel::GmrfAnalytic => {
            let cov = |range: f64, sd: f64| -> Result<DMatrix<f64>> {
                if sd == 0.0 {
                    return Ok(DMatrix::zeros(m, m));
                }
                let p = MaternParams::from_range_sd(range, sd)?;
                Ok(DMatrix::from_fn(m, m, |i, j| {
                    matern_cov(dist(st[i].location(), st[j].location()), &p)
                }))
            };
            Some((cov(theta[0], theta[1])?, cov(theta[2], theta[3])?))
        }
        OracleModel::GmrfMesh(mesh) => {
            let points: Vec<[f64; 2]> = st.iter().map(Station::location).collect();
            let a = mesh.project(&points)?.to_csc().to_dense();
            let basis = SpdeBasis::new(&assemble_fem(mesh));
            let cov = |range: f64, sd: f64| -> Result<DMatrix<f64>> {
                let q = basis.precision(&SpdeParams::from_range_sd(range, sd)?).to_dense();
                let qinv = q.try_inverse().ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
                Ok(&a * qinv * a.transpose())
            };
            Some((cov(theta[0], theta[1])?, cov(theta[2], theta[3])?))
        }
    };
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (a, b) = (&obs[i], &obs[j]);
            if a.day != b.day {
                continue;
            }
            let aa = a.aod * b.aod;
            let c = match &fields {
                None => {
                    let mut c = theta[0] + aa * theta[1];
                    if st[a.station].region == st[b.station].region {
                        c += theta[2] + aa * theta[3];
                    }
                    c
                }
                Some((kg, kp)) => {
                    theta[4] + aa * theta[5] + kg[(a.station, b.station)] + aa * kp[(a.station, b.station)]
                }
            };
            sigma[(i, j)] = c;
            sigma[(j, i)] = c;
        }
        sigma[(i, i)] += theta[if fields.is_none() { 4 } else { 6 }];
    }
    Ok(sigma)
}

/// `log N(y | Xβ, Σ)` with `X = [1, covariates, AOD]` and `Σ` from
/// [`dense_covariance`], evaluated by a dense Cholesky.
pub fn dense_loglik_oracle(data: &Dataset, model: &OracleModel, theta: &[f64], beta: &[f64]) -> Result<f64> {
    let sigma = dense_covariance(data, model, theta)?;
    let k = data.n_covariates() + 2;
    if beta.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: beta.len(),
        });
    }
    let r = DVector::from_iterator(
        data.n_obs(),
        data.observations().iter().map(|o| {
            let fixed = beta[0]
                + o.covariates
                    .iter()
                    .zip(&beta[1..k - 1])
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
                + beta[k - 1] * o.aod;
            o.pm - fixed
        }),
    );
    let chol = sigma.cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * (data.n_obs() as f64 * (2.0 * PI).ln() + logdet + quad))
}
