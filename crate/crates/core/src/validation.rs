//! Cross-validation plans (random K-fold and leave-p-stations-out with an
//! h-km exclusion buffer), holdout metrics, paired model comparison and the
//! RMSE-versus-h sweep.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, RegionGrid};
use crate::engine::{Bounds, EngineConfig};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::models::{build, ModelKind, Target};
use crate::par;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Kfold { k: usize },
    LpoHblock { p: usize, h: f64, n_iter: usize },
}

impl Scheme {
    pub fn label(&self) -> String {
        match self {
            Scheme::Kfold { k } => format!("{k}-fold"),
            Scheme::LpoHblock { .. } => "LPO-h-block".to_string(),
        }
    }
}

/// Row ids are indices into the dataset the plan was made for, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Station ids; empty for K-fold.
    pub test_stations: Vec<String>,
    pub dropped_stations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub scheme: Scheme,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Hash of the scheme and every fold's row sets.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.scheme.label().hash(&mut h);
        self.seed.hash(&mut h);
        for f in &self.folds {
            f.train.hash(&mut h);
            f.test.hash(&mut h);
        }
        h.finish()
    }
}

/// Fold of each row when rows are dealt round-robin in the order `perm`.
pub fn kfold_assignment(perm: &[usize], k: usize) -> Vec<usize> {
    let mut fold = vec![0; perm.len()];
    for (pos, &row) in perm.iter().enumerate() {
        fold[row] = pos % k;
    }
    fold
}

/// Uniform random partition of the rows into `k` folds whose sizes differ
/// by at most one.
pub fn make_folds_kfold(data: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let n = data.n_obs();
    if k < 2 || k > n {
        return Err(Error::BadK { k, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = kfold_assignment(&perm, k);
    let folds = (0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&r| assignment[r] == f);
            Fold {
                train,
                test,
                test_stations: Vec::new(),
                dropped_stations: Vec::new(),
            }
        })
        .collect();
    Ok(FoldPlan {
        scheme: Scheme::Kfold { k },
        seed,
        folds,
    })
}

/// Splits station indices given the test set: every other station closer
/// than `h` (strictly) to a test station is dropped, the rest train.
pub fn hblock_exclusion(points: &[[f64; 2]], test: &[usize], h: f64) -> (Vec<usize>, Vec<usize>) {
    let is_test: BTreeSet<usize> = test.iter().copied().collect();
    let mut train = Vec::new();
    let mut dropped = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if is_test.contains(&i) {
            continue;
        }
        let near = test.iter().any(|&t| {
            let q = points[t];
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() < h
        });
        if near {
            dropped.push(i);
        } else {
            train.push(i);
        }
    }
    (train, dropped)
}

/// `n_iter` draws of `p` test stations; iteration `i` samples with seed
/// `seed + i`, so plans that differ only in `h` share their test stations.
pub fn make_folds_lpo_hblock(data: &Dataset, p: usize, h: f64, n_iter: usize, seed: u64) -> Result<FoldPlan> {
    let stations = data.stations();
    if p == 0 || p >= stations.len() {
        return Err(Error::InvalidValue(format!(
            "p = {p} test stations out of {}",
            stations.len()
        )));
    }
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::InvalidValue(format!("h = {h}")));
    }
    if n_iter == 0 {
        return Err(Error::InvalidValue("n_iter must be positive".into()));
    }
    let points: Vec<[f64; 2]> = stations.iter().map(|s| s.location()).collect();
    let by_station = data.rows_by_station();
    let rows_of = |ids: &[usize]| {
        let mut rows: Vec<usize> = ids.iter().flat_map(|&s| by_station[s].iter().copied()).collect();
        rows.sort_unstable();
        rows
    };
    let mut folds = Vec::with_capacity(n_iter);
    for iteration in 0..n_iter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(iteration as u64));
        let mut test = index::sample(&mut rng, stations.len(), p).into_vec();
        test.sort_unstable();
        let (train, dropped) = hblock_exclusion(&points, &test, h);
        let train_rows = rows_of(&train);
        if train_rows.is_empty() {
            return Err(Error::EmptyTrainSet { iteration });
        }
        folds.push(Fold {
            train: train_rows,
            test: rows_of(&test),
            test_stations: test.iter().map(|&s| stations[s].id.clone()).collect(),
            dropped_stations: dropped.iter().map(|&s| stations[s].id.clone()).collect(),
        });
    }
    Ok(FoldPlan {
        scheme: Scheme::LpoHblock { p, h, n_iter },
        seed,
        folds,
    })
}

fn check_pair(yhat: &[f64], y: &[f64]) -> Result<()> {
    if yhat.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidValue("no predictions".into()));
    }
    Ok(())
}

pub fn mse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(yhat, y)?;
    Ok(yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mse(yhat, y)?.sqrt())
}

/// `1 − SSE/SST` around the mean of `y`.
pub fn r2(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(yhat, y)?;
    if y.len() < 2 {
        return Err(Error::InvalidValue("R² needs at least two values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateResponse);
    }
    let sse: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Squared Pearson correlation of predictions and observations.
pub fn squared_correlation(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(yhat, y)?;
    let n = y.len() as f64;
    let (ma, mb) = (yhat.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (a, b) in yhat.iter().zip(y) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateResponse);
    }
    Ok(sab * sab / (saa * sbb))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    squared_correlation(&ranks(x), &ranks(y)).map(|r2| {
        let (rx, ry) = (ranks(x), ranks(y));
        let n = rx.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        r2.sqrt().copysign(cov)
    })
}

/// Mean with a normal-approximation 95% interval, `mean ± z·sd/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidValue("no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = Z95 * sd / n.sqrt();
        Ok(MeanCi {
            n: values.len(),
            mean,
            lower: mean - half,
            upper: mean + half,
        })
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the fold's holdout response is constant.
    pub r2: Option<f64>,
}

/// One model under one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub scheme: Scheme,
    pub plan_fingerprint: u64,
    pub folds: Vec<FoldMetrics>,
    /// Pooled over every holdout prediction.
    pub rmse: f64,
    pub r2: f64,
    /// `None` when the predictions are constant.
    pub r2_squared_correlation: Option<f64>,
    /// Mean over folds of training rows per test row.
    pub train_test_ratio: f64,
    #[serde(skip)]
    pub holdout: Vec<(usize, f64)>,
}

/// Fold-wise `rmse(a) − rmse(b)` under a shared plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub a: String,
    pub b: String,
    pub scheme: Scheme,
    pub differences: Vec<f64>,
    pub ci: MeanCi,
}

pub fn paired_difference(a: &ModelEval, b: &ModelEval) -> Result<PairedDifference> {
    if a.plan_fingerprint != b.plan_fingerprint || a.folds.len() != b.folds.len() {
        return Err(Error::InvalidValue(format!(
            "{} and {} were evaluated on different fold plans",
            a.model, b.model
        )));
    }
    let differences: Vec<f64> = a.folds.iter().zip(&b.folds).map(|(x, y)| x.rmse - y.rmse).collect();
    Ok(PairedDifference {
        a: a.model.clone(),
        b: b.model.clone(),
        scheme: a.scheme,
        ci: MeanCi::of(&differences)?,
        differences,
    })
}

/// Runs `predict(train, test)` on every fold and aggregates.
pub fn run_cv_with<F>(data: &Dataset, plan: &FoldPlan, name: &str, parallel: bool, predict: F) -> Result<ModelEval>
where
    F: Fn(&Dataset, &Dataset) -> Result<Vec<f64>> + Sync,
{
    let indexed: Vec<(usize, &Fold)> = plan.folds.iter().enumerate().collect();
    let outcomes = par::map(&indexed, parallel, |&(i, f)| -> Result<Vec<f64>> {
        let train = data.subset_rows(&f.train);
        let test = data.subset_rows(&f.test);
        let yhat = predict(&train, &test).map_err(|e| Error::Fold {
            fold: i,
            source: Box::new(e),
        })?;
        if yhat.len() != f.test.len() {
            return Err(Error::Fold {
                fold: i,
                source: Box::new(Error::DimensionMismatch {
                    expected: f.test.len(),
                    got: yhat.len(),
                }),
            });
        }
        Ok(yhat)
    });
    let y = data.response();
    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut holdout = Vec::new();
    let mut ratio = 0.0;
    for (i, (f, out)) in plan.folds.iter().zip(outcomes).enumerate() {
        let yhat = out?;
        let yt: Vec<f64> = f.test.iter().map(|&r| y[r]).collect();
        let m = mse(&yhat, &yt)?;
        folds.push(FoldMetrics {
            fold: i,
            n_train: f.train.len(),
            n_test: f.test.len(),
            mse: m,
            rmse: m.sqrt(),
            r2: r2(&yhat, &yt).ok(),
        });
        ratio += f.train.len() as f64 / f.test.len() as f64;
        holdout.extend(f.test.iter().copied().zip(yhat));
    }
    let (pred, obs): (Vec<f64>, Vec<f64>) = holdout.iter().map(|&(r, p)| (p, y[r])).unzip();
    Ok(ModelEval {
        model: name.to_string(),
        scheme: plan.scheme,
        plan_fingerprint: plan.fingerprint(),
        rmse: rmse(&pred, &obs)?,
        r2: r2(&pred, &obs)?,
        r2_squared_correlation: squared_correlation(&pred, &obs).ok(),
        train_test_ratio: ratio / plan.folds.len() as f64,
        folds,
        holdout,
    })
}

/// What a fold fit needs beyond the data.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub kind: ModelKind,
    /// Shared mesh covering every station (GMRF only).
    pub mesh: Option<Mesh>,
    pub region_grid: Option<RegionGrid>,
    /// Starting θ, clamped into each fold's bounds; defaults otherwise.
    pub start: Option<Vec<f64>>,
}

impl ModelSettings {
    pub fn new(kind: ModelKind, mesh: Option<Mesh>) -> Self {
        ModelSettings {
            kind,
            mesh,
            region_grid: None,
            start: None,
        }
    }
}

/// Fits on `train` and predicts the rows of `test` in order.
pub fn fit_predict(train: &Dataset, test: &Dataset, settings: &ModelSettings, cfg: &EngineConfig) -> Result<Vec<f64>> {
    let built = build(settings.kind, train, settings.mesh.as_ref())?;
    let bounds: Bounds = built.default_bounds()?;
    let theta0 = match &settings.start {
        Some(s) => s
            .iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect(),
        None => built.initial_theta()?,
    };
    let mut fitted = built.fit_from(&theta0, &bounds, cfg)?;
    fitted.region_grid = settings.region_grid;
    Ok(fitted
        .predict(&Target::from_dataset(test))?
        .into_iter()
        .map(|p| p.yhat)
        .collect())
}

/// Cross-validates one model; folds run on the rayon pool when
/// `cfg.parallel` is set, each fold fit sequentially.
pub fn run_cv(data: &Dataset, settings: &ModelSettings, plan: &FoldPlan, cfg: &EngineConfig) -> Result<ModelEval> {
    let inner = EngineConfig {
        parallel: false,
        ..cfg.clone()
    };
    run_cv_with(data, plan, &settings.kind.to_string(), cfg.parallel, |train, test| {
        fit_predict(train, test, settings, &inner)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluations: Vec<ModelEval>,
    pub paired: Vec<PairedDifference>,
}

/// Two decimals, as in the summary table.
pub fn format_metric(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    /// Collects evaluations and pairs every two models that share a plan.
    pub fn new(evaluations: Vec<ModelEval>) -> Self {
        let mut paired = Vec::new();
        for (i, a) in evaluations.iter().enumerate() {
            for b in &evaluations[i + 1..] {
                if let Ok(d) = paired_difference(a, b) {
                    paired.push(d);
                }
            }
        }
        EvalReport { evaluations, paired }
    }

    /// One row per model, one RMSE and R² column pair per scheme.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut schemes: Vec<String> = Vec::new();
        let mut models: Vec<String> = Vec::new();
        for e in &self.evaluations {
            if !schemes.contains(&e.scheme.label()) {
                schemes.push(e.scheme.label());
            }
            if !models.contains(&e.model) {
                models.push(e.model.clone());
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string()];
        for s in &schemes {
            header.push(format!("{s} RMSE"));
            header.push(format!("{s} R2"));
        }
        w.write_record(&header)?;
        for m in &models {
            let mut rec = vec![m.clone()];
            for s in &schemes {
                match self
                    .evaluations
                    .iter()
                    .find(|e| &e.model == m && &e.scheme.label() == s)
                {
                    Some(e) => {
                        rec.push(format_metric(e.rmse));
                        rec.push(format_metric(e.r2));
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long form: one row per model, scheme and fold.
    pub fn write_folds_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "scheme", "fold", "n_train", "n_test", "rmse", "r2"])?;
        for e in &self.evaluations {
            for f in &e.folds {
                w.write_record([
                    e.model.clone(),
                    e.scheme.label(),
                    f.fold.to_string(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                    f.rmse.to_string(),
                    f.r2.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_paired_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["a", "b", "scheme", "n", "mean_rmse_difference", "ci_lower", "ci_upper"])?;
        for d in &self.paired {
            w.write_record([
                d.a.clone(),
                d.b.clone(),
                d.scheme.label(),
                d.ci.n.to_string(),
                d.ci.mean.to_string(),
                d.ci.lower.to_string(),
                d.ci.upper.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: f64,
    pub model: String,
    pub iter: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub h: f64,
    pub model: String,
    pub ci: MeanCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepResult {
    /// Tidy `h,model,iter,rmse`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "model", "iter", "rmse"])?;
        for r in &self.rows {
            w.write_record([r.h.to_string(), r.model.clone(), r.iter.to_string(), r.rmse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "model", "n", "mean_rmse", "ci_lower", "ci_upper"])?;
        for s in &self.summary {
            w.write_record([
                s.h.to_string(),
                s.model.clone(),
                s.ci.n.to_string(),
                s.ci.mean.to_string(),
                s.ci.lower.to_string(),
                s.ci.upper.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean RMSE per h for one model, in sweep order.
    pub fn curve(&self, model: &str) -> Vec<(f64, f64)> {
        self.summary
            .iter()
            .filter(|s| s.model == model)
            .map(|s| (s.h, s.ci.mean))
            .collect()
    }
}

/// LPO-h-block RMSE per iteration for every `h` and model; all models and
/// radii use the same seed, hence the same test stations per iteration.
pub fn h_sweep(
    data: &Dataset,
    models: &[ModelSettings],
    p: usize,
    hs: &[f64],
    n_iter: usize,
    seed: u64,
    cfg: &EngineConfig,
) -> Result<SweepResult> {
    if hs.is_empty() || hs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidValue("h list must be non-empty and ascending".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &h in hs {
        let plan = make_folds_lpo_hblock(data, p, h, n_iter, seed)?;
        for m in models {
            let eval = run_cv(data, m, &plan, cfg)?;
            let per_iter: Vec<f64> = eval.folds.iter().map(|f| f.rmse).collect();
            rows.extend(per_iter.iter().enumerate().map(|(iter, &rmse)| SweepRow {
                h,
                model: eval.model.clone(),
                iter,
                rmse,
            }));
            summary.push(SweepSummary {
                h,
                model: eval.model.clone(),
                ci: MeanCi::of(&per_iter)?,
            });
        }
    }
    Ok(SweepResult { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Observation, Station};
    use crate::synth::{simulate, SimConfig, TruthKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn rows_panel(n: usize) -> Dataset {
        let stations = vec![Station::new("a", 0.0, 0.0)];
        let obs = (0..n)
            .map(|d| Observation {
                station: 0,
                day: d,
                pm: d as f64,
                aod: 0.0,
                covariates: vec![],
            })
            .collect();
        Dataset::new(stations, obs, vec![], (0..n as i64).collect()).unwrap()
    }

    fn line_panel() -> Dataset {
        let stations = (0..5)
            .map(|i| Station::new(format!("s{}", 10 * i), 10.0 * i as f64, 0.0))
            .collect();
        let obs = (0..5)
            .flat_map(|s| {
                (0..3).map(move |d| Observation {
                    station: s,
                    day: d,
                    pm: (s + d) as f64,
                    aod: 0.1,
                    covariates: vec![],
                })
            })
            .collect();
        Dataset::new(stations, obs, vec![], vec![1, 2, 3]).unwrap()
    }

    fn assert_partition(plan: &FoldPlan, n: usize) {
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert!(
            sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1,
            "{sizes:?}"
        );
        for f in &plan.folds {
            assert_eq!(f.train.len() + f.test.len(), n);
            assert!(f.train.iter().all(|r| f.test.binary_search(r).is_err()));
        }
    }

    #[test]
    fn kfold_sizes() {
        let plan = make_folds_kfold(&rows_panel(100), 10, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 10));
        assert_partition(&plan, 100);
        let plan = make_folds_kfold(&rows_panel(101), 10, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 10 || f.test.len() == 11));
        assert_partition(&plan, 101);
        assert_partition(&make_folds_kfold(&rows_panel(1000), 10, 4).unwrap(), 1000);
    }

    #[test]
    fn kfold_rejects_bad_k() {
        let d = rows_panel(5);
        assert!(matches!(make_folds_kfold(&d, 1, 0), Err(Error::BadK { k: 1, n: 5 })));
        assert!(matches!(make_folds_kfold(&d, 6, 0), Err(Error::BadK { k: 6, n: 5 })));
    }

    #[test]
    fn kfold_is_deterministic() {
        let d = rows_panel(57);
        assert_eq!(make_folds_kfold(&d, 7, 3).unwrap(), make_folds_kfold(&d, 7, 3).unwrap());
        assert_ne!(make_folds_kfold(&d, 7, 3).unwrap(), make_folds_kfold(&d, 7, 4).unwrap());
    }

    proptest! {
        #[test]
        fn kfold_assignment_is_permutation_equivariant(n in 2usize..200, k in 2usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut sigma: Vec<usize> = (0..n).collect();
            sigma.shuffle(&mut rng);
            let base = kfold_assignment(&perm, k);
            let relabeled: Vec<usize> = perm.iter().map(|&r| sigma[r]).collect();
            let moved = kfold_assignment(&relabeled, k);
            for r in 0..n {
                prop_assert_eq!(moved[sigma[r]], base[r]);
            }
        }

        #[test]
        fn hblock_never_keeps_close_training_stations(seed in 0u64..200, h in 0.0f64..40.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..60).map(|_| [100.0 * rng.random::<f64>(), 100.0 * rng.random::<f64>()]).collect();
            let test = index::sample(&mut rng, 60, 6).into_vec();
            let (train, dropped) = hblock_exclusion(&pts, &test, h);
            prop_assert_eq!(train.len() + dropped.len() + test.len(), 60);
            for &a in &train {
                for &t in &test {
                    let d = ((pts[a][0] - pts[t][0]).powi(2) + (pts[a][1] - pts[t][1]).powi(2)).sqrt();
                    prop_assert!(d >= h);
                }
            }
        }
    }

    #[test]
    fn hblock_line_example() {
        let pts: Vec<[f64; 2]> = (0..5).map(|i| [10.0 * i as f64, 0.0]).collect();
        let (train, dropped) = hblock_exclusion(&pts, &[2], 15.0);
        assert_eq!(train, vec![0, 4]);
        assert_eq!(dropped, vec![1, 3]);
        // d = h is kept
        let (train, dropped) = hblock_exclusion(&pts, &[2], 10.0);
        assert_eq!(train, vec![0, 1, 3, 4]);
        assert!(dropped.is_empty());
    }

    #[test]
    fn lpo_with_zero_h_drops_nothing() {
        let d = line_panel();
        let plan = make_folds_lpo_hblock(&d, 2, 0.0, 4, 9).unwrap();
        for f in &plan.folds {
            assert!(f.dropped_stations.is_empty());
            assert_eq!(f.train.len() + f.test.len(), d.n_obs());
            assert_eq!(f.test.len(), 6);
        }
    }

    #[test]
    fn lpo_reports_empty_training_set() {
        let d = line_panel();
        assert!(matches!(
            make_folds_lpo_hblock(&d, 1, 100.0, 3, 0),
            Err(Error::EmptyTrainSet { iteration: 0 })
        ));
    }

    #[test]
    fn lpo_shares_test_stations_across_h() {
        let (d, _) = simulate(&SimConfig {
            n_stations: 50,
            n_days: 2,
            ..Default::default()
        })
        .unwrap();
        let a = make_folds_lpo_hblock(&d, 5, 0.0, 6, 11).unwrap();
        let b = make_folds_lpo_hblock(&d, 5, 20.0, 6, 11).unwrap();
        for (x, y) in a.folds.iter().zip(&b.folds) {
            assert_eq!(x.test_stations, y.test_stations);
        }
    }

    #[test]
    fn lpo_audit_on_random_cloud() {
        let (d, _) = simulate(&SimConfig {
            n_stations: 100,
            n_days: 1,
            ..Default::default()
        })
        .unwrap();
        let plan = make_folds_lpo_hblock(&d, 10, 25.0, 10, 2).unwrap();
        let lookup = d.station_lookup();
        for f in &plan.folds {
            let test: Vec<[f64; 2]> = f
                .test_stations
                .iter()
                .map(|s| d.stations()[lookup[s.as_str()]].location())
                .collect();
            for &r in &f.train {
                let p = d.station_of(r).location();
                for q in &test {
                    assert!(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= 25.0);
                }
            }
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert_relative_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.53553, epsilon = 1e-5);
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(r2(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 1.0);
        let y = [1.0, 2.0, 6.0];
        assert_relative_eq!(r2(&[3.0; 3], &y).unwrap(), 0.0);
        assert!(matches!(r2(&[1.0, 2.0], &[2.0, 2.0]), Err(Error::DegenerateResponse)));
        assert_eq!(format_metric(2.6789), "2.68");
        assert_eq!(format_metric(0.8312), "0.83");
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap(),
            1.0
        );
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.8,
            epsilon = 1e-12
        );
    }

    #[test]
    fn aggregate_rmse_is_weighted_mean_of_fold_mse() {
        let d = rows_panel(103);
        let plan = make_folds_kfold(&d, 10, 5).unwrap();
        let e = run_cv_with(&d, &plan, "jitter", false, |_, test| {
            Ok(test.observations().iter().map(|o| o.pm + (o.pm * 0.37).sin()).collect())
        })
        .unwrap();
        let weighted: f64 = e.folds.iter().map(|f| f.n_test as f64 * f.mse).sum::<f64>() / d.n_obs() as f64;
        assert!((e.rmse * e.rmse - weighted).abs() < 1e-10);
        assert_eq!(e.holdout.len(), d.n_obs());
    }

    #[test]
    fn training_mean_predictor_has_zero_skill() {
        let (d, _) = simulate(&SimConfig {
            n_stations: 50,
            n_days: 20,
            params: crate::synth::TrueParams {
                var_u: 0.0,
                var_v: 0.0,
                sd_gamma: 0.0,
                sd_psi: 0.0,
                beta_aod: 0.0,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap();
        let plan = make_folds_kfold(&d, 10, 1).unwrap();
        let e = run_cv_with(&d, &plan, "mean", true, |train, test| {
            let y = train.response();
            let m = y.iter().sum::<f64>() / y.len() as f64;
            Ok(vec![m; test.n_obs()])
        })
        .unwrap();
        assert!(e.r2.abs() < 0.02, "{}", e.r2);
    }

    #[test]
    fn same_model_twice_has_zero_paired_difference() {
        let (d, _) = simulate(&SimConfig {
            n_stations: 30,
            n_days: 4,
            truth: TruthKind::Lmm,
            ..Default::default()
        })
        .unwrap();
        let plan = make_folds_kfold(&d, 5, 2).unwrap();
        let s = ModelSettings::new(ModelKind::Lmm, None);
        let cfg = EngineConfig::default();
        let a = run_cv(&d, &s, &plan, &cfg).unwrap();
        let b = run_cv(&d, &s, &plan, &cfg).unwrap();
        let diff = paired_difference(&a, &b).unwrap();
        assert!(diff.differences.iter().all(|&x| x == 0.0));
        assert_eq!((diff.ci.lower, diff.ci.upper), (0.0, 0.0));
        let other = make_folds_kfold(&d, 5, 3).unwrap();
        let c = run_cv_with(&d, &other, "lmm", false, |_, t| Ok(vec![0.0; t.n_obs()])).unwrap();
        assert!(paired_difference(&a, &c).is_err());
    }

    #[test]
    fn fold_errors_carry_the_fold_index() {
        let d = rows_panel(20);
        let plan = make_folds_kfold(&d, 4, 0).unwrap();
        let err = run_cv_with(&d, &plan, "bad", false, |_, t| {
            if t.observations().iter().any(|o| o.pm == 7.0) {
                Err(Error::NonFinite("x".into()))
            } else {
                Ok(vec![0.0; t.n_obs()])
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Fold { .. }));
    }

    #[test]
    fn report_table_shape() {
        let d = rows_panel(40);
        let k = make_folds_kfold(&d, 10, 0).unwrap();
        let evals = ["lmm", "gmrf"]
            .iter()
            .map(|m| {
                run_cv_with(&d, &k, m, false, |_, t| {
                    Ok(t.response().iter().map(|v| v + 1.0).collect())
                })
                .unwrap()
            })
            .collect();
        let report = EvalReport::new(evals);
        assert_eq!(report.paired.len(), 1);
        let mut buf = Vec::new();
        report.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,10-fold RMSE,10-fold R2");
        assert_eq!(lines[1], "lmm,1.00,0.99");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn sweep_at_zero_h_matches_plain_leave_p_out() {
        let (d, _) = simulate(&SimConfig {
            n_stations: 25,
            n_days: 3,
            truth: TruthKind::Lmm,
            ..Default::default()
        })
        .unwrap();
        let s = [ModelSettings::new(ModelKind::Lmm, None)];
        let cfg = EngineConfig::default();
        let sweep = h_sweep(&d, &s, 3, &[0.0, 30.0], 2, 4, &cfg).unwrap();
        let plain = run_cv(&d, &s[0], &make_folds_lpo_hblock(&d, 3, 0.0, 2, 4).unwrap(), &cfg).unwrap();
        let at_zero: Vec<f64> = sweep.rows.iter().filter(|r| r.h == 0.0).map(|r| r.rmse).collect();
        assert_eq!(at_zero, plain.folds.iter().map(|f| f.rmse).collect::<Vec<_>>());
        assert_eq!(sweep.summary.len(), 2);
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("h,model,iter,rmse\n0,lmm,0,"));
        assert!(h_sweep(&d, &s, 3, &[10.0, 5.0], 2, 4, &cfg).is_err());
    }

    #[test]
    fn mean_ci_normal_band() {
        let ci = MeanCi::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        assert_relative_eq!(ci.mean, 2.5);
        assert_relative_eq!(ci.upper - ci.mean, Z95 * sd / 2.0, max_relative = 1e-12);
        assert!(ci.excludes_zero());
    }
}
