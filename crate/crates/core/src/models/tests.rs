use super::*;
use crate::domain::{assign_regions, Observation};
use crate::matern::{matern_cov, MaternParams};
use crate::mesh::Projector;
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn panel(stations: Vec<Station>, n_days: usize, n_cov: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    for d in 0..n_days {
        for s in 0..stations.len() {
            obs.push(Observation {
                station: s,
                day: d,
                pm: 10.0 + rng.random::<f64>() * 5.0,
                aod: 0.2 + rng.random::<f64>(),
                covariates: (0..n_cov).map(|_| rng.random::<f64>()).collect(),
            });
        }
    }
    let names = (0..n_cov).map(|k| format!("c{k}")).collect();
    Dataset::new(stations, obs, names, (1..=n_days as i64).collect()).unwrap()
}

fn gridded_stations(n: usize, seed: u64, cell: f64) -> Vec<Station> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Station> = (0..n)
        .map(|i| {
            Station::new(
                format!("S{i}"),
                0.2 + 3.6 * rng.random::<f64>(),
                0.2 + 3.6 * rng.random::<f64>(),
            )
        })
        .collect();
    assign_regions(&raw, &RegionGrid::new(cell, (0.0, 0.0)).unwrap())
}

fn dense_marginal_cov(m: &LinearGaussianModel, theta: &[f64]) -> DMatrix<f64> {
    let b = m.latent_design().to_dense();
    let q = m.prior_precision(theta).unwrap().to_dense();
    let qinv = q.try_inverse().unwrap();
    let mut s = &b * qinv * b.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += theta[m.noise_index()];
    }
    s
}

#[test]
fn lmm_latent_counts() {
    let one = panel(
        vec![
            Station::new("a", 0.0, 0.0).with_region("r"),
            Station::new("b", 1.0, 0.0).with_region("r"),
        ],
        1,
        0,
        1,
    );
    assert_eq!(build_lmm(&one).unwrap().model.n_latent(), 4);
    let st: Vec<Station> = (0..6)
        .map(|i| Station::new(format!("s{i}"), i as f64, 0.0).with_region(format!("r{}", i % 3)))
        .collect();
    assert_eq!(build_lmm(&panel(st, 2, 1, 2)).unwrap().model.n_latent(), 16);
}

#[test]
fn lmm_only_observed_pairs_get_region_effects() {
    let st = vec![
        Station::new("a", 0.0, 0.0).with_region("r0"),
        Station::new("b", 1.0, 0.0).with_region("r1"),
    ];
    let obs = vec![
        Observation {
            station: 0,
            day: 0,
            pm: 1.0,
            aod: 0.5,
            covariates: vec![],
        },
        Observation {
            station: 1,
            day: 0,
            pm: 2.0,
            aod: 0.1,
            covariates: vec![],
        },
        Observation {
            station: 0,
            day: 1,
            pm: 3.0,
            aod: 0.3,
            covariates: vec![],
        },
        Observation {
            station: 0,
            day: 1,
            pm: 3.0,
            aod: 0.3,
            covariates: vec![],
        },
    ];
    let obs = obs[..3].to_vec();
    let data = Dataset::new(st, obs, vec![], vec![1, 2]).unwrap();
    let built = build_lmm(&data).unwrap();
    assert_eq!(built.model.n_latent(), 6 + 4);
    let Layout::Lmm { day_regions } = &built.layout else {
        panic!()
    };
    assert_eq!(
        day_regions,
        &vec![vec!["r0".to_string(), "r1".into()], vec!["r0".into()]]
    );
}

#[test]
fn lmm_design_and_prior_follow_layout() {
    let st = gridded_stations(12, 3, 2.0);
    let data = panel(st, 2, 1, 4);
    let built = build_lmm(&data).unwrap();
    let m = &built.model;
    let b = m.latent_design().to_dense();
    let Layout::Lmm { day_regions } = &built.layout else {
        panic!()
    };
    for (r, o) in data.observations().iter().enumerate() {
        let off = m.block_offsets()[o.day];
        let regions = &day_regions[o.day];
        let g = regions
            .iter()
            .position(|x| Some(x) == data.stations()[o.station].region.as_ref())
            .unwrap();
        let mut want = vec![0.0; m.n_latent()];
        want[off] = 1.0;
        want[off + 1] = o.aod;
        want[off + 2 + g] = 1.0;
        want[off + 2 + regions.len() + g] = o.aod;
        for (c, w) in want.iter().enumerate() {
            assert_eq!(b[(r, c)], *w);
        }
    }
    let theta = [0.5, 0.25, 2.0, 4.0, 1.0];
    let q = m.prior_precision(&theta).unwrap();
    assert_eq!(q.nnz(), m.n_latent());
    let d = q.diag();
    for day in 0..2 {
        let off = m.block_offsets()[day];
        let r = day_regions[day].len();
        assert_eq!(d[off], 2.0);
        assert_eq!(d[off + 1], 4.0);
        assert!(d[off + 2..off + 2 + r].iter().all(|&v| v == 0.5));
        assert!(d[off + 2 + r..off + 2 + 2 * r].iter().all(|&v| v == 0.25));
    }
}

#[test]
fn lmm_marginal_covariance_structure() {
    // Independent across days; within a day, rows of different regions
    // share only the day effects u_t + v_t·AOD.
    let data = panel(gridded_stations(10, 5, 2.0), 3, 0, 6);
    let built = build_lmm(&data).unwrap();
    let theta = [0.7, 0.3, 1.1, 0.4, 0.2];
    let s = dense_marginal_cov(&built.model, &theta);
    let obs = data.observations();
    for i in 0..obs.len() {
        for j in 0..obs.len() {
            let (a, b) = (&obs[i], &obs[j]);
            let same_region = data.stations()[a.station].region == data.stations()[b.station].region;
            let want = if a.day != b.day {
                0.0
            } else {
                let day = theta[0] + a.aod * b.aod * theta[1];
                let region = if same_region {
                    theta[2] + a.aod * b.aod * theta[3]
                } else {
                    0.0
                };
                day + region + if i == j { theta[4] } else { 0.0 }
            };
            assert!((s[(i, j)] - want).abs() < 1e-10, "{i},{j}: {} vs {want}", s[(i, j)]);
        }
    }
    assert_relative_eq!(s.clone(), s.transpose(), epsilon = 1e-12);
    assert!(s.symmetric_eigenvalues().min() > 0.0);
}

#[test]
fn lmm_without_regions_is_rejected() {
    let data = panel(vec![Station::new("a", 0.0, 0.0)], 1, 0, 1);
    assert!(matches!(build_lmm(&data), Err(Error::InvalidValue(_))));
}

#[test]
fn gmrf_layout_and_node_rows() {
    let mesh = Mesh::regular_grid(0.0, 4.0, 0.0, 4.0, 4, 4);
    let st = vec![Station::new("node", 1.0, 2.0), Station::new("mid", 1.5, 2.25)];
    let data = panel(st, 1, 0, 7);
    let built = build_gmrf(&data, &mesh).unwrap();
    let m = mesh.n_nodes();
    assert_eq!(built.model.n_latent(), 2 * m + 2);
    let b = built.model.latent_design().to_dense();
    let aod = data.observations()[0].aod;
    let gamma: Vec<usize> = (0..m).filter(|&c| b[(0, c)] != 0.0).collect();
    let psi: Vec<usize> = (m..2 * m).filter(|&c| b[(0, c)] != 0.0).collect();
    assert_eq!(gamma.len(), 1);
    assert_eq!(psi, vec![m + gamma[0]]);
    assert_eq!(b[(0, gamma[0])], 1.0);
    assert_relative_eq!(b[(0, psi[0])], aod);
    assert_eq!((b[(0, 2 * m)], b[(0, 2 * m + 1)]), (1.0, aod));
    let row1: f64 = (0..m).map(|c| b[(1, c)]).sum();
    assert_relative_eq!(row1, 1.0, epsilon = 1e-12);
}

#[test]
fn gmrf_rejects_stations_outside_mesh() {
    let mesh = Mesh::regular_grid(0.0, 1.0, 0.0, 1.0, 3, 3);
    let data = panel(
        vec![Station::new("in", 0.5, 0.5), Station::new("out", 2.0, 0.5)],
        1,
        0,
        1,
    );
    assert!(matches!(
        build_gmrf(&data, &mesh),
        Err(Error::PointOutsideMesh { index: 1, .. })
    ));
}

#[test]
fn gmrf_prior_is_spde_per_day() {
    let mesh = Mesh::regular_grid(0.0, 3.0, 0.0, 3.0, 4, 4);
    let data = panel(vec![Station::new("a", 1.0, 1.0), Station::new("b", 2.0, 1.5)], 2, 0, 8);
    let built = build_gmrf(&data, &mesh).unwrap();
    let theta = [1.5, 0.8, 2.5, 0.3, 0.4, 0.2, 0.1];
    let q = built.model.prior_precision(&theta).unwrap().to_dense();
    let basis = SpdeBasis::new(&assemble_fem(&mesh));
    let qg = basis
        .precision(&SpdeParams::from_range_sd(1.5, 0.8).unwrap())
        .to_dense();
    let qp = basis
        .precision(&SpdeParams::from_range_sd(2.5, 0.3).unwrap())
        .to_dense();
    let m = mesh.n_nodes();
    for day in 0..2 {
        let o = day * (2 * m + 2);
        assert_relative_eq!(q.view((o, o), (m, m)).into_owned(), qg.clone(), epsilon = 1e-12);
        assert_relative_eq!(q.view((o + m, o + m), (m, m)).into_owned(), qp.clone(), epsilon = 1e-12);
        assert_relative_eq!(q[(o + 2 * m, o + 2 * m)], 1.0 / 0.4);
        assert_relative_eq!(q[(o + 2 * m + 1, o + 2 * m + 1)], 1.0 / 0.2);
        assert_eq!(q.view((o, o + m), (m, m)).amax(), 0.0);
    }
    assert_eq!(q.view((0, 2 * m + 2), (2 * m + 2, 2 * m + 2)).amax(), 0.0);
}

#[test]
fn gmrf_covariance_approximates_matern_on_toy_mesh() {
    // 30-node mesh, two central stations one unit apart
    let mesh = Mesh::regular_grid(0.0, 5.0, 0.0, 4.0, 5, 4);
    assert!(mesh.n_nodes() <= 30);
    let data = panel(vec![Station::new("a", 2.0, 2.0), Station::new("b", 3.0, 2.0)], 1, 0, 9);
    let built = build_gmrf(&data, &mesh).unwrap();
    let theta = [2.0, 1.0, 2.0, 0.7, 0.5, 0.3, 0.2];
    let s = dense_marginal_cov(&built.model, &theta);
    let obs = data.observations();
    let cg = MaternParams::from_range_sd(2.0, 1.0).unwrap();
    let cp = MaternParams::from_range_sd(2.0, 0.7).unwrap();
    for (i, j) in [(0, 0), (0, 1), (1, 1)] {
        let (ai, aj) = (obs[i].aod, obs[j].aod);
        let d = if i == j { 0.0 } else { 1.0 };
        let want = matern_cov(d, &cg)
            + ai * aj * matern_cov(d, &cp)
            + theta[4]
            + ai * aj * theta[5]
            + if i == j { theta[6] } else { 0.0 };
        let rel = (s[(i, j)] - want).abs() / want;
        assert!(rel <= 0.10, "({i},{j}): {} vs {want} ({rel:.3})", s[(i, j)]);
    }
}

#[test]
fn gmrf_short_range_decorrelates_stations() {
    let mesh = Mesh::regular_grid(0.0, 8.0, 0.0, 8.0, 16, 16);
    let data = panel(vec![Station::new("a", 3.0, 4.0), Station::new("b", 5.0, 4.0)], 1, 0, 10);
    let built = build_gmrf(&data, &mesh).unwrap();
    let corr = |range: f64| {
        let theta = [range, 1.0, range, 1e-3, 1e-6, 1e-6, 1e-6];
        let s = dense_marginal_cov(&built.model, &theta);
        s[(0, 1)] / (s[(0, 0)] * s[(1, 1)]).sqrt()
    };
    let (long, short) = (corr(6.0), corr(0.5));
    assert!(long > 0.5, "{long}");
    assert!(short.abs() < 0.01, "{short}");
}

#[test]
fn marginal_covariances_are_symmetric_psd() {
    let st = gridded_stations(8, 11, 2.0);
    let data = panel(st.clone(), 2, 0, 12);
    let s = dense_marginal_cov(&build_lmm(&data).unwrap().model, &[0.3, 0.2, 0.5, 0.1, 0.05]);
    assert_relative_eq!(s.clone(), s.transpose(), epsilon = 1e-12);
    assert!(s.symmetric_eigenvalues().min() > 0.0);
    let mesh = Mesh::regular_grid(0.0, 4.0, 0.0, 4.0, 6, 6);
    let g = build_gmrf(&data, &mesh).unwrap();
    let s = dense_marginal_cov(&g.model, &[1.5, 0.6, 2.0, 0.3, 0.2, 0.1, 0.05]);
    assert_relative_eq!(s.clone(), s.transpose(), epsilon = 1e-10);
    assert!(s.symmetric_eigenvalues().min() > 0.0);
}

#[test]
fn field_with_region_constant_projector_reproduces_lmm_region_effect() {
    // One "node" per region and a projector putting every station on its
    // region's node: an i.i.d. field prior then gives the LMM covariance.
    #[derive(Debug)]
    struct IidField(SymCsc);
    impl FieldPrior for IidField {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn pattern(&self) -> &SymCsc {
            &self.0
        }
        fn precision(&self, theta: &[f64]) -> Result<SymCsc> {
            Ok(self.0.scaled(1.0 / theta[0]))
        }
    }
    let data = panel(gridded_stations(9, 13, 2.0), 1, 0, 14);
    let regions: Vec<String> = data.stations().iter().map(|s| s.region.clone().unwrap()).collect();
    let labels: Vec<String> = regions.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let rows = regions
        .iter()
        .map(|r| vec![(labels.iter().position(|l| l == r).unwrap(), 1.0)])
        .collect();
    let pool = Projector::from_rows(labels.len(), rows);
    let prior: Arc<dyn FieldPrior> = Arc::new(IidField(SymCsc::identity(labels.len())));
    let all: Vec<usize> = (0..data.n_obs()).collect();
    let field = LinearGaussianModel::new(
        data.response(),
        DMatrix::from_element(data.n_obs(), 1, 1.0),
        vec!["intercept".into()],
        vec!["var".into(), "noise".into()],
        1,
        vec![Component::Field { prior, pool }],
        vec![LatentBlock {
            rows: all.clone(),
            terms: vec![Term {
                component: 0,
                size: labels.len(),
                index: data.observations().iter().map(|o| o.station).collect(),
                weight: vec![1.0; all.len()],
            }],
        }],
    )
    .unwrap();
    let lmm = build_lmm(&data).unwrap();
    let s_field = dense_marginal_cov(&field, &[0.8, 0.3]);
    let s_lmm = dense_marginal_cov(&lmm.model, &[1e-300, 1e-300, 0.8, 1e-300, 0.3]);
    assert_relative_eq!(s_field, s_lmm, epsilon = 1e-12);
}

fn fitted_toy(kind: ModelKind, seed: u64) -> (Dataset, BuiltModel, FittedModel) {
    let data = panel(gridded_stations(14, seed, 2.0), 3, 1, seed + 100);
    let mesh = Mesh::regular_grid(0.0, 4.0, 0.0, 4.0, 6, 6);
    let built = build(kind, &data, Some(&mesh)).unwrap();
    let theta = built.initial_theta().unwrap();
    let cfg = EngineConfig::default();
    let prof = built.model.profile(&theta, &cfg).unwrap();
    let z = built.model.posterior_mean(&theta, &prof.beta, &cfg).unwrap();
    let fit = FitResult {
        theta_names: built.model.theta_names().to_vec(),
        theta,
        fixed_names: built.model.fixed_names().to_vec(),
        beta: prof.beta,
        latent: z,
        block_offsets: built.model.block_offsets().to_vec(),
        loglik: prof.loglik,
        convergence: crate::engine::Convergence {
            converged: true,
            rounds: 0,
            evaluations: 0,
            message: String::new(),
        },
        trace: vec![],
    };
    let mut fitted = built.fitted(fit);
    fitted.region_grid = Some(RegionGrid::new(2.0, (0.0, 0.0)).unwrap());
    (data, built, fitted)
}

#[test]
fn predictions_decompose_exactly() {
    for kind in [ModelKind::Lmm, ModelKind::Gmrf] {
        let (data, _, fitted) = fitted_toy(kind, 21);
        let preds = fitted.predict(&Target::from_dataset(&data)).unwrap();
        assert_eq!(preds.len(), data.n_obs());
        for p in &preds {
            assert!((p.fixed + p.day_part + p.spatial_part - p.yhat).abs() <= 1e-10);
        }
    }
}

#[test]
fn in_sample_predictions_equal_fixed_plus_latent_fit() {
    // At training rows ŷ = Xβ̂ + B ẑ for both models.
    for kind in [ModelKind::Lmm, ModelKind::Gmrf] {
        let (data, built, fitted) = fitted_toy(kind, 22);
        let preds = fitted.predict(&Target::from_dataset(&data)).unwrap();
        let bz = built.model.latent_design().mul_vec(&fitted.fit.latent);
        let x = built.model.fixed_design();
        for (r, p) in preds.iter().enumerate() {
            let xb: f64 = (0..x.ncols()).map(|c| x[(r, c)] * fitted.fit.beta[c]).sum();
            assert!((p.yhat - xb - bz[r]).abs() < 1e-9, "{kind}: row {r}");
        }
    }
}

#[test]
fn lmm_unseen_region_has_zero_spatial_part() {
    let (_, _, fitted) = fitted_toy(ModelKind::Lmm, 23);
    let t = Target {
        label: "far".into(),
        x: 50.0,
        y: 50.0,
        day: 2,
        aod: 0.4,
        covariates: vec![0.3],
        region: None,
    };
    let p = &fitted.predict(&[t]).unwrap()[0];
    assert_eq!(p.spatial_part, 0.0);
}

#[test]
fn unseen_day_is_an_error() {
    let (data, _, fitted) = fitted_toy(ModelKind::Lmm, 24);
    let mut t = Target::from_dataset(&data).remove(0);
    t.day = 99;
    assert!(matches!(fitted.predict(&[t]), Err(Error::UnseenDay(99))));
    let raster = RasterSpec::new(0.0, 1.0, 0.0, 1.0, 2, 2).unwrap();
    assert!(matches!(fitted.spatial_surface(99, &raster), Err(Error::UnseenDay(99))));
}

#[test]
fn gmrf_target_outside_mesh_is_an_error() {
    let (data, _, fitted) = fitted_toy(ModelKind::Gmrf, 25);
    let mut t = Target::from_dataset(&data).remove(0);
    t.x = -3.0;
    assert!(matches!(fitted.predict(&[t]), Err(Error::PointOutsideMesh { .. })));
}

#[test]
fn gmrf_prediction_at_training_station_reuses_its_spatial_effect() {
    let (data, built, fitted) = fitted_toy(ModelKind::Gmrf, 26);
    let m = match &fitted.layout {
        Layout::Gmrf { mesh } => mesh.n_nodes(),
        _ => unreachable!(),
    };
    let Component::Field { pool, .. } = &built.model.components()[0] else {
        panic!()
    };
    let targets = Target::from_dataset(&data);
    let preds = fitted.predict(&targets).unwrap();
    for (r, o) in data.observations().iter().enumerate() {
        let z = fitted.fit.block_latent(o.day);
        let gamma: f64 = pool.row(o.station).iter().map(|&(n, w)| w * z[n]).sum();
        let psi: f64 = pool.row(o.station).iter().map(|&(n, w)| w * z[m + n]).sum();
        assert!((preds[r].spatial_part - gamma - psi * o.aod).abs() < 1e-12);
    }
}

#[test]
fn gmrf_spatial_part_between_two_node_effects() {
    let (data, _, mut fitted) = fitted_toy(ModelKind::Gmrf, 27);
    // nodes (2,2) and (2,2+2/3) on the 6x6-cell grid over [0,4]^2 share an edge
    let Layout::Gmrf { mesh } = &fitted.layout else {
        panic!()
    };
    let a = mesh
        .nodes()
        .iter()
        .position(|p| (p[0] - 2.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12)
        .unwrap();
    let b = mesh
        .nodes()
        .iter()
        .position(|p| (p[0] - 2.0).abs() < 1e-12 && (p[1] - 2.0 - 2.0 / 3.0).abs() < 1e-12)
        .unwrap();
    let (off, m) = (fitted.fit.block_offsets[0], mesh.n_nodes());
    fitted.fit.latent[off + a] = 3.0;
    fitted.fit.latent[off + b] = 5.0;
    let mut t = Target::from_dataset(&data).remove(0);
    t.x = 2.0;
    t.y = 2.0 + 0.25 * 2.0 / 3.0;
    t.aod = 0.0;
    t.day = data.day_labels()[0];
    let _ = m;
    let p = &fitted.predict(&[t]).unwrap()[0];
    assert!(p.spatial_part > 3.0 && p.spatial_part < 5.0, "{}", p.spatial_part);
    assert_relative_eq!(p.spatial_part, 0.75 * 3.0 + 0.25 * 5.0, epsilon = 1e-12);
}

#[test]
fn lmm_surface_is_constant_within_regions() {
    let (_, _, fitted) = fitted_toy(ModelKind::Lmm, 28);
    let raster = RasterSpec::new(0.05, 3.95, 0.05, 3.95, 40, 40).unwrap();
    let surface = fitted.spatial_surface(1, &raster).unwrap();
    let mut seen: BTreeMap<String, f64> = BTreeMap::new();
    for p in &surface {
        let r = fitted.region_at(p.x, p.y);
        let v = *seen.entry(r).or_insert(p.value);
        assert_eq!(v, p.value);
    }
    assert!(seen.len() >= 2);
}

#[test]
fn gmrf_surface_matches_nodes_and_is_nan_outside() {
    let (_, _, fitted) = fitted_toy(ModelKind::Gmrf, 29);
    let raster = RasterSpec::new(-1.0, 5.0, -1.0, 5.0, 19, 19).unwrap();
    let surface = fitted.spatial_surface(2, &raster).unwrap();
    let (gamma, _) = fitted.field_means(2).unwrap();
    let Layout::Gmrf { mesh } = &fitted.layout else {
        panic!()
    };
    let mut on_nodes = 0;
    for p in &surface {
        let inside = (0.0..=4.0).contains(&p.x) && (0.0..=4.0).contains(&p.y);
        assert_eq!(p.value.is_nan(), !inside, "({}, {})", p.x, p.y);
        if let Some(n) = mesh
            .nodes()
            .iter()
            .position(|q| (q[0] - p.x).abs() < 1e-12 && (q[1] - p.y).abs() < 1e-12)
        {
            assert!((p.value - gamma[n]).abs() < 1e-12);
            on_nodes += 1;
        }
    }
    assert!(on_nodes > 0);
}

fn max_jump(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

#[test]
fn gmrf_surface_is_continuous_across_region_boundaries_lmm_is_not() {
    // Transect y = 1 crossing the region boundary x = 2
    let transect = |fitted: &FittedModel, n: usize| {
        let raster = RasterSpec::new(1.5, 2.5, 1.0, 1.0 + 1e-9, n, 2).unwrap();
        let s = fitted.spatial_surface(1, &raster).unwrap();
        max_jump(&s[..n].iter().map(|p| p.value).collect::<Vec<_>>())
    };
    let (_, _, gmrf) = fitted_toy(ModelKind::Gmrf, 30);
    let (_, _, lmm) = fitted_toy(ModelKind::Lmm, 30);
    let g = [transect(&gmrf, 11), transect(&gmrf, 41), transect(&gmrf, 161)];
    let l = [transect(&lmm, 11), transect(&lmm, 41), transect(&lmm, 161)];
    assert!(g[1] < g[0] / 3.0 && g[2] < g[1] / 3.0, "{g:?}");
    assert!(l[2] > 0.0 && l[2] == l[0], "{l:?}");
}

#[test]
fn precision_patterns_contrast_by_region() {
    let (_, built, fitted) = fitted_toy(ModelKind::Lmm, 31);
    let ex = fitted.precision_export(&built, 1).unwrap();
    assert_eq!(&ex.labels[0].effect, "u");
    for (i, j, v) in ex.matrix.lower().triplets() {
        let (a, b) = (&ex.labels[i], &ex.labels[j]);
        if v != 0.0 && !a.region.is_empty() && !b.region.is_empty() {
            assert_eq!(a.region, b.region, "LMM links {a:?} and {b:?}");
        }
    }
    let regions: Vec<&String> = ex.labels.iter().map(|l| &l.region).collect();
    assert!(regions.windows(2).all(|w| w[0] <= w[1]));

    let (_, built, fitted) = fitted_toy(ModelKind::Gmrf, 31);
    let ex = fitted.precision_export(&built, 1).unwrap();
    let cross = ex.matrix.lower().triplets().any(|(i, j, v)| {
        let (a, b) = (&ex.labels[i], &ex.labels[j]);
        v != 0.0 && a.effect == "gamma" && b.effect == "gamma" && a.region != b.region
    });
    assert!(cross);
    let before = built
        .model
        .posterior_precision(&fitted.fit.theta, 0)
        .unwrap()
        .to_dense();
    let after = fitted.precision_export(&built, 1).unwrap().matrix.to_dense();
    let mut ev_a: Vec<f64> = before.symmetric_eigenvalues().iter().copied().collect();
    let mut ev_b: Vec<f64> = after.symmetric_eigenvalues().iter().copied().collect();
    ev_a.sort_by(f64::total_cmp);
    ev_b.sort_by(f64::total_cmp);
    for (x, y) in ev_a.iter().zip(&ev_b) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }
}

#[test]
fn fitted_model_round_trips_through_json() {
    let (data, _, fitted) = fitted_toy(ModelKind::Gmrf, 32);
    let back = FittedModel::from_json(&fitted.to_json().unwrap()).unwrap();
    assert_eq!(back, fitted);
    let t = Target::from_dataset(&data);
    assert_eq!(back.predict(&t).unwrap(), fitted.predict(&t).unwrap());
}

#[test]
fn initial_values_follow_ols_and_diameter() {
    let (_, built, _) = fitted_toy(ModelKind::Gmrf, 33);
    let s2 = ols_residual_variance(&built.model).unwrap();
    let t = built.initial_theta().unwrap();
    let pts: Vec<[f64; 2]> = built.stations.iter().map(Station::location).collect();
    assert_relative_eq!(t[0], diameter(&pts) / 5.0);
    assert_relative_eq!(t[1] * t[1], s2 / 5.0, max_relative = 1e-12);
    assert_relative_eq!(t[6], s2 / 5.0, max_relative = 1e-12);
    assert!(built.default_bounds().unwrap().contains(&t));
}

#[test]
fn model_kind_parses() {
    assert_eq!("LMM".parse::<ModelKind>().unwrap(), ModelKind::Lmm);
    assert_eq!(ModelKind::Gmrf.to_string(), "gmrf");
    assert!(matches!("glm".parse::<ModelKind>(), Err(Error::Config(_))));
}
