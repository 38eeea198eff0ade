//! Exact marginal likelihood, posterior means and maximum-likelihood
//! hyperparameters for linear Gaussian models
//!
//! ```text
//! y = X β + B z + ε,   z ~ N(0, Q(θ)⁻¹),   ε ~ N(0, σ²(θ) I)
//! ```
//!
//! where the latent vector splits into row-disjoint blocks (one per day in
//! both models of this crate). Each block's latents are a concatenation of
//! terms; a term either draws i.i.d. group effects or a Gaussian field on a
//! mesh observed through a projector.
//!
//! Two algebraic routes evaluate the same quantities per block:
//!
//! * precision: factor `Q_post = Q_b + BᵀB/σ²` (sparse, cached symbolic
//!   analysis) and use `log|Σ_b| = n_b log σ² + log|Q_post| − log|Q_b|`;
//! * covariance: form `Σ_b = σ² I + B Q_b⁻¹ Bᵀ` densely. Field terms read
//!   from a pool covariance `P Q⁻¹ Pᵀ` computed once per θ, so days that
//!   revisit the same stations share one sparse solve.

pub(crate) mod dense;
mod optim;

pub use optim::{nelder_mead, NelderMeadOptions, NelderMeadResult};

use std::cell::RefCell;
use std::fmt::Debug;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Projector;
use crate::par;
use crate::sparse::{CholeskyFactor, CscMatrix, Ordering, SymCsc, Symbolic};

/// Blocks with a field term and at most this many rows use the covariance
/// route under [`Route::Auto`].
pub const AUTO_COVARIANCE_MAX_ROWS: usize = 400;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior precision of a latent field, parameterized by the model's θ.
pub trait FieldPrior: Send + Sync + Debug {
    fn dim(&self) -> usize;
    /// Pattern shared by every matrix [`FieldPrior::precision`] returns.
    fn pattern(&self) -> &SymCsc;
    fn precision(&self, theta: &[f64]) -> Result<SymCsc>;
}

#[derive(Debug, Clone)]
pub enum Component {
    /// Independent group effects with variance `θ[variance]`.
    Iid { variance: usize },
    /// A field on mesh nodes. `pool` maps a fixed set of locations to the
    /// nodes; terms refer to locations by pool row.
    Field {
        prior: Arc<dyn FieldPrior>,
        pool: Projector,
    },
}

/// One component's contribution to a block: row `r` of the block loads
/// `weight[r]` on group (or pool location) `index[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub component: usize,
    /// Latent values added to the block: group count, or field dimension.
    pub size: usize,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub rows: Vec<usize>,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    #[default]
    Auto,
    Precision,
    Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub route: Route,
    /// Evaluate blocks on the rayon pool (needs the `parallel` feature).
    pub parallel: bool,
    /// Outer rounds stop once the log-likelihood gains less than this.
    pub tolerance: f64,
    pub max_rounds: usize,
    /// Initial simplex step in log-θ units.
    pub initial_step: f64,
    /// Evaluation budget of each Nelder–Mead round.
    pub max_evaluations: usize,
    pub ftol: f64,
    pub xtol: f64,
    pub record_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            route: Route::Auto,
            parallel: true,
            tolerance: 1e-6,
            max_rounds: 200,
            initial_step: 0.5,
            max_evaluations: 1500,
            ftol: 1e-7,
            xtol: 1e-3,
            record_trace: false,
        }
    }
}

/// Box constraints on θ (natural scale). Equal bounds pin a coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(*l > 0.0 && l <= u && u.is_finite()) {
                return Err(Error::InvalidValue(format!("bounds [{l}, {u}]")));
            }
        }
        Ok(Bounds { lower, upper })
    }

    /// `[θ / factor, θ · factor]` around a reference point.
    pub fn around(theta: &[f64], factor: f64) -> Self {
        Bounds {
            lower: theta.iter().map(|t| t / factor).collect(),
            upper: theta.iter().map(|t| t * factor).collect(),
        }
    }

    /// Pins coordinate `i` to `value`.
    pub fn fix(mut self, i: usize, value: f64) -> Self {
        self.lower[i] = value;
        self.upper[i] = value;
        self
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.lower.len()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| t >= l && t <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub rounds: usize,
    pub evaluations: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub evaluation: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_names: Vec<String>,
    pub theta: Vec<f64>,
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Posterior latent mean, blocks concatenated.
    pub latent: Vec<f64>,
    pub block_offsets: Vec<usize>,
    pub loglik: f64,
    pub convergence: Convergence,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
}

impl FitResult {
    pub fn block_latent(&self, block: usize) -> &[f64] {
        let end = self.block_offsets.get(block + 1).copied().unwrap_or(self.latent.len());
        &self.latent[self.block_offsets[block]..end]
    }

    /// Convergence trace as CSV: `evaluation,<θ names>,loglik`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["evaluation".to_string()];
        header.extend(self.theta_names.iter().cloned());
        header.push("loglik".into());
        w.write_record(&header)?;
        for row in &self.trace {
            let mut rec = vec![row.evaluation.to_string()];
            rec.extend(row.theta.iter().map(|v| v.to_string()));
            rec.push(row.loglik.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Profiled log-likelihood and the GLS estimate behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub loglik: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PosteriorPattern {
    pattern: SymCsc,
    btb: Vec<f64>,
    /// Per term: value slot of each prior entry (the diagonal for i.i.d. terms).
    prior_slots: Vec<Vec<usize>>,
    symbolic: Arc<Symbolic>,
}

#[derive(Debug, Clone)]
struct Block {
    spec: LatentBlock,
    offsets: Vec<usize>,
    dim: usize,
    design: CscMatrix,
    /// `[X_b | y_b]`
    data: DMatrix<f64>,
    has_field: bool,
    posterior: OnceLock<PosteriorPattern>,
}

struct FieldState {
    precision: SymCsc,
    factor: CholeskyFactor,
    pool_cov: Option<DMatrix<f64>>,
}

struct ThetaState<'a> {
    theta: &'a [f64],
    sigma2: f64,
    fields: Vec<Option<FieldState>>,
}

struct BlockStats {
    logdet: f64,
    /// `[X | y]ᵀ Σ⁻¹ [X | y]`
    gram: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    y: Vec<f64>,
    x: DMatrix<f64>,
    fixed_names: Vec<String>,
    theta_names: Vec<String>,
    noise: usize,
    components: Vec<Component>,
    field_symbolic: Vec<OnceLock<Arc<Symbolic>>>,
    blocks: Vec<Block>,
    block_offsets: Vec<usize>,
}

fn slot(p: &SymCsc, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    let l = p.lower();
    let start = l.col_ptr()[j];
    let rows = &l.row_idx()[start..l.col_ptr()[j + 1]];
    start + rows.binary_search(&i).expect("entry in pattern")
}

impl LinearGaussianModel {
    /// Checks shapes and that the blocks partition the rows.
    pub fn new(
        y: Vec<f64>,
        x: DMatrix<f64>,
        fixed_names: Vec<String>,
        theta_names: Vec<String>,
        noise: usize,
        components: Vec<Component>,
        blocks: Vec<LatentBlock>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.nrows(),
            });
        }
        if fixed_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: fixed_names.len(),
            });
        }
        if n < x.ncols() {
            return Err(Error::InvalidValue(format!(
                "{n} observations for {} fixed effects",
                x.ncols()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response or fixed-effect design".into()));
        }
        let n_theta = theta_names.len();
        if noise >= n_theta {
            return Err(Error::InvalidValue(format!("noise index {noise} out of range")));
        }
        for c in &components {
            match c {
                Component::Iid { variance } if *variance >= n_theta => {
                    return Err(Error::InvalidValue(format!("variance index {variance} out of range")));
                }
                Component::Field { prior, pool } if pool.n_nodes() != prior.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: prior.dim(),
                        got: pool.n_nodes(),
                    });
                }
                _ => {}
            }
        }

        let mut seen = vec![false; n];
        let mut built = Vec::with_capacity(blocks.len());
        let k = x.ncols();
        for spec in blocks {
            for &r in &spec.rows {
                if r >= n || std::mem::replace(&mut seen[r], true) {
                    return Err(Error::InvalidValue(format!("row {r} missing or in two blocks")));
                }
            }
            let nb = spec.rows.len();
            let mut offsets = Vec::with_capacity(spec.terms.len());
            let mut dim = 0;
            let mut trip = Vec::new();
            let mut has_field = false;
            for t in &spec.terms {
                if t.index.len() != nb || t.weight.len() != nb {
                    return Err(Error::DimensionMismatch {
                        expected: nb,
                        got: t.index.len().min(t.weight.len()),
                    });
                }
                if t.weight.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFinite("latent design weight".into()));
                }
                let comp = components
                    .get(t.component)
                    .ok_or_else(|| Error::InvalidValue(format!("component {} missing", t.component)))?;
                match comp {
                    Component::Iid { .. } => {
                        if t.index.iter().any(|&g| g >= t.size) {
                            return Err(Error::InvalidValue("group index beyond term size".into()));
                        }
                        for (r, (&g, &w)) in t.index.iter().zip(&t.weight).enumerate() {
                            trip.push((r, dim + g, w));
                        }
                    }
                    Component::Field { prior, pool } => {
                        has_field = true;
                        if t.size != prior.dim() || t.index.iter().any(|&s| s >= pool.n_points()) {
                            return Err(Error::InvalidValue("field term does not match its component".into()));
                        }
                        for (r, (&s, &w)) in t.index.iter().zip(&t.weight).enumerate() {
                            for &(node, pw) in pool.row(s) {
                                trip.push((r, dim + node, w * pw));
                            }
                        }
                    }
                }
                offsets.push(dim);
                dim += t.size;
            }
            let mut data = DMatrix::zeros(nb, k + 1);
            for (r, &row) in spec.rows.iter().enumerate() {
                for c in 0..k {
                    data[(r, c)] = x[(row, c)];
                }
                data[(r, k)] = y[row];
            }
            built.push(Block {
                design: CscMatrix::from_triplets(nb, dim, &trip),
                spec,
                offsets,
                dim,
                data,
                has_field,
                posterior: OnceLock::new(),
            });
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidValue(format!("row {r} is in no block")));
        }
        let mut block_offsets = Vec::with_capacity(built.len());
        let mut total = 0;
        for b in &built {
            block_offsets.push(total);
            total += b.dim;
        }
        Ok(LinearGaussianModel {
            y,
            x,
            fixed_names,
            theta_names,
            noise,
            field_symbolic: components.iter().map(|_| OnceLock::new()).collect(),
            components,
            blocks: built,
            block_offsets,
        })
    }

    /// Same structure with a new response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.y.len() {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        let mut out = self.clone();
        let k = self.x.ncols();
        for b in &mut out.blocks {
            for (r, &row) in b.spec.rows.iter().enumerate() {
                b.data[(r, k)] = y[row];
            }
        }
        out.y = y;
        Ok(out)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn fixed_design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn theta_names(&self) -> &[String] {
        &self.theta_names
    }

    pub fn n_theta(&self) -> usize {
        self.theta_names.len()
    }

    pub fn noise_index(&self) -> usize {
        self.noise
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> &LatentBlock {
        &self.blocks[b].spec
    }

    /// Offset of each term's latents inside block `b`.
    pub fn term_offsets(&self, b: usize) -> &[usize] {
        &self.blocks[b].offsets
    }

    pub fn block_dim(&self, b: usize) -> usize {
        self.blocks[b].dim
    }

    pub fn block_offsets(&self) -> &[usize] {
        &self.block_offsets
    }

    pub fn n_latent(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    /// Full `n × q` latent design.
    pub fn latent_design(&self) -> CscMatrix {
        let mut trip = Vec::new();
        for (b, off) in self.blocks.iter().zip(&self.block_offsets) {
            for (r, j, v) in b.design.triplets() {
                trip.push((b.spec.rows[r], off + j, v));
            }
        }
        CscMatrix::from_triplets(self.n_obs(), self.n_latent(), &trip)
    }

    /// Full block-diagonal prior precision `Q(θ)`.
    pub fn prior_precision(&self, theta: &[f64]) -> Result<SymCsc> {
        self.check_theta(theta)?;
        let mut trip = Vec::new();
        let mut fields: Vec<Option<SymCsc>> = vec![None; self.components.len()];
        for (c, comp) in self.components.iter().enumerate() {
            if let Component::Field { prior, .. } = comp {
                fields[c] = Some(prior.precision(theta)?);
            }
        }
        for (b, off) in self.blocks.iter().zip(&self.block_offsets) {
            for (t, toff) in b.spec.terms.iter().zip(&b.offsets) {
                match &self.components[t.component] {
                    Component::Iid { variance } => {
                        let p = 1.0 / theta[*variance];
                        trip.extend((0..t.size).map(|g| (off + toff + g, off + toff + g, p)));
                    }
                    Component::Field { .. } => {
                        let q = fields[t.component].as_ref().unwrap();
                        trip.extend(
                            q.lower()
                                .triplets()
                                .map(|(i, j, v)| (off + toff + i, off + toff + j, v)),
                        );
                    }
                }
            }
        }
        Ok(SymCsc::from_triplets(self.n_latent(), &trip))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_theta() {
            return Err(Error::DimensionMismatch {
                expected: self.n_theta(),
                got: theta.len(),
            });
        }
        if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidValue(format!("hyperparameter {t} must be positive")));
        }
        Ok(())
    }

    fn route_for(&self, b: &Block, route: Route) -> Route {
        match route {
            Route::Auto if b.has_field && b.spec.rows.len() <= AUTO_COVARIANCE_MAX_ROWS => Route::Covariance,
            Route::Auto => Route::Precision,
            r => r,
        }
    }

    fn theta_state<'a>(&self, theta: &'a [f64], route: Route) -> Result<ThetaState<'a>> {
        self.check_theta(theta)?;
        let mut need_pool = vec![false; self.components.len()];
        for b in &self.blocks {
            if self.route_for(b, route) == Route::Covariance {
                for t in &b.spec.terms {
                    need_pool[t.component] = true;
                }
            }
        }
        let mut fields = Vec::with_capacity(self.components.len());
        for (c, comp) in self.components.iter().enumerate() {
            let Component::Field { prior, pool } = comp else {
                fields.push(None);
                continue;
            };
            let precision = prior.precision(theta)?;
            if !precision.same_pattern(prior.pattern()) {
                return Err(Error::InvalidValue("field precision pattern changed with θ".into()));
            }
            let symbolic = self.field_symbolic[c]
                .get_or_init(|| Arc::new(Symbolic::analyze(prior.pattern(), Ordering::MinimumDegree)));
            let factor = symbolic.factor(&precision)?;
            let pool_cov = if need_pool[c] {
                let m = prior.dim();
                let s = pool.n_points();
                let mut w = DMatrix::zeros(m, s);
                let mut rhs = vec![0.0; m];
                for p in 0..s {
                    for &(node, v) in pool.row(p) {
                        rhs[node] = v;
                    }
                    let col = factor.half_solve(&rhs)?;
                    w.column_mut(p).copy_from_slice(&col);
                    for &(node, _) in pool.row(p) {
                        rhs[node] = 0.0;
                    }
                }
                Some(w.transpose() * &w)
            } else {
                None
            };
            fields.push(Some(FieldState {
                precision,
                factor,
                pool_cov,
            }));
        }
        Ok(ThetaState {
            theta,
            sigma2: theta[self.noise],
            fields,
        })
    }

    fn posterior_pattern<'a>(&'a self, b: &'a Block) -> &'a PosteriorPattern {
        b.posterior.get_or_init(|| {
            let btb = SymCsc::from_full(&b.design.transpose().matmul(&b.design));
            let mut trip: Vec<(usize, usize, f64)> = (0..b.dim).map(|i| (i, i, 0.0)).collect();
            for (t, &off) in b.spec.terms.iter().zip(&b.offsets) {
                if let Component::Field { prior, .. } = &self.components[t.component] {
                    trip.extend(
                        prior
                            .pattern()
                            .lower()
                            .triplets()
                            .map(|(i, j, _)| (off + i, off + j, 0.0)),
                    );
                }
            }
            trip.extend(btb.lower().triplets());
            let pattern = SymCsc::from_triplets(b.dim, &trip);
            let prior_slots = b
                .spec
                .terms
                .iter()
                .zip(&b.offsets)
                .map(|(t, &off)| match &self.components[t.component] {
                    Component::Iid { .. } => (0..t.size).map(|g| slot(&pattern, off + g, off + g)).collect(),
                    Component::Field { prior, .. } => prior
                        .pattern()
                        .lower()
                        .triplets()
                        .map(|(i, j, _)| slot(&pattern, off + i, off + j))
                        .collect(),
                })
                .collect();
            let btb_vals = pattern.lower().values().to_vec();
            let symbolic = Arc::new(Symbolic::analyze(&pattern, Ordering::MinimumDegree));
            PosteriorPattern {
                pattern,
                btb: btb_vals,
                prior_slots,
                symbolic,
            }
        })
    }

    /// `Q_post` of block `b` and the log-determinant of its prior.
    fn block_posterior(&self, b: &Block, st: &ThetaState) -> (SymCsc, Arc<Symbolic>, f64) {
        let pp = self.posterior_pattern(b);
        let mut q = pp.pattern.clone();
        let inv_s2 = 1.0 / st.sigma2;
        let vals = q.lower_mut().values_mut();
        for (v, &btb) in vals.iter_mut().zip(&pp.btb) {
            *v = btb * inv_s2;
        }
        let mut prior_logdet = 0.0;
        for (t, slots) in b.spec.terms.iter().zip(&pp.prior_slots) {
            match &self.components[t.component] {
                Component::Iid { variance } => {
                    let p = 1.0 / st.theta[*variance];
                    for &s in slots {
                        vals[s] += p;
                    }
                    prior_logdet += t.size as f64 * p.ln();
                }
                Component::Field { .. } => {
                    let f = st.fields[t.component].as_ref().unwrap();
                    for (&s, &v) in slots.iter().zip(f.precision.lower().values()) {
                        vals[s] += v;
                    }
                    prior_logdet += f.factor.logdet();
                }
            }
        }
        (q, Arc::clone(&pp.symbolic), prior_logdet)
    }

    /// Lower triangle of the dense marginal covariance `Σ_b`.
    fn block_covariance(&self, b: &Block, st: &ThetaState) -> DMatrix<f64> {
        let nb = b.spec.rows.len();
        let mut sigma = DMatrix::from_diagonal_element(nb, nb, st.sigma2);
        for t in &b.spec.terms {
            match &self.components[t.component] {
                Component::Iid { variance } => {
                    let v = st.theta[*variance];
                    for i in 0..nb {
                        let wi = v * t.weight[i];
                        for j in 0..=i {
                            if t.index[i] == t.index[j] {
                                sigma[(i, j)] += wi * t.weight[j];
                            }
                        }
                    }
                }
                Component::Field { .. } => {
                    let k = st.fields[t.component].as_ref().unwrap().pool_cov.as_ref().unwrap();
                    for i in 0..nb {
                        let (wi, si) = (t.weight[i], t.index[i]);
                        for j in 0..=i {
                            sigma[(i, j)] += wi * t.weight[j] * k[(si, t.index[j])];
                        }
                    }
                }
            }
        }
        sigma
    }

    fn block_stats(&self, b: &Block, st: &ThetaState, route: Route) -> Result<BlockStats> {
        let nb = b.spec.rows.len();
        let s2 = st.sigma2;
        if b.dim == 0 {
            return Ok(BlockStats {
                logdet: nb as f64 * s2.ln(),
                gram: b.data.transpose() * &b.data / s2,
            });
        }
        match self.route_for(b, route) {
            Route::Covariance => {
                let mut sigma = self.block_covariance(b, st);
                dense::cholesky_in_place(&mut sigma)?;
                let mut w = b.data.clone();
                dense::forward_in_place(&sigma, &mut w);
                Ok(BlockStats {
                    logdet: dense::logdet_from_factor(&sigma),
                    gram: w.transpose() * w,
                })
            }
            _ => {
                let (q, symbolic, prior_logdet) = self.block_posterior(b, st);
                let factor = symbolic.factor(&q)?;
                let cols = b.data.ncols();
                let mut w = DMatrix::zeros(b.dim, cols);
                for c in 0..cols {
                    let col: Vec<f64> = b.data.column(c).iter().copied().collect();
                    let bt = b.design.tr_mul_vec(&col);
                    w.column_mut(c).copy_from_slice(&factor.half_solve(&bt)?);
                }
                let gram = b.data.transpose() * &b.data / s2 - w.transpose() * w / (s2 * s2);
                Ok(BlockStats {
                    logdet: nb as f64 * s2.ln() + factor.logdet() - prior_logdet,
                    gram,
                })
            }
        }
    }

    fn totals(&self, theta: &[f64], cfg: &EngineConfig) -> Result<(f64, DMatrix<f64>)> {
        let st = self.theta_state(theta, cfg.route)?;
        let stats = par::map(&self.blocks, cfg.parallel, |b| self.block_stats(b, &st, cfg.route));
        let k = self.x.ncols();
        let mut logdet = 0.0;
        let mut gram = DMatrix::zeros(k + 1, k + 1);
        for s in stats {
            let s = s?;
            logdet += s.logdet;
            gram += s.gram;
        }
        Ok((logdet, gram))
    }

    /// `log N(y | Xβ, σ² I + B Q⁻¹ Bᵀ)`.
    pub fn marginal_loglik(&self, theta: &[f64], beta: &[f64], cfg: &EngineConfig) -> Result<f64> {
        let k = self.x.ncols();
        if beta.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: beta.len(),
            });
        }
        let (logdet, g) = self.totals(theta, cfg)?;
        let mut quad = g[(k, k)];
        for i in 0..k {
            quad -= 2.0 * beta[i] * g[(i, k)];
            for j in 0..k {
                quad += beta[i] * g[(i, j)] * beta[j];
            }
        }
        let ll = -0.5 * (self.n_obs() as f64 * LN_2PI + logdet + quad);
        if !ll.is_finite() {
            return Err(Error::NonFinite("marginal log-likelihood".into()));
        }
        Ok(ll)
    }

    /// Log-likelihood maximized over β (generalized least squares).
    pub fn profile(&self, theta: &[f64], cfg: &EngineConfig) -> Result<Profile> {
        let k = self.x.ncols();
        let (logdet, g) = self.totals(theta, cfg)?;
        let (beta, explained) = if k == 0 {
            (Vec::new(), 0.0)
        } else {
            let a = g.view((0, 0), (k, k)).into_owned();
            let c = g.view((0, k), (k, 1)).into_owned();
            let chol = a
                .cholesky()
                .ok_or_else(|| Error::InvalidValue("fixed-effect design is rank deficient".into()))?;
            let beta = chol.solve(&c);
            let explained = (c.transpose() * &beta)[(0, 0)];
            (beta.iter().copied().collect(), explained)
        };
        let loglik = -0.5 * (self.n_obs() as f64 * LN_2PI + logdet + g[(k, k)] - explained);
        if !loglik.is_finite() {
            return Err(Error::NonFinite("profiled log-likelihood".into()));
        }
        Ok(Profile { loglik, beta })
    }

    fn residual(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.x.ncols(),
                got: beta.len(),
            });
        }
        Ok((0..self.n_obs())
            .map(|r| self.y[r] - (0..beta.len()).map(|c| self.x[(r, c)] * beta[c]).sum::<f64>())
            .collect())
    }

    /// `z = Q_post⁻¹ Bᵀ (y − Xβ) / σ²`, blocks concatenated. The covariance
    /// route computes the same vector as `Q_b⁻¹ Bᵀ Σ_b⁻¹ (y − Xβ)`.
    pub fn posterior_mean(&self, theta: &[f64], beta: &[f64], cfg: &EngineConfig) -> Result<Vec<f64>> {
        let resid = self.residual(beta)?;
        let st = self.theta_state(theta, cfg.route)?;
        let parts = par::map(&self.blocks, cfg.parallel, |b| -> Result<Vec<f64>> {
            if b.dim == 0 {
                return Ok(Vec::new());
            }
            let rb: Vec<f64> = b.spec.rows.iter().map(|&r| resid[r]).collect();
            if self.route_for(b, cfg.route) == Route::Covariance {
                return self.covariance_posterior_mean(b, &st, rb);
            }
            let (q, symbolic, _) = self.block_posterior(b, &st);
            let factor = symbolic.factor(&q)?;
            let rb: Vec<f64> = rb.iter().map(|r| r / st.sigma2).collect();
            factor.solve(&b.design.tr_mul_vec(&rb))
        });
        let mut out = Vec::with_capacity(self.n_latent());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn covariance_posterior_mean(&self, b: &Block, st: &ThetaState, resid: Vec<f64>) -> Result<Vec<f64>> {
        let mut sigma = self.block_covariance(b, st);
        dense::cholesky_in_place(&mut sigma)?;
        let mut alpha = DMatrix::from_column_slice(resid.len(), 1, &resid);
        dense::forward_in_place(&sigma, &mut alpha);
        dense::backward_in_place(&sigma, &mut alpha);
        let mut z = vec![0.0; b.dim];
        for (t, &off) in b.spec.terms.iter().zip(&b.offsets) {
            match &self.components[t.component] {
                Component::Iid { variance } => {
                    let v = st.theta[*variance];
                    for (r, (&g, &w)) in t.index.iter().zip(&t.weight).enumerate() {
                        z[off + g] += v * w * alpha[r];
                    }
                }
                Component::Field { pool, .. } => {
                    let mut rhs = vec![0.0; t.size];
                    for (r, (&s, &w)) in t.index.iter().zip(&t.weight).enumerate() {
                        for &(node, pw) in pool.row(s) {
                            rhs[node] += w * pw * alpha[r];
                        }
                    }
                    let f = st.fields[t.component].as_ref().unwrap();
                    z[off..off + t.size].copy_from_slice(&f.factor.solve(&rhs)?);
                }
            }
        }
        Ok(z)
    }

    /// Posterior precision `Q_b + BᵀB/σ²` of one block.
    pub fn posterior_precision(&self, theta: &[f64], block: usize) -> Result<SymCsc> {
        let st = self.theta_state(theta, Route::Precision)?;
        Ok(self.block_posterior(&self.blocks[block], &st).0)
    }

    /// Maximizes the profiled log-likelihood over log θ inside `bounds`.
    pub fn fit(&self, theta0: &[f64], bounds: &Bounds, cfg: &EngineConfig) -> Result<FitResult> {
        self.check_theta(theta0)?;
        if bounds.lower.len() != theta0.len() {
            return Err(Error::DimensionMismatch {
                expected: theta0.len(),
                got: bounds.lower.len(),
            });
        }
        if !bounds.contains(theta0) {
            return Err(Error::InvalidValue("starting point outside the bounds".into()));
        }
        let free: Vec<usize> = (0..theta0.len())
            .filter(|&i| bounds.lower[i] < bounds.upper[i])
            .collect();
        let lo: Vec<f64> = free.iter().map(|&i| bounds.lower[i].ln()).collect();
        let hi: Vec<f64> = free.iter().map(|&i| bounds.upper[i].ln()).collect();
        let to_theta = |x: &[f64]| {
            let mut t = theta0.to_vec();
            for (&i, &v) in free.iter().zip(x) {
                t[i] = v.exp().clamp(bounds.lower[i], bounds.upper[i]);
            }
            t
        };
        let trace = RefCell::new(Vec::new());
        let count = RefCell::new(0usize);
        let objective = |x: &[f64]| -> f64 {
            let theta = to_theta(x);
            let ll = self.profile(&theta, cfg).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);
            let mut c = count.borrow_mut();
            *c += 1;
            if cfg.record_trace {
                trace.borrow_mut().push(TraceRow {
                    evaluation: *c,
                    theta,
                    loglik: ll,
                });
            }
            -ll
        };

        let mut best_x: Vec<f64> = free.iter().map(|&i| theta0[i].ln()).collect();
        let mut best_f = objective(&best_x);
        if !best_f.is_finite() {
            return Err(Error::NonFinite("log-likelihood at the starting point".into()));
        }
        let mut rounds = 0;
        let mut converged = free.is_empty();
        let mut message = if free.is_empty() {
            "no free parameters".to_string()
        } else {
            format!("round limit {} reached", cfg.max_rounds)
        };
        if !free.is_empty() {
            for round in 0..cfg.max_rounds {
                let opts = NelderMeadOptions {
                    step: if round == 0 {
                        cfg.initial_step
                    } else {
                        0.5 * cfg.initial_step
                    },
                    max_evaluations: cfg.max_evaluations,
                    ftol: cfg.ftol,
                    xtol: cfg.xtol,
                };
                let r = nelder_mead(&objective, &best_x, &lo, &hi, &opts);
                rounds += 1;
                let gain = best_f - r.f;
                if r.f < best_f {
                    best_f = r.f;
                    best_x = r.x;
                }
                if round >= 1 && gain < cfg.tolerance {
                    converged = r.converged;
                    message = if r.converged {
                        format!("log-likelihood gain {gain:.2e} below tolerance")
                    } else {
                        "evaluation budget exhausted in final round".to_string()
                    };
                    break;
                }
            }
        }
        let theta = to_theta(&best_x);
        let prof = self.profile(&theta, cfg)?;
        let latent = self.posterior_mean(&theta, &prof.beta, cfg)?;
        let evaluations = *count.borrow();
        Ok(FitResult {
            theta_names: self.theta_names.clone(),
            theta,
            fixed_names: self.fixed_names.clone(),
            beta: prof.beta,
            latent,
            block_offsets: self.block_offsets.clone(),
            loglik: prof.loglik,
            convergence: Convergence {
                converged,
                rounds,
                evaluations,
                message,
            },
            trace: trace.into_inner(),
        })
    }
}
