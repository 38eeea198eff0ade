//! Matérn covariance and its SPDE (α = 2) precision on a P1 mesh.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::mesh::FemMatrices;
use crate::sparse::{factorize, CholeskyFactor, SymCsc};

const BESSEL_EPS: f64 = 1e-16;
const BESSEL_MAXIT: usize = 10_000;

fn chebev(c: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &cj in c[1..].iter().rev() {
        let sv = d;
        d = y2 * d - dd + cj;
        dd = sv;
    }
    x * d - dd + 0.5 * c[0]
}

/// Γ₁, Γ₂ and 1/Γ(1 ± μ) for |μ| ≤ 1/2 by Chebyshev expansion.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    const C1: [f64; 7] = [
        -1.142022680371168e0,
        6.5165112670737e-3,
        3.087090173086e-4,
        -3.4706269649e-6,
        6.9437664e-9,
        3.67795e-11,
        -1.356e-13,
    ];
    const C2: [f64; 8] = [
        1.843740587300905e0,
        -7.68528408447867e-2,
        1.2719271366546e-3,
        -4.9717367042e-6,
        -3.31261198e-8,
        2.423096e-10,
        -1.702e-13,
        -1.49e-15,
    ];
    let xx = 8.0 * mu * mu - 1.0;
    let gam1 = chebev(&C1, xx);
    let gam2 = chebev(&C2, xx);
    (gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1)
}

/// Modified Bessel function of the second kind `K_ν(x)` for `ν ≥ 0`, `x > 0`.
///
/// Temme's series below x = 2, Steed's continued fraction above, then
/// forward recurrence from the fractional order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k needs nu >= 0 and x > 0");
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut kmu, mut k1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < BESSEL_EPS {
            1.0
        } else {
            pimu / pimu.sin()
        };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < BESSEL_EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..=BESSEL_MAXIT {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * BESSEL_EPS {
                break;
            }
        }
        kmu = sum;
        k1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let (mut q1, mut q2) = (0.0, 1.0);
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=BESSEL_MAXIT {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < BESSEL_EPS {
                break;
            }
        }
        h *= a1;
        kmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        k1 = kmu * (mu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k1 + kmu;
        kmu = k1;
        k1 = next;
    }
    kmu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub kappa: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, kappa: f64, nu: f64) -> Result<Self> {
        for (name, v) in [("sigma2", sigma2), ("kappa", kappa), ("nu", nu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue(format!("Matérn {name} = {v}")));
            }
        }
        Ok(MaternParams { sigma2, kappa, nu })
    }

    /// ν = 1 field with practical range `range` and standard deviation `sd`.
    pub fn from_range_sd(range: f64, sd: f64) -> Result<Self> {
        MaternParams::new(sd * sd, 8f64.sqrt() / range, 1.0)
    }

    /// Distance at which the correlation is about 0.1: `√(8ν)/κ`.
    pub fn range(&self) -> f64 {
        (8.0 * self.nu).sqrt() / self.kappa
    }
}

/// `σ² 2^{1−ν}/Γ(ν) (κd)^ν K_ν(κd)`, equal to σ² at d = 0.
pub fn matern_cov(d: f64, p: &MaternParams) -> f64 {
    assert!(d >= 0.0, "negative distance {d}");
    if d == 0.0 {
        return p.sigma2;
    }
    let t = p.kappa * d;
    let k = bessel_k(p.nu, t);
    if k == 0.0 {
        return 0.0;
    }
    let log_c = (1.0 - p.nu) * 2f64.ln() - gamma(p.nu).ln() + p.nu * t.ln() + k.ln();
    (p.sigma2 * log_c.exp()).min(p.sigma2)
}

/// SPDE parameters: `(κ² − Δ) (τ x) = W` on the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpdeParams {
    pub kappa: f64,
    pub tau: f64,
}

impl SpdeParams {
    pub fn new(kappa: f64, tau: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite() && tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidValue(format!("SPDE kappa = {kappa}, tau = {tau}")));
        }
        Ok(SpdeParams { kappa, tau })
    }

    /// Parameters giving range `range` and marginal standard deviation `sd`.
    pub fn from_range_sd(range: f64, sd: f64) -> Result<Self> {
        if !(range > 0.0 && sd > 0.0) {
            return Err(Error::InvalidValue(format!("range = {range}, sd = {sd}")));
        }
        let kappa = 8f64.sqrt() / range;
        SpdeParams::new(kappa, 1.0 / (sd * kappa * (4.0 * PI).sqrt()))
    }

    pub fn range(&self) -> f64 {
        8f64.sqrt() / self.kappa
    }

    /// `1 / (4π κ² τ²)`.
    pub fn marginal_variance(&self) -> f64 {
        1.0 / (4.0 * PI * self.kappa * self.kappa * self.tau * self.tau)
    }

    pub fn sd(&self) -> f64 {
        self.marginal_variance().sqrt()
    }

    pub fn matern(&self) -> MaternParams {
        MaternParams {
            sigma2: self.marginal_variance(),
            kappa: self.kappa,
            nu: 1.0,
        }
    }
}

/// The three parameter-free pieces `C̃`, `G`, `G C̃⁻¹ G` stored on one
/// common pattern, so `Q(κ, τ)` is an elementwise combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdeBasis {
    pattern: SymCsc,
    mass: Vec<f64>,
    stiff: Vec<f64>,
    stiff2: Vec<f64>,
}

impl SpdeBasis {
    pub fn new(fem: &FemMatrices) -> Self {
        let m = fem.mass_lumped.len();
        let g = fem.stiffness.to_full();
        let inv_c: Vec<f64> = fem.mass_lumped.iter().map(|c| 1.0 / c).collect();
        let gcg = SymCsc::from_full(&g.matmul(&g.scale_rows(&inv_c)));
        let zeros: Vec<_> = gcg
            .lower()
            .triplets()
            .chain(fem.stiffness.lower().triplets())
            .map(|(i, j, _)| (i, j, 0.0))
            .chain((0..m).map(|i| (i, i, 0.0)))
            .collect();
        let aligned = |extra: Vec<(usize, usize, f64)>| {
            let mut t = zeros.clone();
            t.extend(extra);
            SymCsc::from_triplets(m, &t)
        };
        let mass = aligned(fem.mass_lumped.iter().enumerate().map(|(i, &c)| (i, i, c)).collect());
        let stiff = aligned(fem.stiffness.lower().triplets().collect());
        let stiff2 = aligned(gcg.lower().triplets().collect());
        SpdeBasis {
            mass: mass.lower().values().to_vec(),
            stiff: stiff.lower().values().to_vec(),
            stiff2: stiff2.lower().values().to_vec(),
            pattern: stiff2,
        }
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    /// Pattern shared by every `Q(κ, τ)`.
    pub fn pattern(&self) -> &SymCsc {
        &self.pattern
    }

    /// `τ² (κ⁴ C̃ + 2κ² G + G C̃⁻¹ G)`.
    pub fn precision(&self, p: &SpdeParams) -> SymCsc {
        let t2 = p.tau * p.tau;
        let k2 = p.kappa * p.kappa;
        let (a, b, c) = (t2 * k2 * k2, 2.0 * t2 * k2, t2);
        let mut q = self.pattern.clone();
        for (((v, m), g), g2) in q
            .lower_mut()
            .values_mut()
            .iter_mut()
            .zip(&self.mass)
            .zip(&self.stiff)
            .zip(&self.stiff2)
        {
            *v = a * m + b * g + c * g2;
        }
        q
    }
}

/// SPDE precision for one parameter pair; checked positive definite.
pub fn spde_precision(fem: &FemMatrices, p: &SpdeParams) -> Result<SymCsc> {
    let q = SpdeBasis::new(fem).precision(p);
    factorize(&q)?;
    Ok(q)
}

/// One draw `x ~ N(0, Q⁻¹)` from seeded standard normals.
pub fn sample_field(q: &SymCsc, seed: u64) -> Result<Vec<f64>> {
    let factor = factorize(q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_factor(&factor, &mut rng)
}

/// Draw using an existing factor of `Q`; consumes `dim` normals from `rng`.
pub fn sample_with_factor<R: rand::Rng>(factor: &CholeskyFactor, rng: &mut R) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..factor.dim()).map(|_| StandardNormal.sample(rng)).collect();
    factor.transform_normals(&z)
}
