//! Parametric superpopulation families (two parameters each).
//!
//! | family      | θ₁     | θ₂     | support |
//! |-------------|--------|--------|---------|
//! | `gamma`     | shape  | scale  | (0, ∞)  |
//! | `weibull`   | shape  | scale  | (0, ∞)  |
//! | `lognormal` | μ      | σ      | (0, ∞)  |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadGrid;
use crate::special::{
    digamma, gamma_p, gamma_p_inv, gamma_q, ln_gamma, norm_cdf, norm_quantile, trigamma, EULER_GAMMA, LN_SQRT_2PI,
};

/// Floor used when clamping moment-based starting values into the domain.
pub const DOMAIN_FLOOR: f64 = 1e-8;

const MLE_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gamma,
    Weibull,
    Lognormal,
}

/// A validated parameter vector θ for some family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta([f64; 2]);

impl Theta {
    pub fn new(family: Family, values: [f64; 2]) -> Result<Self> {
        family.check(values)?;
        Ok(Theta(values))
    }

    /// Skips validation; used where values come from an unconstrained
    /// reparameterization that is in-domain by construction.
    pub(crate) fn from_raw(values: [f64; 2]) -> Self {
        Theta(values)
    }

    pub fn values(&self) -> [f64; 2] {
        self.0
    }
}

impl std::ops::Index<usize> for Theta {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gamma" => Ok(Family::Gamma),
            "weibull" => Ok(Family::Weibull),
            "lognormal" => Ok(Family::Lognormal),
            other => Err(Error::InvalidInput(format!("unknown family `{other}`"))),
        }
    }
}

/// Per-θ constants so repeated log-density evaluation on a fixed grid is an
/// affine form in (ln y, y) for gamma and lognormal, plus one `exp` for weibull.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedLogDensity {
    family: Family,
    c: [f64; 4],
}

impl PreparedLogDensity {
    #[inline]
    pub(crate) fn eval(&self, y: f64, ln_y: f64) -> f64 {
        let c = &self.c;
        match self.family {
            // c0 + (k−1) ln y − y/s
            Family::Gamma => c[0] + c[1] * ln_y - c[2] * y,
            // c0 + (k−1) ln y − exp(k (ln y − ln λ))
            Family::Weibull => c[0] + c[1] * ln_y - (c[2] * (ln_y - c[3])).exp(),
            // c0 − ln y − (ln y − μ)² / (2σ²)
            Family::Lognormal => {
                let d = ln_y - c[1];
                c[0] - ln_y - d * d * c[2]
            }
        }
    }
}

/// Weighted mean and (divisor Σw) variance.
pub(crate) fn weighted_mean_var(x: impl Iterator<Item = f64> + Clone, w: &[f64]) -> (f64, f64) {
    let total: f64 = w.iter().sum();
    let mean = x.clone().zip(w).map(|(v, wi)| wi * v).sum::<f64>() / total;
    let var = x.zip(w).map(|(v, wi)| wi * (v - mean) * (v - mean)).sum::<f64>() / total;
    (mean, var)
}

fn check_weighted(y: &[f64], w: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if y.len() != w.len() {
        return Err(Error::Shape {
            expected: y.len(),
            got: w.len(),
        });
    }
    if let Some(bad) = w.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("weights must be positive, found {bad}")));
    }
    if let Some(bad) = y.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::OutsideSupport(*bad));
    }
    Ok(())
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gamma, Family::Weibull, Family::Lognormal];

    pub fn id(&self) -> &'static str {
        match self {
            Family::Gamma => "gamma",
            Family::Weibull => "weibull",
            Family::Lognormal => "lognormal",
        }
    }

    pub fn param_names(&self) -> [&'static str; 2] {
        match self {
            Family::Gamma | Family::Weibull => ["shape", "scale"],
            Family::Lognormal => ["mu", "sigma"],
        }
    }

    /// Which parameters are constrained to (0, ∞).
    pub fn positive_params(&self) -> [bool; 2] {
        match self {
            Family::Gamma | Family::Weibull => [true, true],
            Family::Lognormal => [false, true],
        }
    }

    pub fn check(&self, values: [f64; 2]) -> Result<()> {
        for (i, (&v, positive)) in values.iter().zip(self.positive_params()).enumerate() {
            if !v.is_finite() || (positive && v <= 0.0) {
                return Err(Error::ParamDomain {
                    family: self.id(),
                    name: self.param_names()[i],
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn theta(&self, a: f64, b: f64) -> Result<Theta> {
        Theta::new(*self, [a, b])
    }

    pub(crate) fn prepare(&self, theta: &Theta) -> PreparedLogDensity {
        let [a, b] = theta.0;
        let c = match self {
            Family::Gamma => [-ln_gamma(a) - a * b.ln(), a - 1.0, 1.0 / b, 0.0],
            Family::Weibull => [a.ln() - a * b.ln(), a - 1.0, a, b.ln()],
            Family::Lognormal => [-b.ln() - LN_SQRT_2PI, a, 0.5 / (b * b), 0.0],
        };
        PreparedLogDensity { family: *self, c }
    }

    /// log f_θ(y); −∞ outside the support.
    pub fn log_density(&self, theta: &Theta, y: f64) -> f64 {
        if !(y > 0.0) {
            return f64::NEG_INFINITY;
        }
        if y.is_infinite() {
            return f64::NEG_INFINITY;
        }
        self.prepare(theta).eval(y, y.ln())
    }

    /// f_θ(y); 0 outside the support.
    pub fn density(&self, theta: &Theta, y: f64) -> f64 {
        self.log_density(theta, y).exp()
    }

    /// Score u_θ(y) = ∇_θ log f_θ(y).
    pub fn score(&self, theta: &Theta, y: f64) -> Result<[f64; 2]> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::OutsideSupport(y));
        }
        let [a, b] = theta.0;
        let ly = y.ln();
        Ok(match self {
            Family::Gamma => [ly - b.ln() - digamma(a), (y - a * b) / (b * b)],
            Family::Weibull => {
                let t = ly - b.ln();
                let x = (a * t).exp();
                [1.0 / a + t - x * t, a / b * (x - 1.0)]
            }
            Family::Lognormal => {
                let d = ly - a;
                [d / (b * b), -1.0 / b + d * d / (b * b * b)]
            }
        })
    }

    /// ∇_θ u_θ(y), the Hessian of log f_θ(y) in θ.
    pub fn score_jacobian(&self, theta: &Theta, y: f64) -> Result<[[f64; 2]; 2]> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::OutsideSupport(y));
        }
        let [a, b] = theta.0;
        let ly = y.ln();
        Ok(match self {
            Family::Gamma => {
                let off = -1.0 / b;
                [[-trigamma(a), off], [off, a / (b * b) - 2.0 * y / (b * b * b)]]
            }
            Family::Weibull => {
                let t = ly - b.ln();
                let x = (a * t).exp();
                let off = (x - 1.0) / b + a * x * t / b;
                [
                    [-1.0 / (a * a) - x * t * t, off],
                    [off, -a / (b * b) * (x - 1.0) - a * a * x / (b * b)],
                ]
            }
            Family::Lognormal => {
                let d = ly - a;
                let off = -2.0 * d / (b * b * b);
                [[-1.0 / (b * b), off], [off, 1.0 / (b * b) - 3.0 * d * d / b.powi(4)]]
            }
        })
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, theta: &Theta, rng: &mut R) -> f64 {
        let [a, b] = theta.0;
        match self {
            Family::Gamma => {
                // rand_distr's Gamma is the Marsaglia–Tsang squeeze sampler
                let g = rand_distr::Gamma::new(a, b).expect("validated parameters");
                g.sample(rng)
            }
            Family::Weibull => {
                let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
                b * (-u.ln()).powf(1.0 / a)
            }
            Family::Lognormal => {
                let z: f64 = StandardNormal.sample(rng);
                (a + b * z).exp()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: &Theta, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Family::Gamma => {
                let g = rand_distr::Gamma::new(theta[0], theta[1]).expect("validated parameters");
                (0..n).map(|_| g.sample(rng)).collect()
            }
            _ => (0..n).map(|_| self.sample_one(theta, rng)).collect(),
        }
    }

    pub fn cdf(&self, theta: &Theta, y: f64) -> f64 {
        if !(y > 0.0) {
            return 0.0;
        }
        let [a, b] = theta.0;
        match self {
            Family::Gamma => gamma_p(a, y / b),
            Family::Weibull => -(-(y / b).powf(a)).exp_m1(),
            Family::Lognormal => norm_cdf((y.ln() - a) / b),
        }
    }

    /// Survival function 1 − F, accurate in the upper tail.
    pub fn sf(&self, theta: &Theta, y: f64) -> f64 {
        if !(y > 0.0) {
            return 1.0;
        }
        let [a, b] = theta.0;
        match self {
            Family::Gamma => gamma_q(a, y / b),
            Family::Weibull => (-(y / b).powf(a)).exp(),
            Family::Lognormal => norm_cdf(-(y.ln() - a) / b),
        }
    }

    /// G⁻¹(p).
    pub fn quantile(&self, theta: &Theta, p: f64) -> f64 {
        let [a, b] = theta.0;
        match self {
            Family::Gamma => b * gamma_p_inv(a, p),
            Family::Weibull => b * (-(-p).ln_1p()).powf(1.0 / a),
            Family::Lognormal => (a + b * norm_quantile(p)).exp(),
        }
    }

    pub fn mean(&self, theta: &Theta) -> f64 {
        let [a, b] = theta.0;
        match self {
            Family::Gamma => a * b,
            Family::Weibull => b * ln_gamma(1.0 + 1.0 / a).exp(),
            Family::Lognormal => (a + 0.5 * b * b).exp(),
        }
    }

    pub fn variance(&self, theta: &Theta) -> f64 {
        let [a, b] = theta.0;
        match self {
            Family::Gamma => a * b * b,
            Family::Weibull => {
                let g1 = ln_gamma(1.0 + 1.0 / a).exp();
                let g2 = ln_gamma(1.0 + 2.0 / a).exp();
                b * b * (g2 - g1 * g1)
            }
            Family::Lognormal => (b * b).exp_m1() * (2.0 * a + b * b).exp(),
        }
    }

    pub fn median(&self, theta: &Theta) -> f64 {
        let [a, b] = theta.0;
        match self {
            Family::Gamma => b * gamma_p_inv(a, 0.5),
            Family::Weibull => b * std::f64::consts::LN_2.powf(1.0 / a),
            Family::Lognormal => a.exp(),
        }
    }

    /// Integration grid covering the bulk of f_θ: a single segment on
    /// [0, G⁻¹(1e-14)] followed by geometrically spaced segments up to
    /// G⁻¹(1 − 1e-14).
    pub fn model_grid(&self, theta: &Theta, subdivisions: usize) -> QuadGrid {
        let lo = self.quantile(theta, 1e-14);
        let hi = self.quantile(theta, 1.0 - 1e-14);
        let body = QuadGrid::geometric(lo, hi, subdivisions.max(1)).expect("quantiles ordered");
        let mut segs = vec![(0.0, lo)];
        segs.extend_from_slice(body.segments());
        QuadGrid::from_segments(segs).expect("segments ordered")
    }

    /// I(θ) = ∫ u uᵀ f_θ by quadrature on `grid`.
    pub fn fisher_information(&self, theta: &Theta, grid: &QuadGrid) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (&y, &w) in grid.nodes().iter().zip(grid.kronrod_weights()) {
            let f = self.density(theta, y);
            if f == 0.0 {
                continue;
            }
            let u = self.score(theta, y).expect("grid nodes lie in the support");
            let wf = w * f;
            out[0][0] += wf * u[0] * u[0];
            out[0][1] += wf * u[0] * u[1];
            out[1][1] += wf * u[1] * u[1];
        }
        out[1][0] = out[0][1];
        out
    }

    /// Σ wᵢ log f_θ(yᵢ).
    pub fn weighted_log_likelihood(&self, theta: &Theta, y: &[f64], w: &[f64]) -> f64 {
        let p = self.prepare(theta);
        y.iter().zip(w).map(|(&v, &wi)| wi * p.eval(v, v.ln())).sum()
    }

    /// Σ wᵢ u_θ(yᵢ) / Σ wᵢ.
    pub fn mean_score(&self, theta: &Theta, y: &[f64], w: &[f64]) -> [f64; 2] {
        let total: f64 = w.iter().sum();
        let mut g = [0.0; 2];
        for (&v, &wi) in y.iter().zip(w) {
            let u = self.score(theta, v).unwrap_or([f64::NAN; 2]);
            g[0] += wi * u[0];
            g[1] += wi * u[1];
        }
        [g[0] / total, g[1] / total]
    }

    /// Method-of-moments starting value from weighted moments.
    pub fn moment_init(&self, y: &[f64], w: &[f64]) -> Result<Theta> {
        check_weighted(y, w)?;
        let clamp = |v: f64| {
            if v.is_finite() {
                v.max(DOMAIN_FLOOR)
            } else {
                DOMAIN_FLOOR
            }
        };
        match self {
            Family::Gamma => {
                let (m, v) = weighted_mean_var(y.iter().copied(), w);
                degenerate_check(v, m)?;
                Ok(Theta([clamp(m * m / v), clamp(v / m)]))
            }
            Family::Weibull => {
                let (m, v) = weighted_mean_var(y.iter().map(|x| x.ln()), w);
                degenerate_check(v, m)?;
                // log Y = log λ + (Gumbel-min)/k: Var = π²/(6k²), E = log λ − γ/k
                let k = std::f64::consts::PI / (6.0 * v).sqrt();
                let lambda = (m + EULER_GAMMA / k).exp();
                Ok(Theta([clamp(k), clamp(lambda)]))
            }
            Family::Lognormal => {
                let (m, v) = weighted_mean_var(y.iter().map(|x| x.ln()), w);
                degenerate_check(v, m)?;
                Ok(Theta([m, clamp(v.sqrt())]))
            }
        }
    }

    /// Maximizer of Σ wᵢ log f_θ(yᵢ).
    pub fn weighted_mle(&self, y: &[f64], w: &[f64]) -> Result<Theta> {
        check_weighted(y, w)?;
        let total: f64 = w.iter().sum();
        let mean_w = |f: &dyn Fn(f64) -> f64| y.iter().zip(w).map(|(&v, &wi)| wi * f(v)).sum::<f64>() / total;
        match self {
            Family::Lognormal => {
                let (m, v) = weighted_mean_var(y.iter().map(|x| x.ln()), w);
                degenerate_check(v, m)?;
                Ok(Theta([m, v.sqrt()]))
            }
            Family::Gamma => {
                let m = mean_w(&|v| v);
                let mlog = mean_w(&|v| v.ln());
                let s = m.ln() - mlog;
                if !(s > 1e-14) {
                    return Err(Error::DegenerateSample("all observations equal".into()));
                }
                // solve ln k − ψ(k) = s; the left side is decreasing in k
                let resid = |k: f64| k.ln() - digamma(k) - s;
                let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
                let (mut lo, mut hi) = (1e-12_f64, 1e12_f64);
                for _ in 0..MLE_MAX_ITER {
                    let r = resid(k);
                    if r == 0.0 {
                        return Ok(Theta([k, m / k]));
                    }
                    if r > 0.0 {
                        lo = lo.max(k);
                    } else {
                        hi = hi.min(k);
                    }
                    let mut next = k - r / (1.0 / k - trigamma(k));
                    if !(next > lo && next < hi) {
                        next = (lo * hi).sqrt();
                    }
                    if (next - k).abs() <= 1e-15 * k {
                        return Ok(Theta([next, m / next]));
                    }
                    k = next;
                }
                Err(Error::Convergence {
                    iterations: MLE_MAX_ITER,
                    last: [k, m / k],
                })
            }
            Family::Weibull => weibull_mle(y, w),
        }
    }
}

fn degenerate_check(v: f64, m: f64) -> Result<()> {
    if !(v > 1e-24 * (m * m).max(1.0)) || !v.is_finite() {
        return Err(Error::DegenerateSample("weighted variance is zero".into()));
    }
    Ok(())
}

/// Weibull profile equation in the shape k:
/// Σw y^k ln y / Σw y^k − 1/k − mean_w(ln y) = 0, increasing in k.
/// Safeguarded Newton with a bisection fallback.
fn weibull_mle(y: &[f64], w: &[f64]) -> Result<Theta> {
    let total: f64 = w.iter().sum();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let lmax = ly.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mlog = ly.iter().zip(w).map(|(l, wi)| wi * l).sum::<f64>() / total;
    // shift by max ln y to keep y^k finite
    let t: Vec<f64> = ly.iter().map(|l| l - lmax).collect();
    let moments = |k: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (ti, wi) in t.iter().zip(w) {
            let e = wi * (k * ti).exp();
            s0 += e;
            s1 += e * ti;
            s2 += e * ti * ti;
        }
        (s0, s1 / s0, s2 / s0)
    };
    let profile = |k: f64| {
        let (_, m1, m2) = moments(k);
        let f = m1 + lmax - 1.0 / k - mlog;
        let df = m2 - m1 * m1 + 1.0 / (k * k);
        (f, df)
    };
    let spread = ly.iter().zip(w).map(|(l, wi)| wi * (l - mlog).powi(2)).sum::<f64>() / total;
    if !(spread > 1e-24) {
        return Err(Error::DegenerateSample("all observations equal".into()));
    }
    let mut k = std::f64::consts::PI / (6.0 * spread).sqrt();
    let (mut lo, mut hi) = (k, k);
    while profile(lo).0 > 0.0 {
        lo *= 0.5;
        if lo < 1e-10 {
            break;
        }
    }
    while profile(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e10 {
            break;
        }
    }
    for _ in 0..MLE_MAX_ITER {
        let (f, df) = profile(k);
        if f == 0.0 {
            let (s0, _, _) = moments(k);
            return Ok(Theta([k, ((s0 / total).ln() / k + lmax).exp()]));
        }
        if f > 0.0 {
            hi = k;
        } else {
            lo = k;
        }
        let mut next = k - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - k).abs() <= 1e-15 * k || hi - lo <= 4.0 * f64::EPSILON * hi {
            let (s0, _, _) = moments(next);
            let lambda = ((s0 / total).ln() / next + lmax).exp();
            return Ok(Theta([next, lambda]));
        }
        k = next;
    }
    let (s0, _, _) = moments(k);
    Err(Error::Convergence {
        iterations: MLE_MAX_ITER,
        last: [k, ((s0 / total).ln() / k + lmax).exp()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn th(f: Family, a: f64, b: f64) -> Theta {
        f.theta(a, b).unwrap()
    }

    fn random_theta(f: Family, rng: &mut ChaCha8Rng) -> Theta {
        let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
        match f {
            Family::Gamma => th(f, u(rng, 0.5, 20.0), 10f64.powf(u(rng, -2.0, 5.0))),
            Family::Weibull => th(f, u(rng, 0.5, 10.0), 10f64.powf(u(rng, -2.0, 5.0))),
            Family::Lognormal => th(f, u(rng, -5.0, 12.0), u(rng, 0.1, 3.0)),
        }
    }

    #[test]
    fn density_examples() {
        let g = Family::Gamma;
        assert!((g.density(&th(g, 1.0, 1.0), 1e-300) - 1.0).abs() < 1e-15);
        let at_mode = g.density(&th(g, 2.0, 35_000.0), 35_000.0);
        assert!((at_mode / 1.051_084_117_632_692_3e-5 - 1.0).abs() < 1e-13);
        let ln = Family::Lognormal;
        let med = 9f64.exp();
        let expect = 1.0 / (med * 2.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((ln.density(&th(ln, 9.0, 2.0), med) / expect - 1.0).abs() < 1e-13);
        assert_eq!(g.density(&th(g, 2.0, 1.0), -1.0), 0.0);
        assert!(Theta::new(g, [0.0, 1.0]).is_err());
        assert!(Theta::new(ln, [-4.0, 1.0]).is_ok());
        assert!(matches!(
            Theta::new(ln, [1.0, -1.0]),
            Err(Error::ParamDomain { name: "sigma", .. })
        ));
    }

    #[test]
    fn score_zeros() {
        let g = Family::Gamma;
        let t = th(g, 2.0, 35_000.0);
        assert!(g.score(&t, 70_000.0).unwrap()[1].abs() < 1e-20);
        let u = g.score(&t, 53_417.178_905_855_235_8).unwrap();
        assert!(u[0].abs() < 1e-14, "{u:?}");
        assert!(g.score(&t, 0.0).is_err());
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for f in Family::ALL {
            for _ in 0..334 {
                let t = random_theta(f, &mut rng);
                let p = rng.gen::<f64>() * 0.998 + 0.001;
                let y = f.quantile(&t, p);
                let u = f.score(&t, y).unwrap();
                let hess = f.score_jacobian(&t, y).unwrap();
                for j in 0..2 {
                    let step = 1e-5 * t[j].abs().max(1e-2);
                    let mut hi = t.values();
                    let mut lo = t.values();
                    hi[j] += step;
                    lo[j] -= step;
                    let (thi, tlo) = (Theta::from_raw(hi), Theta::from_raw(lo));
                    let fd = (f.log_density(&thi, y) - f.log_density(&tlo, y)) / (2.0 * step);
                    let scale = u[j].abs().max(1.0 / t[j].abs().max(1e-2));
                    worst = worst.max((fd - u[j]).abs() / scale);
                    let uh = f.score(&thi, y).unwrap();
                    let ul = f.score(&tlo, y).unwrap();
                    for i in 0..2 {
                        let fd2 = (uh[i] - ul[i]) / (2.0 * step);
                        let sc = hess[i][j]
                            .abs()
                            .max(1.0 / (t[i].abs().max(1e-2) * t[j].abs().max(1e-2)));
                        assert!((fd2 - hess[i][j]).abs() / sc < 1e-5, "{f} {t:?} y={y} ({i},{j})");
                    }
                }
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn densities_integrate_to_one_and_fisher_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for f in Family::ALL {
            for _ in 0..34 {
                let t = random_theta(f, &mut rng);
                let grid = f.model_grid(&t, 400);
                let total = grid.integrate_fn(|y| f.density(&t, y)).kronrod;
                assert!((total - 1.0).abs() < 1e-8, "{f} {t:?}: {total}");
                let i = f.fisher_information(&t, &grid);
                assert!((i[0][1] - i[1][0]).abs() <= 1e-12 * i[0][1].abs().max(1e-300));
                let det = i[0][0] * i[1][1] - i[0][1] * i[1][0];
                assert!(i[0][0] > 0.0 && det > 0.0, "{f} {t:?}: {i:?}");
            }
        }
    }

    #[test]
    fn gamma_fisher_information_closed_form() {
        let g = Family::Gamma;
        let t = th(g, 2.0, 35_000.0);
        let i = g.fisher_information(&t, &g.model_grid(&t, 400));
        let exact = [
            [trigamma(2.0), 1.0 / 35_000.0],
            [1.0 / 35_000.0, 2.0 / 35_000f64.powi(2)],
        ];
        for a in 0..2 {
            for b in 0..2 {
                assert!((i[a][b] / exact[a][b] - 1.0).abs() < 1e-9, "{a}{b}");
            }
        }
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let g = Family::Gamma;
        let t = th(g, 2.0, 35_000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.sample(&t, 1_000_000, &mut rng);
        let w = vec![1.0; x.len()];
        let (m, v) = weighted_mean_var(x.iter().copied(), &w);
        assert!((m / 70_000.0 - 1.0).abs() < 0.005);
        assert!((v / (2.0 * 35_000f64.powi(2)) - 1.0).abs() < 0.02);

        let ln = Family::Lognormal;
        let mut y = ln.sample(&th(ln, 9.0, 2.0), 1_000_000, &mut rng);
        y.sort_by(f64::total_cmp);
        assert!((y[500_000] / 9f64.exp() - 1.0).abs() < 0.01);

        let wb = Family::Weibull;
        let tw = th(wb, 1.5, 10.0);
        let z = wb.sample(&tw, 200_000, &mut rng);
        let (mz, _) = weighted_mean_var(z.iter().copied(), &vec![1.0; z.len()]);
        assert!((mz / wb.mean(&tw) - 1.0).abs() < 0.01);

        for f in Family::ALL {
            let t = random_theta(f, &mut ChaCha8Rng::seed_from_u64(3));
            let a = f.sample(&t, 100, &mut ChaCha8Rng::seed_from_u64(9));
            let b = f.sample(&t, 100, &mut ChaCha8Rng::seed_from_u64(9));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weighted_mle_consistency_and_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (f, t) in [
            (Family::Gamma, th(Family::Gamma, 2.0, 35_000.0)),
            (Family::Weibull, th(Family::Weibull, 1.7, 20_000.0)),
            (Family::Lognormal, th(Family::Lognormal, 9.0, 2.0)),
        ] {
            let y = f.sample(&t, 100_000, &mut rng);
            let w: Vec<f64> = (0..y.len()).map(|_| 0.5 + rng.gen::<f64>()).collect();
            let est = f.weighted_mle(&y, &w).unwrap();
            for j in 0..2 {
                assert!((est[j] / t[j] - 1.0).abs() < 0.02, "{f}: {est:?}");
            }
            let g = f.mean_score(&est, &y, &w);
            for j in 0..2 {
                assert!(g[j].abs() * est[j].abs().max(1.0) < 1e-8, "{f} gradient {g:?}");
            }
            let w7: Vec<f64> = w.iter().map(|v| v * 7.3).collect();
            let est7 = f.weighted_mle(&y, &w7).unwrap();
            for j in 0..2 {
                assert!((est7[j] - est[j]).abs() <= 1e-9 * est[j].abs(), "{f}");
            }
        }
    }

    #[test]
    fn weighted_mle_weight_additivity() {
        let f = Family::Gamma;
        let y = [3.0, 5.5, 9.0, 1.2, 7.7];
        let est_a = f
            .weighted_mle(&[y.to_vec(), vec![4.0]].concat(), &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0])
            .unwrap();
        let est_b = f
            .weighted_mle(
                &[y.to_vec(), vec![4.0, 4.0]].concat(),
                &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            )
            .unwrap();
        for j in 0..2 {
            assert!((est_a[j] - est_b[j]).abs() <= 1e-12 * est_a[j]);
        }
        assert!(matches!(
            f.weighted_mle(&[2.0, 2.0, 2.0], &[1.0; 3]),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn moment_init_examples() {
        let d = 2.45e9f64.sqrt();
        let y = [70_000.0 - d, 70_000.0 + d];
        let t = Family::Gamma.moment_init(&y, &[1.0, 1.0]).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-12 && (t[1] / 35_000.0 - 1.0).abs() < 1e-12);
        let t2 = Family::Gamma.moment_init(&y, &[40.0, 40.0]).unwrap();
        assert_eq!(t.values(), t2.values());

        let y = [7f64.exp(), 11f64.exp()];
        let t = Family::Lognormal.moment_init(&y, &[1.0, 1.0]).unwrap();
        assert!((t[0] - 9.0).abs() < 1e-12 && (t[1] - 2.0).abs() < 1e-12);

        let wb = Family::Weibull;
        let tw = th(wb, 2.5, 100.0);
        let s = wb.sample(&tw, 200_000, &mut ChaCha8Rng::seed_from_u64(4));
        let init = wb.moment_init(&s, &vec![1.0; s.len()]).unwrap();
        assert!((init[0] / 2.5 - 1.0).abs() < 0.02 && (init[1] / 100.0 - 1.0).abs() < 0.02);

        assert!(matches!(
            Family::Gamma.moment_init(&[5.0, 5.0], &[1.0, 2.0]),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn quantile_inverts_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for f in Family::ALL {
            for _ in 0..20 {
                let t = random_theta(f, &mut rng);
                for &p in &[1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-7] {
                    let y = f.quantile(&t, p);
                    let back = if p > 0.5 { 1.0 - f.sf(&t, y) } else { f.cdf(&t, y) };
                    assert!((back - p).abs() < 1e-10 * p.max(1e-3), "{f} {t:?} {p}");
                }
            }
        }
        let g = Family::Gamma;
        let t = th(g, 2.0, 35_000.0);
        assert_eq!(g.mean(&t), 70_000.0);
        assert!((g.median(&t) - 58_742.144_650_583_12).abs() < 1e-6);
        assert!((Family::Lognormal.median(&th(Family::Lognormal, 9.0, 2.0)) - 8_103.083_927_575_384).abs() < 1e-8);
    }
}
