//! Contamination mechanisms, influence functions and α-influence curves.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::designs::SurveySample;
use crate::error::{Error, Result};
use crate::families::{Family, Theta};
use crate::linalg::{self, Mat2};
use crate::mhde::{maximize, AffinityObjective, MhdeOptions};
use crate::quadrature::QuadGrid;
use crate::special::{norm_cdf, t3_cdf, t3_pdf, t3_quantile, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    PointNormal,
    TruncT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Leverage {
    #[default]
    Independent,
    HighLeverage,
}

/// Selection probabilities for high-leverage replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LeverageRule {
    /// ∝ (1 − π)^(−10); favours large π.
    #[default]
    LargePi,
    /// ∝ π^(−10); favours small π, i.e. large weights.
    InversePi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub mechanism: Mechanism,
    /// Point-mass mean or t mode.
    pub location: f64,
    #[serde(default)]
    pub leverage: Leverage,
    #[serde(default)]
    pub leverage_rule: LeverageRule,
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::InvalidInput(format!(
                "epsilon must lie in [0, 0.5], got {}",
                self.epsilon
            )));
        }
        if !(self.location > 0.0) {
            return Err(Error::InvalidInput(format!(
                "location must be positive, got {}",
                self.location
            )));
        }
        Ok(())
    }

    /// The contaminating distribution, scaled against Var(Y) under the model.
    pub fn distribution(&self, family: Family, theta: &Theta) -> ContamDensity {
        let var = family.variance(theta);
        match self.mechanism {
            Mechanism::PointNormal => ContamDensity::normal(self.location, 0.1 * var.sqrt()),
            Mechanism::TruncT => ContamDensity::trunc_t(self.location, var),
        }
    }
}

/// Standard t₃ mass above `a`, first and second moments over (a, ∞).
fn t3_tail_moments(a: f64) -> (f64, f64, f64) {
    let q = 1.0 - t3_cdf(a);
    let m1 = 3f64.sqrt() / std::f64::consts::PI / (1.0 + a * a / 3.0);
    let m2 = 6.0 / std::f64::consts::PI * (std::f64::consts::FRAC_PI_2 - (a / 3f64.sqrt()).atan()) - 3.0 * q;
    (q, m1, m2)
}

/// Variance of z + σT, T ~ t₃, truncated to (0, ∞).
pub fn trunc_t_variance(z: f64, sigma: f64) -> f64 {
    let (q, m1, m2) = t3_tail_moments(-z / sigma);
    sigma * sigma * (m2 / q - (m1 / q).powi(2))
}

/// A contaminating density on (0, ∞).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContamDensity {
    /// N(mean, sd²) truncated to (0, ∞).
    Normal { mean: f64, sd: f64 },
    /// Location-scale t₃ with mode `mode`, truncated to (0, ∞).
    TruncT { mode: f64, scale: f64 },
}

impl ContamDensity {
    pub fn normal(mean: f64, sd: f64) -> Self {
        ContamDensity::Normal { mean, sd }
    }

    /// Narrow normal standing in for the point mass Δ_z.
    pub fn point_mass(z: f64) -> Self {
        ContamDensity::Normal { mean: z, sd: 1e-3 * z }
    }

    /// Scale chosen by bisection so the truncated variance equals `variance`.
    pub fn trunc_t(mode: f64, variance: f64) -> Self {
        let target = variance.sqrt();
        let (mut lo, mut hi) = (1e-9 * target, 10.0 * target);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if trunc_t_variance(mode, mid) < variance {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        ContamDensity::TruncT {
            mode,
            scale: 0.5 * (lo + hi),
        }
    }

    pub fn center(&self) -> f64 {
        match *self {
            ContamDensity::Normal { mean, .. } => mean,
            ContamDensity::TruncT { mode, .. } => mode,
        }
    }

    pub fn density(&self, y: f64) -> f64 {
        if !(y > 0.0) {
            return 0.0;
        }
        match *self {
            ContamDensity::Normal { mean, sd } => {
                let u = (y - mean) / sd;
                (-0.5 * u * u - LN_SQRT_2PI).exp() / sd / norm_cdf(mean / sd)
            }
            ContamDensity::TruncT { mode, scale } => {
                let q = 1.0 - t3_cdf(-mode / scale);
                t3_pdf((y - mode) / scale) / scale / q
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ContamDensity::Normal { mean, sd } => {
                let n = Normal::new(mean, sd).expect("positive sd");
                loop {
                    let v = n.sample(rng);
                    if v > 0.0 {
                        return v;
                    }
                }
            }
            ContamDensity::TruncT { mode, scale } => {
                let lo = t3_cdf(-mode / scale);
                loop {
                    let u = lo + (1.0 - lo) * rng.gen::<f64>();
                    let v = mode + scale * t3_quantile(u);
                    if v > 0.0 && v.is_finite() {
                        return v;
                    }
                }
            }
        }
    }

    /// Quadrature segments resolving the bulk of this density.
    pub fn grid(&self) -> QuadGrid {
        let segments: Vec<(f64, f64)> = match *self {
            ContamDensity::Normal { mean, sd } => {
                let (a, b) = ((mean - 10.0 * sd).max(0.0), mean + 10.0 * sd);
                let m = 40;
                (0..m)
                    .map(|i| {
                        (
                            a + (b - a) * i as f64 / m as f64,
                            a + (b - a) * (i + 1) as f64 / m as f64,
                        )
                    })
                    .collect()
            }
            ContamDensity::TruncT { mode, scale } => {
                // Core on ±20 scales, then geometric tails out to where the
                // t₃ tail mass is below 1e-12.
                let a = (mode - 20.0 * scale).max(0.0);
                let b = mode + 20.0 * scale;
                let mut s: Vec<(f64, f64)> = Vec::new();
                let core = QuadGrid::uniform(a, b, 80).expect("ordered");
                if a > 0.0 {
                    s.push((0.0, a));
                }
                s.extend_from_slice(core.segments());
                let tail = QuadGrid::geometric(b, mode + 1e5 * scale, 60).expect("ordered");
                s.extend_from_slice(tail.segments());
                s
            }
        };
        QuadGrid::from_segments(segments).expect("segments ordered")
    }
}

/// Replace ⌊εn⌋ responses by draws from the contamination mechanism.
pub fn contaminate<R: Rng + ?Sized>(
    sample: &SurveySample,
    spec: &ContaminationSpec,
    family: Family,
    theta: &Theta,
    rng: &mut R,
) -> Result<SurveySample> {
    spec.validate()?;
    let n = sample.len();
    let m = (spec.epsilon * n as f64 + 1e-9).floor() as usize;
    if m == 0 {
        return Ok(sample.clone());
    }
    let chosen: Vec<usize> = match spec.leverage {
        Leverage::Independent => index::sample(rng, n, m).into_vec(),
        Leverage::HighLeverage => {
            let pi = sample
                .pi
                .as_ref()
                .ok_or_else(|| Error::Design("high-leverage contamination needs inclusion probabilities".into()))?;
            // Gumbel-top-k: sampling without replacement ∝ exp(log-weight).
            let mut keys: Vec<(f64, usize)> = pi
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let lw = match spec.leverage_rule {
                        LeverageRule::LargePi => -10.0 * (1.0 - p).ln(),
                        LeverageRule::InversePi => -10.0 * p.ln(),
                    };
                    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                    (lw - (-u.ln()).ln(), i)
                })
                .collect();
            keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            keys.iter().take(m).map(|k| k.1).collect()
        }
    };
    let dist = spec.distribution(family, theta);
    let mut out = sample.clone();
    for i in chosen {
        out.y[i] = dist.sample(rng);
    }
    Ok(out)
}

/// Q = ½∫[∇u + ½uuᵀ]√(f g) with g = f_θ₀.
pub fn q_matrix(family: Family, theta: &Theta, grid: &QuadGrid) -> Mat2 {
    let mut q = [[0.0; 2]; 2];
    for (&y, &w) in grid.nodes().iter().zip(grid.kronrod_weights()) {
        let f = family.density(theta, y);
        if f == 0.0 {
            continue;
        }
        let u = family.score(theta, y).expect("positive node");
        let j = family.score_jacobian(theta, y).expect("positive node");
        for a in 0..2 {
            for b in 0..2 {
                q[a][b] += 0.5 * w * f * (j[a][b] + 0.5 * u[a] * u[b]);
            }
        }
    }
    linalg::symmetrize(&q)
}

/// IF(z) = −Q⁻¹ φ(z) with φ(z) = ¼u(z) at the model.
pub fn analytic_influence(family: Family, theta: &Theta, z: f64) -> Result<[f64; 2]> {
    if !(family.density(theta, z) > 0.0) {
        return Err(Error::OutsideSupport(z));
    }
    let q = q_matrix(family, theta, &family.model_grid(theta, 400));
    let inv = linalg::inverse(&q).ok_or(Error::DegenerateCurvature(linalg::sym_eigenvalues(&q)))?;
    let u = family.score(theta, z)?;
    let v = linalg::mul_vec(&inv, &[0.25 * u[0], 0.25 * u[1]]);
    Ok([-v[0], -v[1]])
}

/// Population-level mixture (1 − ε) f_θ₀ + ε h tabulated on a grid resolving
/// both components.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub family: Family,
    pub theta0: Theta,
    pub contam: ContamDensity,
    pub grid: QuadGrid,
    model: Vec<f64>,
    contam_values: Vec<f64>,
}

impl Mixture {
    pub fn new(family: Family, theta0: &Theta, contam: ContamDensity) -> Result<Self> {
        let grid = family.model_grid(theta0, 400).union(&contam.grid())?;
        let model = grid.nodes().iter().map(|&y| family.density(theta0, y)).collect();
        let contam_values = grid.nodes().iter().map(|&y| contam.density(y)).collect();
        Ok(Mixture {
            family,
            theta0: *theta0,
            contam,
            grid,
            model,
            contam_values,
        })
    }

    pub fn values(&self, eps: f64) -> Vec<f64> {
        self.model
            .iter()
            .zip(&self.contam_values)
            .map(|(f, h)| (1.0 - eps) * f + eps * h)
            .collect()
    }

    /// MHDE functional T(G_ε), started from `start`.
    pub fn mhde(&self, eps: f64, start: &Theta, opts: &MhdeOptions) -> Result<(Theta, bool)> {
        let obj = AffinityObjective::new(self.family, &self.grid, &self.values(eps))?;
        let opt = maximize(&obj, start, opts)?;
        Ok((opt.theta, opt.converged))
    }

    /// MLE functional: the θ solving ∫u_θ dG_ε = 0.
    pub fn mle(&self, eps: f64) -> Result<Theta> {
        let g = self.values(eps);
        let (y, w): (Vec<f64>, Vec<f64>) = self
            .grid
            .nodes()
            .iter()
            .zip(self.grid.kronrod_weights())
            .zip(&g)
            .filter(|((&y, &w), &gv)| y > 0.0 && w * gv > 0.0)
            .map(|((&y, &w), &gv)| (y, w * gv))
            .unzip();
        self.family.weighted_mle(&y, &w)
    }
}

/// Contamination share for a Gâteaux difference at the point mass `contam`:
/// small enough that ε·h stays below 1e-3·f_θ₀ where h peaks, so the mixture
/// is in its linear regime.
pub fn linear_regime_epsilon(family: Family, theta: &Theta, contam: &ContamDensity) -> f64 {
    let z = contam.center();
    let peak = contam.density(z);
    (1e-3 * family.density(theta, z) / peak).min(1e-3)
}

/// (T(G_ε) − T(G₀))/ε at population level, where T(G₀) is the maximizer on
/// the same grid (≈ θ₀; subtracting it cancels the quadrature error).
pub fn empirical_influence(
    family: Family,
    theta0: &Theta,
    contam: ContamDensity,
    eps: f64,
    opts: &MhdeOptions,
) -> Result<[f64; 2]> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(Error::InvalidInput(format!("epsilon must lie in (0, 0.5], got {eps}")));
    }
    let mix = Mixture::new(family, theta0, contam)?;
    let (base, ok0) = mix.mhde(0.0, theta0, opts)?;
    let (t, ok) = mix.mhde(eps, &base, opts)?;
    if !(ok0 && ok) {
        return Err(Error::Convergence {
            iterations: opts.nm_max_iter,
            last: t.values(),
        });
    }
    Ok([(t[0] - base[0]) / eps, (t[1] - base[1]) / eps])
}

/// Same difference quotient for the MLE functional.
pub fn empirical_influence_mle(family: Family, theta0: &Theta, contam: ContamDensity, eps: f64) -> Result<[f64; 2]> {
    let mix = Mixture::new(family, theta0, contam)?;
    let base = mix.mle(0.0)?;
    let t = mix.mle(eps)?;
    Ok([(t[0] - base[0]) / eps, (t[1] - base[1]) / eps])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub mhde: [f64; 2],
    pub mhde_converged: bool,
    /// None when the MLE functional could not be computed.
    pub mle: Option<[f64; 2]>,
}

impl CurvePoint {
    pub fn relative_bias(&self, theta0: &Theta) -> ([f64; 2], Option<[f64; 2]>) {
        let rb = |v: [f64; 2]| [v[0] / theta0[0] - 1.0, v[1] / theta0[1] - 1.0];
        (rb(self.mhde), self.mle.map(rb))
    }
}

/// T(G_ε) along `eps_grid`, warm-started from the previous solution.
pub fn alpha_curve(
    family: Family,
    theta0: &Theta,
    contam: ContamDensity,
    eps_grid: &[f64],
    opts: &MhdeOptions,
) -> Result<Vec<CurvePoint>> {
    if let Some(bad) = eps_grid.iter().find(|e| !(0.0..=0.5).contains(*e)) {
        return Err(Error::InvalidInput(format!("epsilon {bad} outside [0, 0.5]")));
    }
    let mix = Mixture::new(family, theta0, contam)?;
    let mut start = *theta0;
    let mut out = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let (theta, converged) = match mix.mhde(eps, &start, opts) {
            Ok(r) => r,
            Err(_) => (start, false),
        };
        if converged {
            start = theta;
        }
        out.push(CurvePoint {
            epsilon: eps,
            mhde: theta.values(),
            mhde_converged: converged,
            mle: mix.mle(eps).ok().map(|t| t.values()),
        });
    }
    Ok(out)
}
