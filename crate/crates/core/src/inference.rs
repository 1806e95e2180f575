//! Sandwich covariance A⁻¹ΣA⁻ᵀ, finite-population correction, Wald intervals
//! and Monte-Carlo intervals for model-derived population statistics.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::designs::{effective_sizes_from_sample, kish_neff, DesignKind, SurveySample};
use crate::error::{Error, Result};
use crate::families::{Family, Theta};
use crate::linalg::{self, Mat2};
use crate::mhde::{AffinityObjective, MhdeFit};
use crate::quadrature::QuadGrid;
use crate::special::norm_quantile;

/// Nodes where g falls below this fraction of its peak contribute nothing to φ.
pub const DENSITY_RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlugIn {
    #[default]
    Kde,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichParts {
    pub a: Mat2,
    pub sigma: Mat2,
    pub n_v_eff: f64,
    pub fpc: f64,
}

impl SandwichParts {
    /// A⁻¹ΣA⁻ᵀ.
    pub fn asymptotic_covariance(&self) -> Result<Mat2> {
        let inv = linalg::inverse(&self.a).ok_or(Error::DegenerateCurvature(linalg::sym_eigenvalues(&self.a)))?;
        Ok(linalg::symmetrize(&linalg::mul(
            &linalg::mul(&inv, &self.sigma),
            &linalg::transpose(&inv),
        )))
    }

    /// fpc · A⁻¹ΣA⁻ᵀ / n_V-eff, the covariance of θ̂.
    pub fn covariance(&self) -> Result<Mat2> {
        let c = self.asymptotic_covariance()?;
        Ok(if self.n_v_eff.is_infinite() {
            [[0.0; 2]; 2]
        } else {
            linalg::scale(&c, self.fpc / self.n_v_eff)
        })
    }
}

/// φ(y) = ¼ u_θ(y) √(f_θ(y)/g(y)) at each node; zero where g is below the floor
/// or the node lies outside the support.
pub fn phi_at(family: Family, theta: &Theta, g: &[f64], y: &[f64]) -> Vec<[f64; 2]> {
    let peak = g.iter().cloned().fold(0.0, f64::max);
    let floor = DENSITY_RATIO_FLOOR * peak;
    y.iter()
        .zip(g)
        .map(|(&yi, &gi)| {
            if !(gi > floor) || !(yi > 0.0) {
                return [0.0; 2];
            }
            let u = family.score(theta, yi).expect("positive node");
            let r = 0.25 * (family.density(theta, yi) / gi).sqrt();
            [u[0] * r, u[1] * r]
        })
        .collect()
}

/// Σ = ∫ φφᵀ g on `grid`.
pub fn sigma_matrix(family: Family, theta: &Theta, grid: &QuadGrid, g: &[f64]) -> Mat2 {
    let phi = phi_at(family, theta, g, grid.nodes());
    let mut s = [[0.0; 2]; 2];
    for ((p, &gi), &w) in phi.iter().zip(g).zip(grid.kronrod_weights()) {
        let k = w * gi;
        s[0][0] += k * p[0] * p[0];
        s[0][1] += k * p[0] * p[1];
        s[1][1] += k * p[1] * p[1];
    }
    s[1][0] = s[0][1];
    s
}

/// Finite-difference step for coordinate j.
pub fn fd_step(theta: f64) -> f64 {
    (1e-4 * theta.abs()).max(1e-6)
}

/// A = −∇²Γ by central differences with per-coordinate `steps`, symmetrized.
pub fn a_matrix_with_steps(obj: &AffinityObjective, theta: &Theta, steps: [f64; 2]) -> Mat2 {
    let t = theta.values();
    let at = |d0: f64, d1: f64| obj.raw(&Theta::from_raw([t[0] + d0, t[1] + d1]));
    let f0 = at(0.0, 0.0);
    let [h0, h1] = steps;
    let d00 = (at(h0, 0.0) - 2.0 * f0 + at(-h0, 0.0)) / (h0 * h0);
    let d11 = (at(0.0, h1) - 2.0 * f0 + at(0.0, -h1)) / (h1 * h1);
    let d01 = (at(h0, h1) - at(h0, -h1) - at(-h0, h1) + at(-h0, -h1)) / (4.0 * h0 * h1);
    [[-d00, -d01], [-d01, -d11]]
}

pub fn a_matrix(obj: &AffinityObjective, theta: &Theta) -> Mat2 {
    a_matrix_with_steps(obj, theta, [fd_step(theta[0]), fd_step(theta[1])])
}

fn check_curvature(a: &Mat2) -> Result<()> {
    let e = linalg::sym_eigenvalues(a);
    if !(e[0] > 0.0) || !e[1].is_finite() {
        return Err(Error::DegenerateCurvature(e));
    }
    Ok(())
}

/// A and Σ with g = f_θ on a model grid; used for the efficiency identity.
pub fn parts_at_model(family: Family, theta: &Theta, grid: &QuadGrid) -> Result<(Mat2, Mat2)> {
    let g: Vec<f64> = grid.nodes().iter().map(|&y| family.density(theta, y)).collect();
    let obj = AffinityObjective::new(family, grid, &g)?;
    let a = a_matrix(&obj, theta);
    check_curvature(&a)?;
    Ok((a, sigma_matrix(family, theta, grid, &g)))
}

/// Design-based variance size and finite-population correction.
///
/// SRS-WOR: fpc = 1 − α applied to V/n (the variance size n/(1−α) already
/// contains the same correction, so it is not applied twice). SRS-WR: n.
/// Poisson-PPS: HT estimate of N²/Σ(1−π)/π, fpc = 1. No design: Kish.
pub fn variance_size(sample: &SurveySample) -> Result<(f64, f64)> {
    match sample.design {
        Some(d) if d.kind == DesignKind::SrsWor => {
            let n = sample.len() as f64;
            Ok((n, 1.0 - n / d.population_size as f64))
        }
        Some(d) if d.kind == DesignKind::SrsWr => Ok((sample.len() as f64, 1.0)),
        Some(_) if sample.pi.is_some() => Ok((effective_sizes_from_sample(sample)?.n_v_eff, 1.0)),
        _ => Ok((kish_neff(&sample.weight), 1.0)),
    }
}

/// Sandwich parts at θ̂ for a converged fit.
pub fn sandwich(fit: &MhdeFit, sample: &SurveySample, plug_in: PlugIn) -> Result<SandwichParts> {
    if !fit.converged {
        return Err(Error::Convergence {
            iterations: fit.iterations,
            last: fit.theta_hat.values(),
        });
    }
    let (n_v_eff, fpc) = variance_size(sample)?;
    let (a, sigma) = match plug_in {
        PlugIn::Kde => {
            let g = fit.kde.evaluate_many(fit.grid.nodes());
            let obj = AffinityObjective::new(fit.family, &fit.grid, &g)?;
            let a = a_matrix(&obj, &fit.theta_hat);
            (a, sigma_matrix(fit.family, &fit.theta_hat, &fit.grid, &g))
        }
        PlugIn::Model => {
            let grid = fit.family.model_grid(&fit.theta_hat, 400);
            parts_at_model(fit.family, &fit.theta_hat, &grid)?
        }
    };
    check_curvature(&a)?;
    Ok(SandwichParts { a, sigma, n_v_eff, fpc })
}

/// Model-based covariance of the weighted MLE, fpc · I(θ̂)⁻¹ / n_V-eff.
pub fn mle_covariance(family: Family, theta: &Theta, sample: &SurveySample) -> Result<Mat2> {
    let (n_v_eff, fpc) = variance_size(sample)?;
    let info = family.fisher_information(theta, &family.model_grid(theta, 400));
    let inv = linalg::inverse(&info).ok_or(Error::DegenerateCurvature(linalg::sym_eigenvalues(&info)))?;
    Ok(if n_v_eff.is_infinite() {
        [[0.0; 2]; 2]
    } else {
        linalg::scale(&inv, fpc / n_v_eff)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfInterval {
    pub level: f64,
    pub estimate: [f64; 2],
    pub se: [f64; 2],
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    /// (upper − lower)/θ̂.
    pub relative_width: [f64; 2],
}

impl ConfInterval {
    pub fn contains(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

/// Wald interval θ̂ⱼ ± z · √Covⱼⱼ for a covariance of θ̂.
pub fn wald_interval(theta: &Theta, covariance: &Mat2, level: f64) -> Result<ConfInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    let z = norm_quantile(0.5 * (1.0 + level));
    let est = theta.values();
    let se = [covariance[0][0].max(0.0).sqrt(), covariance[1][1].max(0.0).sqrt()];
    let lower = [est[0] - z * se[0], est[1] - z * se[1]];
    let upper = [est[0] + z * se[0], est[1] + z * se[1]];
    Ok(ConfInterval {
        level,
        estimate: est,
        se,
        lower,
        upper,
        relative_width: [
            (upper[0] - lower[0]) / est[0].abs(),
            (upper[1] - lower[1]) / est[1].abs(),
        ],
    })
}

/// θ̂ⱼ ± z_{(1+level)/2} √(fpc [A⁻¹ΣA⁻ᵀ]ⱼⱼ / n_V-eff).
pub fn confint(fit: &MhdeFit, parts: &SandwichParts, level: f64) -> Result<ConfInterval> {
    wald_interval(&fit.theta_hat, &parts.covariance()?, level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub mean: StatInterval,
    pub median: StatInterval,
    pub draws: usize,
    pub rejected: usize,
}

/// Linear-interpolation quantile of sorted data.
fn sorted_quantile(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mean and median of f_θ̂ with percentile intervals over `draws` parameter
/// draws from N(θ̂, covariance); draws outside the parameter space are redrawn.
pub fn population_stats<R: Rng + ?Sized>(
    family: Family,
    theta: &Theta,
    covariance: &Mat2,
    draws: usize,
    level: f64,
    rng: &mut R,
) -> Result<PopulationStats> {
    if draws < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 draws, got {draws}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    let l = linalg::cholesky(covariance)
        .ok_or_else(|| Error::InvalidInput("covariance is not positive semi-definite".into()))?;
    let t = theta.values();
    let mut means = Vec::with_capacity(draws);
    let mut medians = Vec::with_capacity(draws);
    let mut rejected = 0usize;
    while means.len() < draws {
        let z: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let d = linalg::mul_vec(&l, &z);
        let cand = [t[0] + d[0], t[1] + d[1]];
        if family.check(cand).is_err() {
            rejected += 1;
            if rejected > draws {
                return Err(Error::Unstable {
                    rejected,
                    total: rejected + means.len(),
                });
            }
            continue;
        }
        let th = Theta::from_raw(cand);
        means.push(family.mean(&th));
        medians.push(family.median(&th));
    }
    means.sort_by(f64::total_cmp);
    medians.sort_by(f64::total_cmp);
    let lo = 0.5 * (1.0 - level);
    let hi = 1.0 - lo;
    Ok(PopulationStats {
        mean: StatInterval {
            estimate: family.mean(theta),
            lower: sorted_quantile(&means, lo),
            upper: sorted_quantile(&means, hi),
        },
        median: StatInterval {
            estimate: family.median(theta),
            lower: sorted_quantile(&medians, lo),
            upper: sorted_quantile(&medians, hi),
        },
        draws,
        rejected,
    })
}
