//! The Hellinger affinity objective and its Nelder–Mead maximization.

use serde::{Deserialize, Serialize};

use crate::designs::{DesignKind, SurveySample};
use crate::error::{Error, Result};
use crate::families::{Family, Theta};
use crate::kde::{BandwidthRule, HtKde, Kernel};
use crate::linalg::{self, Mat2};
use crate::quadrature::QuadGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Moments,
    WeightedMle,
    Explicit([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhdeOptions {
    pub grid_subdivisions: usize,
    pub nm_tol: f64,
    pub nm_max_iter: usize,
    pub restarts: usize,
    pub init: InitStrategy,
    pub kernel: Kernel,
    pub bandwidth: BandwidthRule,
    /// Bound on |log θⱼ| for positive parameters (and |μ| for the lognormal
    /// location); touching it counts as non-convergence.
    pub log_box: f64,
    /// Newton refinement of the simplex optimum on the stationarity equation.
    pub polish: bool,
}

impl Default for MhdeOptions {
    fn default() -> Self {
        MhdeOptions {
            grid_subdivisions: 200,
            nm_tol: 1e-8,
            nm_max_iter: 2000,
            restarts: 2,
            init: InitStrategy::Moments,
            kernel: Kernel::gaussian(),
            bandwidth: BandwidthRule::default(),
            log_box: 30.0,
            polish: true,
        }
    }
}

impl MhdeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.nm_tol > 0.0) {
            return Err(Error::Config {
                key: "mhde.nm_tol".into(),
                message: "must be positive".into(),
            });
        }
        if self.nm_max_iter == 0 {
            return Err(Error::Config {
                key: "mhde.nm_max_iter".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.grid_subdivisions == 0 {
            return Err(Error::Config {
                key: "quad.subdivisions".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Γ_g(θ) = ∫ √(g f_θ) for a density g known at the nodes of a fixed grid.
/// √g is computed once; each evaluation costs one log-density per node.
#[derive(Debug, Clone)]
pub struct AffinityObjective {
    family: Family,
    nodes: Vec<f64>,
    ln_nodes: Vec<f64>,
    /// Quadrature weight × √g at each retained node.
    coef: Vec<f64>,
}

impl AffinityObjective {
    /// `g` holds density values at `grid.nodes()`; nodes where g = 0 or that
    /// fall outside the positive half-line are dropped.
    pub fn new(family: Family, grid: &QuadGrid, g: &[f64]) -> Result<Self> {
        if g.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: g.len(),
            });
        }
        let mut nodes = Vec::with_capacity(g.len());
        let mut coef = Vec::with_capacity(g.len());
        for ((&y, &w), &gv) in grid.nodes().iter().zip(grid.kronrod_weights()).zip(g) {
            if y > 0.0 && gv > 0.0 {
                nodes.push(y);
                coef.push(w * gv.sqrt());
            }
        }
        let ln_nodes = nodes.iter().map(|y| y.ln()).collect();
        Ok(AffinityObjective {
            family,
            nodes,
            ln_nodes,
            coef,
        })
    }

    pub fn from_kde(family: Family, kde: &HtKde, grid: &QuadGrid) -> Result<Self> {
        Self::new(family, grid, &kde.evaluate_many(grid.nodes()))
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Unclamped quadrature value (may exceed 1 by rounding).
    pub fn raw(&self, theta: &Theta) -> f64 {
        let p = self.family.prepare(theta);
        self.nodes
            .iter()
            .zip(&self.ln_nodes)
            .zip(&self.coef)
            .map(|((&y, &ly), &c)| c * (0.5 * p.eval(y, ly)).exp())
            .sum()
    }

    /// Γ(θ) clamped to [0, 1].
    pub fn value(&self, theta: &Theta) -> f64 {
        self.raw(theta).clamp(0.0, 1.0)
    }

    /// Analytic gradient ½∫u√(g f_θ) and Hessian ½∫(∇u + ½uuᵀ)√(g f_θ).
    pub fn derivatives(&self, theta: &Theta) -> ([f64; 2], Mat2) {
        let p = self.family.prepare(theta);
        let mut grad = [0.0; 2];
        let mut hess = [[0.0; 2]; 2];
        for ((&y, &ly), &c) in self.nodes.iter().zip(&self.ln_nodes).zip(&self.coef) {
            let k = 0.5 * c * (0.5 * p.eval(y, ly)).exp();
            if k == 0.0 {
                continue;
            }
            let u = self.family.score(theta, y).expect("positive node");
            let j = self.family.score_jacobian(theta, y).expect("positive node");
            grad[0] += k * u[0];
            grad[1] += k * u[1];
            for a in 0..2 {
                for b in 0..2 {
                    hess[a][b] += k * (j[a][b] + 0.5 * u[a] * u[b]);
                }
            }
        }
        (grad, linalg::symmetrize(&hess))
    }
}

/// Γ_γ(θ) for a fitted KDE on `grid`.
pub fn affinity(theta: &Theta, kde: &HtKde, family: Family, grid: &QuadGrid) -> f64 {
    AffinityObjective::from_kde(family, kde, grid)
        .map(|o| o.value(theta))
        .unwrap_or(0.0)
}

/// H²(f, g) = 1 − ∫√(fg), clamped to [0, 1].
pub fn hellinger_sq(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, grid: &QuadGrid) -> f64 {
    let aff = grid.integrate_fn(|y| (f(y).max(0.0) * g(y).max(0.0)).sqrt()).kronrod;
    (1.0 - aff).clamp(0.0, 1.0)
}

/// Unconstrained coordinates: log for positive parameters.
fn to_free(family: Family, theta: [f64; 2]) -> [f64; 2] {
    let pos = family.positive_params();
    [0, 1].map(|j| if pos[j] { theta[j].ln() } else { theta[j] })
}

fn from_free(family: Family, t: [f64; 2]) -> [f64; 2] {
    let pos = family.positive_params();
    [0, 1].map(|j| if pos[j] { t[j].exp() } else { t[j] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub theta: Theta,
    pub affinity: f64,
    pub converged: bool,
    pub iterations: usize,
    pub hit_box: bool,
}

struct NmOutcome {
    x: [f64; 2],
    f: f64,
    converged: bool,
    iterations: usize,
}

/// Nelder–Mead minimization in two dimensions with the standard
/// coefficients (1, 2, ½, ½). Stops when both the simplex diameter (max-norm)
/// and the spread of objective values fall below `tol`; the diameter test is
/// applied to √tol since the objective is quadratic at its optimum.
fn nelder_mead(f: &dyn Fn([f64; 2]) -> f64, simplex: [[f64; 2]; 3], tol: f64, max_iter: usize) -> NmOutcome {
    let mut pts = simplex;
    let mut vals = pts.map(f);
    let x_tol = tol.sqrt();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // Stable sort keeps earlier vertices first on ties.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.map(|i| pts[i]);
        vals = order.map(|i| vals[i]);
        let spread = vals[2] - vals[0];
        let diameter = (1..3)
            .map(|i| (pts[i][0] - pts[0][0]).abs().max((pts[i][1] - pts[0][1]).abs()))
            .fold(0.0, f64::max);
        if spread.abs() <= tol && diameter <= x_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let c = [0.5 * (pts[0][0] + pts[1][0]), 0.5 * (pts[0][1] + pts[1][1])];
        let at = |s: f64| [c[0] + s * (pts[2][0] - c[0]), c[1] + s * (pts[2][1] - c[1])];
        let xr = at(-1.0);
        let fr = f(xr);
        if fr < vals[0] {
            let xe = at(-2.0);
            let fe = f(xe);
            if fe < fr {
                pts[2] = xe;
                vals[2] = fe;
            } else {
                pts[2] = xr;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            pts[2] = xr;
            vals[2] = fr;
        } else {
            let (xc, fc) = if fr < vals[2] {
                let x = at(-0.5);
                (x, f(x))
            } else {
                let x = at(0.5);
                (x, f(x))
            };
            if fc < fr.min(vals[2]) {
                pts[2] = xc;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    pts[i] = [0.5 * (pts[0][0] + pts[i][0]), 0.5 * (pts[0][1] + pts[i][1])];
                    vals[i] = f(pts[i]);
                }
            }
        }
    }
    let best = (0..3)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("three vertices");
    NmOutcome {
        x: pts[best],
        f: vals[best],
        converged,
        iterations,
    }
}

fn initial_simplex(family: Family, theta: [f64; 2]) -> [[f64; 2]; 3] {
    let t = to_free(family, theta);
    let pos = family.positive_params();
    let step = [0, 1].map(|j| if pos[j] { 0.05 } else { 0.05 * t[j].abs().max(1.0) });
    [t, [t[0] + step[0], t[1]], [t[0], t[1] + step[1]]]
}

fn in_box(family: Family, t: [f64; 2], bound: f64) -> bool {
    let pos = family.positive_params();
    (0..2).all(|j| {
        let lim = if pos[j] { bound } else { bound.exp().min(1e300) };
        t[j].is_finite() && t[j].abs() < lim
    }) && family.check(from_free(family, t)).is_ok()
}

/// Newton iterations on ∇Γ = 0 in free coordinates. Large steps must not
/// decrease the objective; below 1e-6 the objective can no longer resolve the
/// change and the gradient alone decides.
fn polish(obj: &AffinityObjective, mut theta: Theta, mut value: f64, bound: f64) -> (Theta, f64) {
    let family = obj.family();
    let pos = family.positive_params();
    for _ in 0..30 {
        let (g, h) = obj.derivatives(&theta);
        let th = theta.values();
        // Chain rule to log coordinates.
        let d = [0, 1].map(|j| if pos[j] { th[j] } else { 1.0 });
        let gt = [g[0] * d[0], g[1] * d[1]];
        let mut ht = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                ht[a][b] = h[a][b] * d[a] * d[b];
            }
            if pos[a] {
                ht[a][a] += gt[a];
            }
        }
        if linalg::sym_eigenvalues(&ht)[1] >= 0.0 {
            break;
        }
        let Some(inv) = linalg::inverse(&ht) else { break };
        let step = linalg::mul_vec(&inv, &gt);
        if !(step[0].abs().max(step[1].abs()) < 0.1) {
            break;
        }
        let t = to_free(family, th);
        let nt = [t[0] - step[0], t[1] - step[1]];
        if !in_box(family, nt, bound) {
            break;
        }
        let cand = Theta::from_raw(from_free(family, nt));
        let v = obj.raw(&cand);
        let size = step[0].abs().max(step[1].abs());
        if size > 1e-6 && v < value - 4.0 * f64::EPSILON * value.abs().max(1.0) {
            break;
        }
        theta = cand;
        value = v;
        if size < 1e-15 {
            break;
        }
    }
    (theta, value)
}

/// Maximize Γ_g by Nelder–Mead from `init`, with `opts.restarts` restarts from
/// the incumbent jittered by ×1.05/×0.95 per coordinate.
pub fn maximize(obj: &AffinityObjective, init: &Theta, opts: &MhdeOptions) -> Result<Optimum> {
    opts.validate()?;
    let family = obj.family();
    let bound = opts.log_box;
    let neg = |t: [f64; 2]| -> f64 {
        if !in_box(family, t, bound) {
            return f64::INFINITY;
        }
        -obj.raw(&Theta::from_raw(from_free(family, t)))
    };
    let mut best: Option<NmOutcome> = None;
    let mut any_converged = false;
    let mut iterations = 0;
    let mut start = init.values();
    for r in 0..=opts.restarts {
        if r > 0 {
            let (a, b) = if r % 2 == 1 { (1.05, 0.95) } else { (0.95, 1.05) };
            start = [start[0] * a, start[1] * b];
            if family.check(start).is_err() {
                start = best.as_ref().map(|o| from_free(family, o.x)).unwrap_or(init.values());
            }
        }
        let out = nelder_mead(&neg, initial_simplex(family, start), opts.nm_tol, opts.nm_max_iter);
        iterations += out.iterations;
        any_converged |= out.converged;
        if best.as_ref().is_none_or(|b| out.f < b.f) {
            best = Some(out);
        }
        start = from_free(family, best.as_ref().expect("set above").x);
    }
    let best = best.expect("at least one run");
    let hit_box = !best.f.is_finite() || {
        let t = best.x;
        let pos = family.positive_params();
        (0..2).any(|j| pos[j] && t[j].abs() > bound - 1e-6)
    };
    if !best.f.is_finite() {
        return Err(Error::Convergence {
            iterations,
            last: from_free(family, best.x),
        });
    }
    let mut theta = Theta::from_raw(from_free(family, best.x));
    let mut value = -best.f;
    if opts.polish && !hit_box {
        (theta, value) = polish(obj, theta, value, bound);
    }
    Ok(Optimum {
        theta,
        affinity: value.clamp(0.0, 1.0),
        converged: any_converged && !hit_box,
        iterations,
        hit_box,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MhdeFit {
    pub family: Family,
    pub theta_hat: Theta,
    pub affinity: f64,
    pub hellinger_sq: f64,
    pub converged: bool,
    pub iterations: usize,
    pub kde: HtKde,
    #[serde(skip)]
    pub grid: QuadGrid,
    pub covariance: Option<Mat2>,
    pub n_v_eff_used: Option<f64>,
    pub design_kind: Option<DesignKind>,
}

impl MhdeFit {
    pub fn objective(&self) -> Result<AffinityObjective> {
        AffinityObjective::from_kde(self.family, &self.kde, &self.grid)
    }
}

/// Starting point per `opts.init`.
pub fn initial_theta(sample: &SurveySample, family: Family, init: InitStrategy) -> Result<Theta> {
    match init {
        InitStrategy::Moments => sample.moment_init(family),
        InitStrategy::WeightedMle => sample.weighted_mle(family),
        InitStrategy::Explicit(v) => Theta::new(family, v),
    }
}

/// Minimum Hellinger distance fit of `family` to the HT-weighted KDE of `sample`.
pub fn fit(sample: &SurveySample, family: Family, opts: &MhdeOptions) -> Result<MhdeFit> {
    sample.validate()?;
    opts.validate()?;
    if let Some(bad) = sample.y.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::OutsideSupport(*bad));
    }
    let kde = HtKde::from_sample(sample, opts.kernel, opts.bandwidth)?;
    let grid = kde.grid(opts.grid_subdivisions, true)?;
    let obj = AffinityObjective::from_kde(family, &kde, &grid)?;
    let init = initial_theta(sample, family, opts.init)?;
    let opt = maximize(&obj, &init, opts)?;
    if !opt.converged {
        return Err(Error::Convergence {
            iterations: opt.iterations,
            last: opt.theta.values(),
        });
    }
    Ok(MhdeFit {
        family,
        theta_hat: opt.theta,
        affinity: opt.affinity,
        hellinger_sq: 1.0 - opt.affinity,
        converged: true,
        iterations: opt.iterations,
        kde,
        grid,
        covariance: None,
        n_v_eff_used: None,
        design_kind: sample.design.map(|d| d.kind),
    })
}

/// sup over `thetas` of |Γ_γ(θ) − Γ_g(θ)|, both on `grid`.
pub fn uniform_affinity_gap(
    kde: &HtKde,
    family: Family,
    thetas: &[Theta],
    g: impl Fn(f64) -> f64,
    grid: &QuadGrid,
) -> Result<f64> {
    let ok = AffinityObjective::from_kde(family, kde, grid)?;
    let gv: Vec<f64> = grid.nodes().iter().map(|&y| g(y)).collect();
    let og = AffinityObjective::new(family, grid, &gv)?;
    Ok(thetas
        .iter()
        .map(|t| (ok.value(t) - og.value(t)).abs())
        .fold(0.0, f64::max))
}

/// ‖√f̂ − √g‖₂ on `grid`.
pub fn hellinger_norm(kde: &HtKde, g: impl Fn(f64) -> f64, grid: &QuadGrid) -> f64 {
    grid.integrate_fn(|y| (kde.evaluate(y).sqrt() - g(y).max(0.0).sqrt()).powi(2))
        .kronrod
        .max(0.0)
        .sqrt()
}

/// Regular log-spaced θ grid: `points` values per coordinate spanning
/// ±`half_width` around `center` on the free scale.
pub fn log_theta_grid(family: Family, center: &Theta, half_width: f64, points: usize) -> Vec<Theta> {
    let t = to_free(family, center.values());
    let step = 2.0 * half_width / (points - 1) as f64;
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            let v = [t[0] - half_width + step * i as f64, t[1] - half_width + step * j as f64];
            out.push(Theta::from_raw(from_free(family, v)));
        }
    }
    out
}

/// Free (log) coordinates of θ, exposed for grid-resolution checks.
pub fn free_coordinates(family: Family, theta: &Theta) -> [f64; 2] {
    to_free(family, theta.values())
}
