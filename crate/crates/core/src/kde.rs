//! Horvitz–Thompson weighted, self-normalized kernel density estimate.

use serde::{Deserialize, Serialize};

use crate::designs::{kish_neff, SurveySample};
use crate::error::{Error, Result};
use crate::quadrature::QuadGrid;
use crate::special::LN_SQRT_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelKind::Gaussian),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            other => Err(Error::InvalidInput(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A symmetric kernel with an effective radius in bandwidth units: 8 for the
/// (truncated) Gaussian, whose tail mass beyond it is below 1e-15; 1 for the
/// Epanechnikov.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub effective_radius: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::gaussian()
    }
}

impl Kernel {
    pub fn gaussian() -> Self {
        Kernel {
            kind: KernelKind::Gaussian,
            effective_radius: 8.0,
        }
    }

    pub fn epanechnikov() -> Self {
        Kernel {
            kind: KernelKind::Epanechnikov,
            effective_radius: 1.0,
        }
    }

    pub fn of(kind: KernelKind) -> Self {
        match kind {
            KernelKind::Gaussian => Self::gaussian(),
            KernelKind::Epanechnikov => Self::epanechnikov(),
        }
    }

    /// Standardized kernel K(u); zero beyond the effective radius.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > self.effective_radius {
            return 0.0;
        }
        match self.kind {
            KernelKind::Gaussian => (-0.5 * u * u - LN_SQRT_2PI).exp(),
            KernelKind::Epanechnikov => 0.75 * (1.0 - u * u),
        }
    }
}

/// How the bandwidth is chosen when none is given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// 0.9 · min(ŝ, IQR/1.349) · m^(−1/5), m the Kish effective size.
    Silverman,
    /// Same scale factor with rate m^(−1/4). At the Silverman rate the
    /// smoothing inflates the fitted scale; much smaller bandwidths make √f̂
    /// spiky and bias it the other way. The quarter rate balances the two.
    #[default]
    Undersmoothed,
    Fixed(f64),
}

impl BandwidthRule {
    pub fn bandwidth(&self, sample: &SurveySample) -> Result<f64> {
        match *self {
            BandwidthRule::Silverman => bandwidth_with_rate(sample, 0.2),
            BandwidthRule::Undersmoothed => bandwidth_with_rate(sample, 0.25),
            BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            BandwidthRule::Fixed(h) => Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}"))),
        }
    }
}

/// Weighted quantile: the smallest y whose cumulative normalized weight
/// reaches `p`, interpolating linearly between neighbours.
pub fn weighted_quantile(y: &[f64], w: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_unstable_by(|&a, &b| y[a].total_cmp(&y[b]));
    let total: f64 = w.iter().sum();
    // Midpoint plotting positions make equal weights match the usual
    // interpolated quantile.
    let mut cum = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &i in &idx {
        let pos = (cum + 0.5 * w[i]) / total;
        cum += w[i];
        if pos >= p {
            return match prev {
                None => y[i],
                Some((pp, py)) => py + (y[i] - py) * (p - pp) / (pos - pp),
            };
        }
        prev = Some((pos, y[i]));
    }
    y[*idx.last().expect("non-empty")]
}

fn bandwidth_with_rate(sample: &SurveySample, rate: f64) -> Result<f64> {
    sample.validate()?;
    let (y, w) = (&sample.y, &sample.weight);
    let (_, var) = crate::families::weighted_mean_var(y.iter().copied(), w);
    let s = var.sqrt();
    if !(s > 0.0) {
        return Err(Error::DegenerateSample("weighted standard deviation is zero".into()));
    }
    let iqr = weighted_quantile(y, w, 0.75) - weighted_quantile(y, w, 0.25);
    let spread = if iqr > 0.0 { s.min(iqr / 1.349) } else { s };
    Ok(0.9 * spread * kish_neff(w).powf(-rate))
}

/// Silverman's rule with the Kish effective size in place of n.
pub fn bandwidth_default(sample: &SurveySample) -> Result<f64> {
    bandwidth_with_rate(sample, 0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtKde {
    /// Sorted sample points.
    points: Vec<f64>,
    /// ωᵢ/Σω aligned with `points`.
    norm_weights: Vec<f64>,
    bandwidth: f64,
    kernel: Kernel,
}

/// Fit with an explicit bandwidth, or [`bandwidth_default`] when `h` is None.
pub fn fit_kde(sample: &SurveySample, kernel: Kernel, h: Option<f64>) -> Result<HtKde> {
    let h = match h {
        Some(h) => BandwidthRule::Fixed(h).bandwidth(sample)?,
        None => bandwidth_default(sample)?,
    };
    HtKde::new(&sample.y, &sample.weight, h, kernel)
}

impl HtKde {
    pub fn new(y: &[f64], w: &[f64], bandwidth: f64, kernel: Kernel) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptySample);
        }
        if y.len() != w.len() {
            return Err(Error::Shape {
                expected: y.len(),
                got: w.len(),
            });
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if let Some(bad) = w.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("weights must be positive, found {bad}")));
        }
        let total: f64 = w.iter().sum();
        let mut idx: Vec<usize> = (0..y.len()).collect();
        idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        Ok(HtKde {
            points: idx.iter().map(|&i| y[i]).collect(),
            norm_weights: idx.iter().map(|&i| w[i] / total).collect(),
            bandwidth,
            kernel,
        })
    }

    pub fn from_sample(sample: &SurveySample, kernel: Kernel, rule: BandwidthRule) -> Result<Self> {
        let h = rule.bandwidth(sample)?;
        Self::new(&sample.y, &sample.weight, h, kernel)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn norm_weights(&self) -> &[f64] {
        &self.norm_weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    fn reach(&self) -> f64 {
        self.kernel.effective_radius * self.bandwidth
    }

    /// f̂(y) = Σ ω̃ᵢ K_h(y − yᵢ), summing only points within the kernel reach.
    pub fn evaluate(&self, y: f64) -> f64 {
        let r = self.reach();
        let start = self.points.partition_point(|&p| p < y - r);
        let inv_h = 1.0 / self.bandwidth;
        let mut acc = 0.0;
        for (&p, &w) in self.points[start..].iter().zip(&self.norm_weights[start..]) {
            if p > y + r {
                break;
            }
            acc += w * self.kernel.eval((y - p) * inv_h);
        }
        acc * inv_h
    }

    pub fn evaluate_many(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.evaluate(y)).collect()
    }

    /// [min − reach, max + reach], clipped at 0 when `positive_support`.
    pub fn support_interval(&self, positive_support: bool) -> (f64, f64) {
        let r = self.reach();
        let a = self.points[0] - r;
        let b = self.points[self.points.len() - 1] + r;
        if positive_support {
            (a.max(0.0), b)
        } else {
            (a, b)
        }
    }

    /// Disjoint pieces where f̂ can be positive: merged kernel windows.
    pub fn support_pieces(&self, positive_support: bool) -> Vec<(f64, f64)> {
        let r = self.reach();
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &p in &self.points {
            let (a, b) = (p - r, p + r);
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = b,
                _ => out.push((a, b)),
            }
        }
        if positive_support {
            out.retain(|&(_, b)| b > 0.0);
            for seg in out.iter_mut() {
                seg.0 = seg.0.max(0.0);
            }
        }
        out
    }

    /// Quadrature grid over the support pieces with at least `subdivisions`
    /// segments in total and no segment wider than one bandwidth. Epanechnikov
    /// kinks at yᵢ ± h become breakpoints.
    pub fn grid(&self, subdivisions: usize, positive_support: bool) -> Result<QuadGrid> {
        let pieces = self.support_pieces(positive_support);
        let total: f64 = pieces.iter().map(|(a, b)| b - a).sum();
        let width = (total / subdivisions.max(1) as f64).min(self.bandwidth);
        let kinks: Vec<f64> = if self.kernel.kind == KernelKind::Epanechnikov {
            let mut k: Vec<f64> = self
                .points
                .iter()
                .flat_map(|&p| [p - self.bandwidth, p + self.bandwidth])
                .collect();
            k.sort_by(f64::total_cmp);
            k.dedup();
            k
        } else {
            Vec::new()
        };
        let mut segments = Vec::new();
        let mut ki = 0;
        for (a, b) in pieces {
            let count = ((b - a) / width).ceil().max(1.0) as usize;
            let step = (b - a) / count as f64;
            let mut cuts: Vec<f64> = (1..count).map(|j| a + step * j as f64).collect();
            while ki < kinks.len() && kinks[ki] <= a {
                ki += 1;
            }
            while ki < kinks.len() && kinks[ki] < b {
                cuts.push(kinks[ki]);
                ki += 1;
            }
            cuts.sort_by(f64::total_cmp);
            let mut lo = a;
            for c in cuts {
                // Skip cuts that would leave slivers too thin to resolve.
                if c - lo > 1e-9 * step && b - c > 1e-9 * step {
                    segments.push((lo, c));
                    lo = c;
                }
            }
            segments.push((lo, b));
        }
        QuadGrid::from_segments(segments)
    }
}

/// ∫|f̂ − g| on `grid`, clamped to [0, 2].
pub fn l1_distance(kde: &HtKde, g: impl Fn(f64) -> f64, grid: &QuadGrid) -> f64 {
    let v = grid.integrate_fn(|y| (kde.evaluate(y) - g(y)).abs()).kronrod;
    v.clamp(0.0, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::Family;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(y: Vec<f64>, w: Vec<f64>) -> SurveySample {
        SurveySample::new(y, w).unwrap()
    }

    #[test]
    fn single_atom_is_the_kernel() {
        let k = HtKde::new(&[5.0], &[2.0], 1.0, Kernel::gaussian()).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((k.evaluate(5.0) - peak).abs() < 1e-15);
        let grid = k.grid(200, false).unwrap();
        assert!((grid.integrate_fn(|y| k.evaluate(y)).kronrod - 1.0).abs() < 1e-12);
        assert_eq!(k.evaluate(13.0 + 1e-9), 0.0);
    }

    #[test]
    fn mixture_weights_normalize() {
        let k = HtKde::new(&[0.0, 3.0], &[1.0, 3.0], 0.5, Kernel::gaussian()).unwrap();
        let k2 = HtKde::new(&[0.0, 3.0], &[2.0, 6.0], 0.5, Kernel::gaussian()).unwrap();
        let ker = Kernel::gaussian();
        for y in [-1.0, 0.0, 0.7, 2.5, 3.3] {
            let expect = (0.25 * ker.eval(y / 0.5) + 0.75 * ker.eval((y - 3.0) / 0.5)) / 0.5;
            assert!((k.evaluate(y) - expect).abs() < 1e-15);
            assert_eq!(k.evaluate(y), k2.evaluate(y));
        }
    }

    #[test]
    fn support_interval_examples() {
        let g = HtKde::new(&[10.0], &[1.0], 1.0, Kernel::gaussian()).unwrap();
        assert_eq!(g.support_interval(false), (2.0, 18.0));
        let e = HtKde::new(&[0.0, 5.0], &[1.0, 1.0], 1.0, Kernel::epanechnikov()).unwrap();
        assert_eq!(e.support_interval(false), (-1.0, 6.0));
        assert_eq!(e.support_interval(true), (0.0, 6.0));
        let e3 = HtKde::new(&[0.0, 2.0, 5.0], &[1.0; 3], 1.0, Kernel::epanechnikov()).unwrap();
        assert_eq!(e3.support_interval(false), (-1.0, 6.0));
        assert_eq!(e.evaluate(6.5), 0.0);
    }

    #[test]
    fn batch_matches_pointwise_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..100.0)).collect();
        let w: Vec<f64> = (0..300).map(|_| rng.gen_range(0.5..5.0)).collect();
        let k = HtKde::new(&y, &w, 2.5, Kernel::gaussian()).unwrap();
        let total: f64 = w.iter().sum();
        let xs: Vec<f64> = (0..50).map(|i| -30.0 + 3.0 * i as f64).collect();
        let batch = k.evaluate_many(&xs);
        for (x, b) in xs.iter().zip(&batch) {
            let brute: f64 = y
                .iter()
                .zip(&w)
                .map(|(yi, wi)| wi / total * Kernel::gaussian().eval((x - yi) / 2.5) / 2.5)
                .sum();
            assert_eq!(*b, k.evaluate(*x));
            assert!((b - brute).abs() <= 1e-14 * brute.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn silverman_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = Family::Gamma.theta(2.0, 35000.0).unwrap();
        let y = Family::Gamma.sample(&th, 1000, &mut rng);
        let s = SurveySample::equal_weights(y.clone()).unwrap();
        let h = bandwidth_default(&s).unwrap();
        let (_, var) = crate::families::weighted_mean_var(y.iter().copied(), &s.weight);
        let sd = var.sqrt();
        let iqr = weighted_quantile(&y, &s.weight, 0.75) - weighted_quantile(&y, &s.weight, 0.25);
        let classic = 0.9 * sd.min(iqr / 1.349) * 1000f64.powf(-0.2);
        assert!((h - classic).abs() < 1e-9 * classic);
        if sd < iqr / 1.349 {
            assert!((h / (0.9 * sd * 1000f64.powf(-0.2)) - 1.0).abs() < 0.1);
        }
        let scaled = sample(y, vec![7.5; 1000]);
        assert_eq!(bandwidth_default(&scaled).unwrap(), h);
        let flat = sample(vec![3.0; 5], vec![1.0; 5]);
        assert!(matches!(bandwidth_default(&flat), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn weighted_quantile_equal_weights() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(weighted_quantile(&y, &[1.0; 4], 0.5), 2.5);
        assert_eq!(weighted_quantile(&y, &[1.0; 4], 0.0), 1.0);
        assert_eq!(weighted_quantile(&y, &[1.0; 4], 1.0), 4.0);
    }

    #[test]
    fn l1_examples() {
        let k = HtKde::new(&[1.0, 2.0, 4.0], &[1.0, 2.0, 1.0], 0.3, Kernel::gaussian()).unwrap();
        let grid = k.grid(200, false).unwrap();
        assert!(l1_distance(&k, |y| k.evaluate(y), &grid) < 1e-10);
        let far = HtKde::new(&[100.0], &[1.0], 0.3, Kernel::gaussian()).unwrap();
        let both = grid.union(&far.grid(200, false).unwrap()).unwrap();
        assert!((l1_distance(&k, |y| far.evaluate(y), &both) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn epanechnikov_integrates_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
        let w: Vec<f64> = (0..200).map(|_| rng.gen_range(0.1..3.0)).collect();
        let k = HtKde::new(&y, &w, 0.37, Kernel::epanechnikov()).unwrap();
        let grid = k.grid(200, false).unwrap();
        assert!((grid.integrate_fn(|x| k.evaluate(x)).kronrod - 1.0).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn self_normalized(seed in 0u64..1000, n in 1usize..300, h in 0.01f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..100.0)).collect();
            let k = HtKde::new(&y, &w, h, Kernel::gaussian()).unwrap();
            let grid = k.grid(200, false).unwrap();
            let v = grid.integrate_fn(|x| k.evaluate(x)).kronrod;
            prop_assert!((v - 1.0).abs() < 1e-6, "{}", v);
            prop_assert!(k.evaluate(rng.gen_range(-60.0..60.0)) >= 0.0);
        }

        #[test]
        fn scale_invariant(seed in 0u64..1000, c in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
            let w: Vec<f64> = (0..40).map(|_| rng.gen_range(0.1..3.0)).collect();
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = HtKde::from_sample(&sample(y.clone(), w), Kernel::gaussian(), BandwidthRule::Silverman).unwrap();
            let b = HtKde::from_sample(&sample(y, wc), Kernel::gaussian(), BandwidthRule::Silverman).unwrap();
            prop_assert!((a.bandwidth() - b.bandwidth()).abs() <= 1e-12 * a.bandwidth());
            for x in [0.5, 3.0, 7.7] {
                let (fa, fb) = (a.evaluate(x), b.evaluate(x));
                prop_assert!((fa - fb).abs() <= 1e-12 * fa.max(1e-300));
            }
        }
    }
}
