//! Fixed-grid Gauss–Kronrod (G7/K15) integration.
//!
//! A [`QuadGrid`] is a set of disjoint segments, each carrying the 15-point
//! Kronrod rule and its embedded 7-point Gauss rule. Integrands are evaluated
//! once per node by the caller and then reduced with [`QuadGrid::integrate`],
//! which lets the estimator reuse a single density evaluation across many
//! objective calls.

use crate::error::{Error, Result};

/// Abscissae of the 15-point Kronrod rule on [-1, 1] (non-negative half).
/// Odd indices are the 7-point Gauss abscissae.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

pub const NODES_PER_SEGMENT: usize = 15;

/// Reference rule on [-1, 1] in ascending node order: (node, kronrod, gauss).
fn reference_rule() -> [(f64, f64, f64); NODES_PER_SEGMENT] {
    let mut out = [(0.0, 0.0, 0.0); NODES_PER_SEGMENT];
    for j in 0..8 {
        let g = if j % 2 == 1 { WG[j / 2] } else { 0.0 };
        out[j] = (-XGK[j], WGK[j], g);
        out[14 - j] = (XGK[j], WGK[j], g);
    }
    out
}

/// Result of integrating node values over a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub kronrod: f64,
    pub gauss: f64,
    pub err_est: f64,
}

/// A fixed integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadGrid {
    segments: Vec<(f64, f64)>,
    nodes: Vec<f64>,
    kronrod_weights: Vec<f64>,
    gauss_weights: Vec<f64>,
}

impl QuadGrid {
    /// `subdivisions` equal-width segments over `[a, b]`.
    pub fn uniform(a: f64, b: f64, subdivisions: usize) -> Result<Self> {
        check_interval(a, b)?;
        if subdivisions == 0 {
            return Err(Error::Domain("subdivisions must be at least 1".into()));
        }
        let width = (b - a) / subdivisions as f64;
        let breaks: Vec<f64> = (0..=subdivisions)
            .map(|k| if k == subdivisions { b } else { a + width * k as f64 })
            .collect();
        Self::from_breakpoints(&breaks)
    }

    /// Segments with geometrically growing width over `[a, b]`, `a > 0`.
    pub fn geometric(a: f64, b: f64, subdivisions: usize) -> Result<Self> {
        check_interval(a, b)?;
        if a <= 0.0 {
            return Err(Error::Domain(format!("geometric grid needs a > 0, got {a}")));
        }
        if subdivisions == 0 {
            return Err(Error::Domain("subdivisions must be at least 1".into()));
        }
        let (la, lb) = (a.ln(), b.ln());
        let step = (lb - la) / subdivisions as f64;
        let breaks: Vec<f64> = (0..=subdivisions)
            .map(|k| match k {
                0 => a,
                k if k == subdivisions => b,
                k => (la + step * k as f64).exp(),
            })
            .collect();
        Self::from_breakpoints(&breaks)
    }

    /// Contiguous segments between consecutive (strictly increasing) breakpoints.
    pub fn from_breakpoints(breaks: &[f64]) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(Error::Domain("need at least two breakpoints".into()));
        }
        let segments = breaks.windows(2).map(|w| (w[0], w[1])).collect();
        Self::from_segments(segments)
    }

    /// Disjoint, ascending segments; gaps between them are treated as zero.
    pub fn from_segments(segments: Vec<(f64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Domain("grid has no segments".into()));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for &(a, b) in &segments {
            check_interval(a, b)?;
            if a < prev_end {
                return Err(Error::Domain("segments overlap or are unsorted".into()));
            }
            prev_end = b;
        }
        let rule = reference_rule();
        let m = segments.len() * NODES_PER_SEGMENT;
        let mut nodes = Vec::with_capacity(m);
        let mut kronrod_weights = Vec::with_capacity(m);
        let mut gauss_weights = Vec::with_capacity(m);
        for &(a, b) in &segments {
            let c = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for &(x, wk, wg) in &rule {
                nodes.push(c + half * x);
                kronrod_weights.push(half * wk);
                gauss_weights.push(half * wg);
            }
        }
        Ok(Self {
            segments,
            nodes,
            kronrod_weights,
            gauss_weights,
        })
    }

    /// Grid covering the union of both coverages, cut at every breakpoint of
    /// either grid.
    pub fn union(&self, other: &QuadGrid) -> Result<Self> {
        let mut cover: Vec<(f64, f64)> = self.segments.iter().chain(other.segments.iter()).copied().collect();
        cover.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (a, b) in cover {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        let mut cuts: Vec<f64> = self
            .segments
            .iter()
            .chain(other.segments.iter())
            .flat_map(|&(a, b)| [a, b])
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut segments = Vec::new();
        let mut ci = 0;
        for (a, b) in merged {
            while ci < cuts.len() && cuts[ci] <= a {
                ci += 1;
            }
            let mut lo = a;
            while ci < cuts.len() && cuts[ci] < b {
                segments.push((lo, cuts[ci]));
                lo = cuts[ci];
                ci += 1;
            }
            segments.push((lo, b));
        }
        Self::from_segments(segments)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn kronrod_weights(&self) -> &[f64] {
        &self.kronrod_weights
    }

    pub fn gauss_weights(&self) -> &[f64] {
        &self.gauss_weights
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest interval containing every segment.
    pub fn interval(&self) -> (f64, f64) {
        (self.segments[0].0, self.segments[self.segments.len() - 1].1)
    }

    /// Total covered length (sum of segment widths).
    pub fn covered_length(&self) -> f64 {
        self.segments.iter().map(|(a, b)| b - a).sum()
    }

    /// Reduce integrand values at the nodes.
    pub fn integrate(&self, values: &[f64]) -> Result<Integral> {
        if values.len() != self.nodes.len() {
            return Err(Error::Shape {
                expected: self.nodes.len(),
                got: values.len(),
            });
        }
        let mut kronrod = 0.0;
        let mut gauss = 0.0;
        for ((v, wk), wg) in values.iter().zip(&self.kronrod_weights).zip(&self.gauss_weights) {
            kronrod += wk * v;
            gauss += wg * v;
        }
        Ok(Integral {
            kronrod,
            gauss,
            err_est: (kronrod - gauss).abs(),
        })
    }

    /// Evaluate `f` at every node and integrate.
    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> Integral {
        let values: Vec<f64> = self.nodes.iter().map(|&x| f(x)).collect();
        self.integrate(&values).expect("node count matches by construction")
    }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(Error::Domain(format!("invalid interval [{a}, {b}]")));
    }
    Ok(())
}
