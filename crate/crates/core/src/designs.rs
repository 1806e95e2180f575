//! Finite populations, sampling designs, survey weights and effective sizes.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{Family, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    PoissonPps,
    SrsWr,
    SrsWor,
}

impl DesignKind {
    pub fn id(&self) -> &'static str {
        match self {
            DesignKind::PoissonPps => "poisson_pps",
            DesignKind::SrsWr => "srs_wr",
            DesignKind::SrsWor => "srs_wor",
        }
    }

    /// Label in the style of the coverage table.
    pub fn label(&self) -> &'static str {
        match self {
            DesignKind::PoissonPps => "PPS",
            DesignKind::SrsWr => "SRS-WR",
            DesignKind::SrsWor => "SRS-WOR",
        }
    }
}

impl std::str::FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson_pps" => Ok(DesignKind::PoissonPps),
            "srs_wr" => Ok(DesignKind::SrsWr),
            "srs_wor" => Ok(DesignKind::SrsWor),
            other => Err(Error::InvalidInput(format!("unknown design `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub population_size: usize,
    pub sampling_fraction: f64,
    #[serde(default)]
    pub rho_yz: f64,
    #[serde(default)]
    pub weight_truncation_cap: Option<f64>,
}

impl DesignSpec {
    pub fn new(kind: DesignKind, population_size: usize, sampling_fraction: f64) -> Self {
        DesignSpec {
            kind,
            population_size,
            sampling_fraction,
            rho_yz: 0.0,
            weight_truncation_cap: None,
        }
    }

    /// Target sample size n = round(α N).
    pub fn sample_size(&self) -> usize {
        (self.sampling_fraction * self.population_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction < 1.0) {
            return Err(Error::Design(format!(
                "sampling fraction must lie in (0, 1), got {}",
                self.sampling_fraction
            )));
        }
        if self.sample_size() < 2 {
            return Err(Error::Design(format!(
                "target sample size {} is below 2",
                self.sample_size()
            )));
        }
        if !(0.0..1.0).contains(&self.rho_yz) {
            return Err(Error::Design(format!("rho_yz must lie in [0, 1), got {}", self.rho_yz)));
        }
        if let Some(cap) = self.weight_truncation_cap {
            if !(cap > 0.0) {
                return Err(Error::Design(format!("truncation cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// A finite population drawn from the superpopulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub y: Vec<f64>,
    /// Size variable for PPS designs; strictly positive.
    pub z: Vec<f64>,
    /// Cluster label in 1..=5, present when calibration is simulated.
    pub cluster: Option<Vec<u32>>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Attach uniformly random cluster labels in 1..=`clusters`.
    pub fn assign_clusters<R: Rng + ?Sized>(&mut self, clusters: u32, rng: &mut R) {
        self.cluster = Some((0..self.len()).map(|_| rng.gen_range(1..=clusters)).collect());
    }

    /// Known population totals of the auxiliary `z` per cluster.
    pub fn cluster_totals(&self) -> Option<BTreeMap<u32, f64>> {
        let labels = self.cluster.as_ref()?;
        let mut out = BTreeMap::new();
        for (&c, &z) in labels.iter().zip(&self.z) {
            *out.entry(c).or_insert(0.0) += z;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub kind: DesignKind,
    pub population_size: usize,
    pub sampling_fraction: f64,
}

/// Observed responses with their survey weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveySample {
    pub y: Vec<f64>,
    /// Realized first-order inclusion probabilities, when known.
    pub pi: Option<Vec<f64>>,
    /// Analysis weights ω; equal to 1/π unless adjusted.
    pub weight: Vec<f64>,
    /// Weights before calibration, retained for diagnostics.
    pub base_weight: Option<Vec<f64>>,
    pub cluster: Option<Vec<u32>>,
    /// Calibration auxiliary values for the sampled units.
    pub x: Option<Vec<f64>>,
    pub design: Option<DesignMeta>,
    /// Population indices of the sampled units (simulation only).
    pub units: Option<Vec<usize>>,
    /// Number of weights clipped by [`truncate_weights`].
    pub truncated: usize,
}

impl SurveySample {
    pub fn new(y: Vec<f64>, weight: Vec<f64>) -> Result<Self> {
        let s = SurveySample {
            y,
            weight,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_pi(y: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        if let Some(bad) = pi.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Domain(format!("inclusion probability {bad} outside (0, 1]")));
        }
        let weight = pi.iter().map(|p| 1.0 / p).collect();
        let s = SurveySample {
            y,
            pi: Some(pi),
            weight,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn equal_weights(y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(y, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::InvalidInput("empty sample".into()));
        }
        if self.weight.len() != self.y.len() {
            return Err(Error::Shape {
                expected: self.y.len(),
                got: self.weight.len(),
            });
        }
        if let Some(bad) = self.weight.iter().find(|&&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weights must be positive, found {bad}")));
        }
        if let Some(bad) = self.y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite response {bad}")));
        }
        Ok(())
    }

    pub fn max_weight(&self) -> f64 {
        self.weight.iter().cloned().fold(0.0, f64::max)
    }

    /// Fit the family by weighted maximum likelihood.
    pub fn weighted_mle(&self, family: Family) -> Result<Theta> {
        family.weighted_mle(&self.y, &self.weight)
    }

    pub fn moment_init(&self, family: Family) -> Result<Theta> {
        family.moment_init(&self.y, &self.weight)
    }
}

/// Standard normal scores Φ⁻¹(r/(N+1)) for ranks r = 1..=N.
pub fn normal_scores(n: usize) -> Vec<f64> {
    let denom = n as f64 + 1.0;
    (1..=n)
        .map(|r| {
            let p = r as f64 / denom;
            // statrs' inverse alone (≈1e-12) is ample for rank scores
            -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
        })
        .collect()
}

/// Gaussian-copula correlation giving Spearman correlation `rho_s`.
pub fn copula_correlation(rho_s: f64) -> f64 {
    2.0 * (std::f64::consts::PI * rho_s / 6.0).sin()
}

/// Draw a population of `n` units; `z` is standard lognormal with Spearman
/// correlation ≈ `rho_yz` to `y` via a Gaussian copula on the ranks of `y`.
pub fn simulate_population<R: Rng + ?Sized>(
    family: Family,
    theta: &Theta,
    n: usize,
    rho_yz: f64,
    rng: &mut R,
) -> Result<Population> {
    simulate_population_with_scores(family, theta, n, rho_yz, None, rng)
}

/// As [`simulate_population`], reusing precomputed [`normal_scores`].
pub fn simulate_population_with_scores<R: Rng + ?Sized>(
    family: Family,
    theta: &Theta,
    n: usize,
    rho_yz: f64,
    scores: Option<&[f64]>,
    rng: &mut R,
) -> Result<Population> {
    if n < 10 {
        return Err(Error::Design(format!("population size {n} is below 10")));
    }
    if !(0.0..1.0).contains(&rho_yz) {
        return Err(Error::Design(format!("rho_yz must lie in [0, 1), got {rho_yz}")));
    }
    let y = family.sample(theta, n, rng);
    let z = if rho_yz == 0.0 {
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                e.exp()
            })
            .collect()
    } else {
        let owned;
        let scores = match scores {
            Some(s) if s.len() == n => s,
            _ => {
                owned = normal_scores(n);
                &owned[..]
            }
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| y[a].total_cmp(&y[b]));
        let r = copula_correlation(rho_yz);
        let s = (1.0 - r * r).sqrt();
        let mut z = vec![0.0; n];
        for (rank, &unit) in order.iter().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            z[unit] = (r * scores[rank] + s * e).exp();
        }
        z
    };
    Ok(Population { y, z, cluster: None })
}

/// PPS inclusion probabilities π = min(1, n z / Σz). Excess mass from capped
/// units is not redistributed.
pub fn pps_probabilities(z: &[f64], n: usize) -> Vec<f64> {
    let total: f64 = z.iter().sum();
    z.iter().map(|&v| (n as f64 * v / total).min(1.0)).collect()
}

/// Draw a sample from `pop` under `design`.
pub fn draw_sample<R: Rng + ?Sized>(pop: &Population, design: &DesignSpec, rng: &mut R) -> Result<SurveySample> {
    design.validate()?;
    let big_n = pop.len();
    if big_n != design.population_size {
        return Err(Error::Design(format!(
            "population has {big_n} units but the design expects {}",
            design.population_size
        )));
    }
    let n = design.sample_size();
    let (units, pi): (Vec<usize>, Vec<f64>) = match design.kind {
        DesignKind::PoissonPps => {
            let probs = pps_probabilities(&pop.z, n);
            let mut units = Vec::with_capacity(n + n / 4);
            let mut pis = Vec::with_capacity(n + n / 4);
            for (i, &p) in probs.iter().enumerate() {
                if rng.gen::<f64>() < p {
                    units.push(i);
                    pis.push(p);
                }
            }
            if units.is_empty() {
                return Err(Error::EmptySample);
            }
            (units, pis)
        }
        DesignKind::SrsWr => {
            let units: Vec<usize> = (0..n).map(|_| rng.gen_range(0..big_n)).collect();
            (units, vec![n as f64 / big_n as f64; n])
        }
        DesignKind::SrsWor => {
            let mut units = index::sample(rng, big_n, n).into_vec();
            units.sort_unstable();
            (units, vec![n as f64 / big_n as f64; n])
        }
    };
    let weight: Vec<f64> = match design.kind {
        DesignKind::PoissonPps => pi.iter().map(|p| 1.0 / p).collect(),
        _ => vec![big_n as f64 / n as f64; units.len()],
    };
    let mut sample = SurveySample {
        y: units.iter().map(|&i| pop.y[i]).collect(),
        pi: Some(pi),
        weight,
        base_weight: None,
        cluster: pop.cluster.as_ref().map(|c| units.iter().map(|&i| c[i]).collect()),
        x: Some(units.iter().map(|&i| pop.z[i]).collect()),
        design: Some(DesignMeta {
            kind: design.kind,
            population_size: big_n,
            sampling_fraction: design.sampling_fraction,
        }),
        units: Some(units),
        truncated: 0,
    };
    if let Some(cap) = design.weight_truncation_cap {
        sample = truncate_weights(&sample, cap);
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSizes {
    pub n_eff: f64,
    /// +∞ for a census (every π = 1).
    pub n_v_eff: f64,
    pub census: bool,
}

/// n_eff = N²/Σ π⁻¹ and n_V-eff = N²/Σ (1−π)/π over the population's
/// inclusion probabilities. For SRS-WR the variance size is n itself.
pub fn effective_sizes(pi: &[f64], population_size: usize, kind: DesignKind) -> Result<EffectiveSizes> {
    if let Some(bad) = pi.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("inclusion probability {bad} outside (0, 1]")));
    }
    let n2 = (population_size as f64).powi(2);
    let inv: f64 = pi.iter().map(|p| 1.0 / p).sum();
    let n_eff = n2 / inv;
    if kind == DesignKind::SrsWr {
        let n: f64 = pi.iter().sum();
        return Ok(EffectiveSizes {
            n_eff,
            n_v_eff: n,
            census: false,
        });
    }
    let var_sum: f64 = pi.iter().map(|p| (1.0 - p) / p).sum();
    Ok(if var_sum == 0.0 {
        EffectiveSizes {
            n_eff,
            n_v_eff: f64::INFINITY,
            census: true,
        }
    } else {
        EffectiveSizes {
            n_eff,
            n_v_eff: n2 / var_sum,
            census: false,
        }
    })
}

/// Horvitz–Thompson estimates of the population sums in [`effective_sizes`]
/// from the sampled units' π (each population sum Σ_U a(π) is estimated by
/// Σ_S a(π)/π). N falls back to Σ 1/π when unknown.
pub fn effective_sizes_from_sample(sample: &SurveySample) -> Result<EffectiveSizes> {
    let pi = sample
        .pi
        .as_ref()
        .ok_or_else(|| Error::Design("sample carries no inclusion probabilities".into()))?;
    if let Some(bad) = pi.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!("inclusion probability {bad} outside (0, 1]")));
    }
    let inv2: f64 = pi.iter().map(|p| 1.0 / (p * p)).sum();
    let big_n = sample
        .design
        .map(|d| d.population_size as f64)
        .unwrap_or_else(|| pi.iter().map(|p| 1.0 / p).sum());
    let kind = sample.design.map(|d| d.kind);
    let n_eff = big_n * big_n / inv2;
    match kind {
        Some(DesignKind::SrsWr) => Ok(EffectiveSizes {
            n_eff,
            n_v_eff: sample.len() as f64,
            census: false,
        }),
        Some(DesignKind::SrsWor) => {
            let alpha = sample.len() as f64 / big_n;
            Ok(EffectiveSizes {
                n_eff,
                n_v_eff: sample.len() as f64 / (1.0 - alpha),
                census: alpha >= 1.0,
            })
        }
        _ => {
            let var_sum: f64 = pi.iter().map(|p| (1.0 - p) / (p * p)).sum();
            Ok(if var_sum == 0.0 {
                EffectiveSizes {
                    n_eff,
                    n_v_eff: f64::INFINITY,
                    census: true,
                }
            } else {
                EffectiveSizes {
                    n_eff,
                    n_v_eff: big_n * big_n / var_sum,
                    census: false,
                }
            })
        }
    }
}

/// Kish's effective sample size (Σw)²/Σw².
pub fn kish_neff(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Ratio calibration: within each cluster c the weights are scaled by
/// X̄_c / Σ_{i∈S, C(i)=c} ωᵢ xᵢ so that the weighted sample total of `x`
/// reproduces the known total exactly.
pub fn calibrate(
    sample: &SurveySample,
    totals: &BTreeMap<u32, f64>,
    x: &[f64],
    cluster: &[u32],
) -> Result<SurveySample> {
    let n = sample.len();
    if x.len() != n || cluster.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: x.len().min(cluster.len()),
        });
    }
    let mut est: BTreeMap<u32, f64> = BTreeMap::new();
    for ((&c, &xi), &w) in cluster.iter().zip(x).zip(&sample.weight) {
        *est.entry(c).or_insert(0.0) += w * xi;
    }
    let mut bad: Vec<u32> = Vec::new();
    for (&c, &t) in totals {
        if !(t > 0.0) || !(est.get(&c).copied().unwrap_or(0.0) > 0.0) {
            bad.push(c);
        }
    }
    for c in est.keys() {
        if !totals.contains_key(c) {
            bad.push(*c);
        }
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(Error::Calibration(bad));
    }
    let factor: BTreeMap<u32, f64> = est.iter().map(|(c, e)| (*c, totals[c] / e)).collect();
    let mut out = sample.clone();
    out.weight = sample.weight.iter().zip(cluster).map(|(w, c)| w * factor[c]).collect();
    if out.base_weight.is_none() {
        out.base_weight = Some(sample.weight.clone());
    }
    out.x = Some(x.to_vec());
    out.cluster = Some(cluster.to_vec());
    Ok(out)
}

/// Clip weights at `cap`.
pub fn truncate_weights(sample: &SurveySample, cap: f64) -> SurveySample {
    let mut out = sample.clone();
    let mut count = 0;
    for w in out.weight.iter_mut() {
        if *w > cap {
            *w = cap;
            count += 1;
        }
    }
    out.truncated = sample.truncated + count;
    out
}

/// Spearman rank correlation (no tie correction; continuous data).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_unstable_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    sab / (saa * sbb).sqrt()
}

/// Read a sample from CSV text: a `y` column plus exactly one of `weight` or
/// `pi`; optional `cluster` (integer) and `x` columns. Lines starting with `#`
/// are comments.
pub fn read_sample_csv(text: &str) -> Result<SurveySample> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let y_col = col("y").ok_or_else(|| Error::Schema("missing column `y`".into()))?;
    let (w_col, p_col) = (col("weight"), col("pi"));
    let weight_col = match (w_col, p_col) {
        (Some(_), Some(_)) => return Err(Error::Schema("give either `weight` or `pi`, not both".into())),
        (None, None) => return Err(Error::Schema("missing column `weight` (or `pi`)".into())),
        (Some(c), None) | (None, Some(c)) => c,
    };
    let (c_col, x_col) = (col("cluster"), col("x"));
    let (mut y, mut w) = (Vec::new(), Vec::new());
    let mut clusters = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = rec[i].parse().map_err(|_| Error::Parse {
                line,
                message: format!("column `{name}`: cannot parse `{}` as a number", &rec[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column `{name}`: non-finite value"),
                });
            }
            Ok(v)
        };
        let yi = num(y_col, "y")?;
        let wi = num(weight_col, header.get(weight_col).unwrap_or("weight"))?;
        let ok = if p_col.is_some() {
            wi > 0.0 && wi <= 1.0
        } else {
            wi > 0.0
        };
        if !ok {
            return Err(Error::Parse {
                line,
                message: format!("`{}` value {wi} out of range", &header[weight_col]),
            });
        }
        y.push(yi);
        w.push(wi);
        if let Some(c) = c_col {
            clusters.push(rec[c].parse::<u32>().map_err(|_| Error::Parse {
                line,
                message: format!("column `cluster`: cannot parse `{}` as an integer", &rec[c]),
            })?);
        }
        if let Some(c) = x_col {
            xs.push(num(c, "x")?);
        }
    }
    if y.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    let mut s = if p_col.is_some() {
        SurveySample::from_pi(y, w)?
    } else {
        SurveySample::new(y, w)?
    };
    s.cluster = c_col.map(|_| clusters);
    s.x = x_col.map(|_| xs);
    Ok(s)
}

/// Write `y,weight` CSV.
pub fn write_sample_csv(sample: &SurveySample, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "y,weight")?;
    for (y, w) in sample.y.iter().zip(&sample.weight) {
        writeln!(out, "{y},{w}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gamma_theta() -> Theta {
        Family::Gamma.theta(2.0, 35000.0).unwrap()
    }

    #[test]
    fn effective_sizes_worked_example() {
        let e = effective_sizes(&[0.5, 0.25], 2, DesignKind::PoissonPps).unwrap();
        assert!((e.n_eff - 4.0 / 6.0).abs() < 1e-15);
        assert!((e.n_v_eff - 1.0).abs() < 1e-15);
        let c = effective_sizes(&[1.0, 1.0, 1.0], 3, DesignKind::PoissonPps).unwrap();
        assert!(c.census && c.n_v_eff.is_infinite());
        assert!(effective_sizes(&[0.0, 0.5], 2, DesignKind::PoissonPps).is_err());
    }

    #[test]
    fn effective_sizes_srs_closed_forms() {
        let (big_n, alpha) = (10_000usize, 0.1);
        let pi = vec![alpha; big_n];
        let wor = effective_sizes(&pi, big_n, DesignKind::SrsWor).unwrap();
        assert!((wor.n_eff - 1000.0).abs() < 1e-8);
        assert!((wor.n_v_eff - 1000.0 / 0.9).abs() < 1e-8);
        let wr = effective_sizes(&pi, big_n, DesignKind::SrsWr).unwrap();
        assert!((wr.n_v_eff - 1000.0).abs() < 1e-8);
    }

    #[test]
    fn kish_examples() {
        assert!((kish_neff(&[1.0; 7]) - 7.0).abs() < 1e-12);
        assert!((kish_neff(&[1.0, 3.0]) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn copula_hits_target_spearman() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &rho in &[0.0, 0.3, 0.7] {
            let pop = simulate_population(Family::Gamma, &gamma_theta(), 50_000, rho, &mut rng).unwrap();
            assert!(pop.z.iter().all(|&z| z > 0.0));
            let r = spearman(&pop.y, &pop.z);
            assert!((r - rho).abs() < 0.015, "target {rho} got {r}");
        }
    }

    #[test]
    fn draws_respect_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pop = simulate_population(Family::Gamma, &gamma_theta(), 20_000, 0.5, &mut rng).unwrap();
        let wor = DesignSpec::new(DesignKind::SrsWor, 20_000, 0.05);
        let s = draw_sample(&pop, &wor, &mut rng).unwrap();
        assert_eq!(s.len(), 1000);
        let mut u = s.units.clone().unwrap();
        u.dedup();
        assert_eq!(u.len(), 1000);
        assert!(s.weight.iter().all(|&w| (w - 20.0).abs() < 1e-12));

        let wr = DesignSpec::new(DesignKind::SrsWr, 20_000, 0.05);
        assert_eq!(draw_sample(&pop, &wr, &mut rng).unwrap().len(), 1000);

        let pps = DesignSpec::new(DesignKind::PoissonPps, 20_000, 0.05);
        let mut sizes = Vec::new();
        for _ in 0..50 {
            let s = draw_sample(&pop, &pps, &mut rng).unwrap();
            for (p, w) in s.pi.as_ref().unwrap().iter().zip(&s.weight) {
                assert!(*p > 0.0 && *p <= 1.0);
                assert!((p * w - 1.0).abs() < 1e-12);
            }
            sizes.push(s.len() as f64);
        }
        let expected: f64 = pps_probabilities(&pop.z, 1000).iter().sum();
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        assert!((mean - expected).abs() < 15.0, "{mean} vs {expected}");
    }

    #[test]
    fn horvitz_thompson_total_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pop = simulate_population(
            Family::Lognormal,
            &Family::Lognormal.theta(9.0, 0.8).unwrap(),
            10_000,
            0.6,
            &mut rng,
        )
        .unwrap();
        let total: f64 = pop.y.iter().sum();
        let pps = DesignSpec::new(DesignKind::PoissonPps, 10_000, 0.05);
        let reps = 400;
        let mut acc = 0.0;
        for _ in 0..reps {
            let s = draw_sample(&pop, &pps, &mut rng).unwrap();
            acc += s.y.iter().zip(&s.weight).map(|(y, w)| y * w).sum::<f64>();
        }
        let rel = (acc / reps as f64 - total) / total;
        assert!(rel.abs() < 0.01, "relative error {rel}");
    }

    #[test]
    fn calibration_reproduces_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pop = simulate_population(
            Family::Weibull,
            &Family::Weibull.theta(1.5, 40000.0).unwrap(),
            10_000,
            0.4,
            &mut rng,
        )
        .unwrap();
        pop.assign_clusters(5, &mut rng);
        let totals = pop.cluster_totals().unwrap();
        let s = draw_sample(&pop, &DesignSpec::new(DesignKind::PoissonPps, 10_000, 0.03), &mut rng).unwrap();
        let x = s.x.clone().unwrap();
        let c = s.cluster.clone().unwrap();
        let cal = calibrate(&s, &totals, &x, &c).unwrap();
        for (&k, &t) in &totals {
            let est: f64 = cal
                .weight
                .iter()
                .zip(&x)
                .zip(&c)
                .filter(|(_, &ci)| ci == k)
                .map(|((w, xi), _)| w * xi)
                .sum();
            assert!(((est - t) / t).abs() < 1e-12);
        }
        assert_eq!(cal.base_weight.as_ref().unwrap(), &s.weight);
        // Already calibrated weights stay put.
        let again = calibrate(&cal, &totals, &x, &c).unwrap();
        for (a, b) in again.weight.iter().zip(&cal.weight) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn calibration_names_empty_clusters() {
        let s = SurveySample::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        let totals: BTreeMap<u32, f64> = [(1, 3.0), (2, 4.0), (3, 5.0)].into_iter().collect();
        match calibrate(&s, &totals, &[1.0, 1.0], &[1, 1]) {
            Err(Error::Calibration(c)) => assert_eq!(c, vec![2, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_counts_clipped_weights() {
        let s = SurveySample::new(vec![1.0, 2.0, 3.0], vec![1.0, 5.0, 9.0]).unwrap();
        let t = truncate_weights(&s, 4.0);
        assert_eq!(t.weight, vec![1.0, 4.0, 4.0]);
        assert_eq!(t.truncated, 2);
    }

    #[test]
    fn sample_validation() {
        assert!(SurveySample::new(vec![], vec![]).is_err());
        assert!(SurveySample::new(vec![1.0], vec![0.0]).is_err());
        assert!(SurveySample::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(SurveySample::from_pi(vec![1.0], vec![1.5]).is_err());
        assert!(DesignSpec::new(DesignKind::SrsWor, 10, 0.1).validate().is_err());
    }

    #[test]
    fn csv_ingestion() {
        let s = read_sample_csv("# note\ny,weight\n1.5,2\n3,4\n").unwrap();
        assert_eq!(s.y, vec![1.5, 3.0]);
        assert_eq!(s.weight, vec![2.0, 4.0]);
        let p = read_sample_csv("y,pi,cluster\n1,0.5,1\n2,0.25,2\n").unwrap();
        assert_eq!(p.weight, vec![2.0, 4.0]);
        assert_eq!(p.cluster, Some(vec![1, 2]));
        assert!(matches!(read_sample_csv("y\n1\n"), Err(Error::Schema(_))));
        assert!(matches!(read_sample_csv("v,weight\n1,1\n"), Err(Error::Schema(_))));
        match read_sample_csv("y,weight\n1,1\n2,abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_sample_csv("y,pi\n1,1.5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        let mut buf = Vec::new();
        write_sample_csv(&s, &mut buf).unwrap();
        assert_eq!(read_sample_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn n_eff_bounded_by_expected_size(pi in prop::collection::vec(0.001f64..1.0, 2..60)) {
            let big_n = pi.len();
            let e = effective_sizes(&pi, big_n, DesignKind::PoissonPps).unwrap();
            let n: f64 = pi.iter().sum();
            prop_assert!(e.n_eff <= n * (1.0 + 1e-12));
            prop_assert!(n <= big_n as f64);
            prop_assert!(e.n_v_eff >= e.n_eff * (1.0 - 1e-12));
        }

        #[test]
        fn kish_in_range(w in prop::collection::vec(0.01f64..100.0, 1..50)) {
            let k = kish_neff(&w);
            prop_assert!(k >= 1.0 - 1e-12 && k <= w.len() as f64 * (1.0 + 1e-12));
        }
    }
}
