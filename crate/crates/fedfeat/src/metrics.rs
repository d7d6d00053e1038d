//! Histogram-based diagnostics comparing fresh and noise-perturbed feature
//! batches: mutual information, entropy difference, KL divergence, and
//! Pearson feature correlation. All logarithms are natural (nats).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub bins: usize,
    /// Smoothing added inside entropy logs.
    pub eps1: f64,
    /// Smoothing added to both distributions in KL.
    pub eps2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            bins: 32,
            eps1: 1e-9,
            eps2: 1e-9,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Metric(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.eps1 > 0.0) || !(self.eps2 > 0.0) {
            return Err(Error::Metric("smoothing constants must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub probs: Vec<f64>,
    /// bins+1 boundaries; values at the top edge fall in the last bin.
    pub edges: Vec<f64>,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo) * bins as f64) as usize;
    t.min(bins - 1)
}

/// Smallest and largest values across the given slices. Degenerate (constant)
/// data widens the range slightly so everything lands in one bin.
pub fn pooled_range(parts: &[&[f64]]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for p in parts {
        for &v in *p {
            if !v.is_finite() {
                return Err(Error::Metric("non-finite value in metric input".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
            seen = true;
        }
    }
    if !seen {
        return Err(Error::Metric("empty metric input".into()));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok((lo, hi))
}

/// Equal-width histogram of `x` over `[lo, hi]`, normalized to probabilities.
pub fn histogram(x: &[f64], cfg: &MetricConfig, range: (f64, f64)) -> Result<Histogram> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::Metric("empty metric input".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Metric(format!("bad histogram range [{}, {}]", lo, hi)));
    }
    let mut counts = vec![0usize; cfg.bins];
    for &v in x {
        counts[bin_index(v, lo, hi, cfg.bins)] += 1;
    }
    let n = x.len() as f64;
    let width = (hi - lo) / cfg.bins as f64;
    Ok(Histogram {
        probs: counts.iter().map(|c| *c as f64 / n).collect(),
        edges: (0..=cfg.bins).map(|i| lo + width * i as f64).collect(),
    })
}

/// −Σ pᵢ ln(pᵢ + eps1).
pub fn entropy(h: &Histogram, cfg: &MetricConfig) -> f64 {
    -h.probs.iter().map(|p| p * (p + cfg.eps1).ln()).sum::<f64>()
}

fn entropy_of(x: &[f64], cfg: &MetricConfig, range: (f64, f64)) -> Result<f64> {
    Ok(entropy(&histogram(x, cfg, range)?, cfg))
}

/// |H(x) − H(x_noisy)| over a shared (pooled) bin range.
pub fn entropy_difference(x: &Tensor, x_noisy: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    if x.len() != x_noisy.len() {
        return Err(Error::Metric(format!(
            "entropy difference needs equal counts, got {} and {}",
            x.len(),
            x_noisy.len()
        )));
    }
    let range = pooled_range(&[x.data(), x_noisy.data()])?;
    Ok((entropy_of(x.data(), cfg, range)? - entropy_of(x_noisy.data(), cfg, range)?).abs())
}

/// H(X) + H(Y) − H(X,Y); the joint term uses a bins×bins histogram of the
/// paired values, each axis over the pooled range of both inputs.
pub fn mutual_information(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::Metric(format!(
            "mutual information needs paired values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let range = pooled_range(&[x.data(), y.data()])?;
    let hx = entropy_of(x.data(), cfg, range)?;
    let hy = entropy_of(y.data(), cfg, range)?;

    let (lo, hi) = range;
    let n = x.len() as f64;
    let mut joint = vec![0.0f64; cfg.bins * cfg.bins];
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let i = bin_index(a, lo, hi, cfg.bins);
        let j = bin_index(b, lo, hi, cfg.bins);
        joint[i * cfg.bins + j] += 1.0 / n;
    }
    let hxy = -joint.iter().map(|p| p * (p + cfg.eps1).ln()).sum::<f64>();
    Ok(hx + hy - hxy)
}

/// Σ pᵢ ln((pᵢ+eps2)/(qᵢ+eps2)). Smoothing can make the result very slightly
/// negative (magnitude at most bins·eps2); it is reported as-is, not clamped.
pub fn kl_divergence(p: &Histogram, q: &Histogram, cfg: &MetricConfig) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::Metric(format!(
            "KL needs matching bin counts, got {} and {}",
            p.probs.len(),
            q.probs.len()
        )));
    }
    if p.edges
        .iter()
        .zip(&q.edges)
        .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())))
    {
        return Err(Error::Metric("KL needs histograms over identical edges".into()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(pi, qi)| pi * ((pi + cfg.eps2) / (qi + cfg.eps2)).ln())
        .sum())
}

/// Pearson correlation of the flattened values.
pub fn feature_correlation(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Metric(format!(
            "correlation needs equal nonempty counts, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.data().iter().sum::<f64>() / n;
    let my = y.data().iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// The four per-round diagnostics between fresh and noisy feature batches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricReport {
    pub mi: f64,
    pub ed: f64,
    pub kl: f64,
    pub fc: f64,
}

/// Compute all four metrics at once over pooled batches. Correlation falls
/// back to 1.0 when either side is constant (identical degenerate batches
/// carry no linear distortion to measure).
pub fn metric_report(fresh: &Tensor, noisy: &Tensor, cfg: &MetricConfig) -> Result<MetricReport> {
    let range = pooled_range(&[fresh.data(), noisy.data()])?;
    let p = histogram(fresh.data(), cfg, range)?;
    let q = histogram(noisy.data(), cfg, range)?;
    Ok(MetricReport {
        mi: mutual_information(fresh, noisy, cfg)?,
        ed: entropy_difference(fresh, noisy, cfg)?,
        kl: kl_divergence(&p, &q, cfg)?,
        fc: feature_correlation(fresh, noisy).unwrap_or(1.0),
    })
}
