//! Normalized mutual information with cubic B-spline Parzen windows.
//!
//! Intensities in `[0, 1]` map to the continuous bin coordinate
//! `1 + i * (bins - 3)`, so the kernel support stays inside the histogram and
//! every sample contributes unit mass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_BINS: usize = 32;
const BLOCK: usize = 4096;

/// Cubic B-spline.
#[inline]
pub(crate) fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let r = 2.0 - a;
        r * r * r / 6.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn bspline3_deriv(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        -2.0 * t + 1.5 * t * a
    } else if a < 2.0 {
        let r = 2.0 - a;
        -t.signum() * 0.5 * r * r
    } else {
        0.0
    }
}

/// Parzen taps of one intensity: first bin, four weights, four weight
/// derivatives w.r.t. the intensity.
#[derive(Clone, Copy, Debug)]
struct Taps {
    first: isize,
    w: [f64; 4],
    dw: [f64; 4],
}

impl Taps {
    #[inline]
    fn new(intensity: f64, bins: usize) -> Taps {
        let span = (bins - 3) as f64;
        let live = if (0.0..=1.0).contains(&intensity) { span } else { 0.0 };
        let xi = 1.0 + intensity.clamp(0.0, 1.0) * span;
        let first = xi.floor() as isize - 1;
        let mut w = [0.0; 4];
        let mut dw = [0.0; 4];
        for k in 0..4 {
            let t = xi - (first + k as isize) as f64;
            w[k] = bspline3(t);
            dw[k] = bspline3_deriv(t) * live;
        }
        Taps { first, w, dw }
    }

    #[inline]
    fn bins(&self, bins: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..4).filter_map(move |k| {
            let b = self.first + k as isize;
            (b >= 0 && (b as usize) < bins).then_some((k, b as usize))
        })
    }
}

/// Normalized joint intensity distribution of two images.
#[derive(Clone, Debug)]
pub struct JointHistogram {
    bins: usize,
    /// Row-major `[fixed_bin][warped_bin]`, summing to one.
    counts: Vec<f64>,
    fixed_marginal: Vec<f64>,
    warped_marginal: Vec<f64>,
    /// Kernel width in bins.
    bandwidth: f64,
}

impl JointHistogram {
    pub fn build(fixed: &Volume, warped: &Volume, bins: usize) -> Result<JointHistogram> {
        if bins < 5 {
            return Err(Error::InvalidValue(format!("need at least 5 histogram bins, got {bins}")));
        }
        fixed.grid().ensure_matches(warped.grid(), "nmi images")?;
        let f = fixed.data();
        let w = warped.data();
        let n = f.len();
        let blocks = n.div_ceil(BLOCK);
        let partials: Vec<Vec<f64>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut h = vec![0.0; bins * bins];
                for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    let tf = Taps::new(f[i], bins);
                    let tw = Taps::new(w[i], bins);
                    for (ka, a) in tf.bins(bins) {
                        for (kb, bb) in tw.bins(bins) {
                            h[a * bins + bb] += tf.w[ka] * tw.w[kb];
                        }
                    }
                }
                h
            })
            .collect();
        let mut counts = vec![0.0; bins * bins];
        for p in partials {
            for (c, v) in counts.iter_mut().zip(p) {
                *c += v;
            }
        }
        let inv = 1.0 / n as f64;
        counts.iter_mut().for_each(|c| *c *= inv);
        let mut fixed_marginal = vec![0.0; bins];
        let mut warped_marginal = vec![0.0; bins];
        for a in 0..bins {
            for b in 0..bins {
                let p = counts[a * bins + b];
                fixed_marginal[a] += p;
                warped_marginal[b] += p;
            }
        }
        Ok(JointHistogram {
            bins,
            counts,
            fixed_marginal,
            warped_marginal,
            bandwidth: 1.0,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn fixed_marginal(&self) -> &[f64] {
        &self.fixed_marginal
    }

    pub fn warped_marginal(&self) -> &[f64] {
        &self.warped_marginal
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(&self.counts)
    }

    pub fn fixed_entropy(&self) -> f64 {
        entropy(&self.fixed_marginal)
    }

    pub fn warped_entropy(&self) -> f64 {
        entropy(&self.warped_marginal)
    }

    /// `(H(F) + H(W)) / H(F, W)`.
    pub fn nmi(&self) -> f64 {
        (self.fixed_entropy() + self.warped_entropy()) / self.joint_entropy()
    }
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `-NMI(fixed, warped)` with the default bin count, and its gradient w.r.t. the warped intensities.
pub fn nmi_loss(fixed: &Volume, warped: &Volume) -> Result<(f64, Volume)> {
    nmi_loss_with_bins(fixed, warped, DEFAULT_BINS)
}

pub fn nmi_loss_with_bins(fixed: &Volume, warped: &Volume, bins: usize) -> Result<(f64, Volume)> {
    let hist = JointHistogram::build(fixed, warped, bins)?;
    let hf = hist.fixed_entropy();
    let hw = hist.warped_entropy();
    let hj = hist.joint_entropy();
    let loss = -(hf + hw) / hj;

    // dloss/dp(a, b), with H_W depending on p through the warped marginal.
    let mut dp = vec![0.0; bins * bins];
    for a in 0..bins {
        for b in 0..bins {
            let p = hist.counts[a * bins + b];
            let pw = hist.warped_marginal[b];
            let dhj = if p > 0.0 { -(p.ln() + 1.0) } else { 0.0 };
            let dhw = if pw > 0.0 { -(pw.ln() + 1.0) } else { 0.0 };
            dp[a * bins + b] = -(dhw * hj - (hf + hw) * dhj) / (hj * hj);
        }
    }

    let f = fixed.data();
    let w = warped.data();
    let inv = 1.0 / f.len() as f64;
    let grad: Vec<f64> = (0..f.len())
        .into_par_iter()
        .map(|i| {
            let tf = Taps::new(f[i], bins);
            let tw = Taps::new(w[i], bins);
            let mut g = 0.0;
            for (ka, a) in tf.bins(bins) {
                for (kb, b) in tw.bins(bins) {
                    g += dp[a * bins + b] * tf.w[ka] * tw.dw[kb];
                }
            }
            g * inv
        })
        .collect();
    Ok((loss, Volume::new(*warped.grid(), grad)?))
}
