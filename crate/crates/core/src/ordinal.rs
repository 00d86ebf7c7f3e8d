//! Cumulative-link ordinal observation model.
//!
//! `p(y = c | f) = F(b_c - f) - F(b_{c-1} - f)` with `b_0 = -inf`, `b_C = +inf`
//! and `F` the logistic CDF (ordered logit, default) or the standard normal
//! CDF (ordered probit). Levels are 1-based throughout the public API.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{LN_2, SQRT_2};

use crate::error::{Error, Result};

/// Smallest gap between consecutive cuts produced by [`parameterize_thresholds`].
pub const MIN_CUT_GAP: f64 = 1e-9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// CDF used by the cumulative link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            other => Err(Error::Config(format!("unknown link '{other}'"))),
        }
    }
}

/// `log(F(upper) - F(lower))` together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogBand {
    pub value: f64,
    pub d_upper: f64,
    pub d_lower: f64,
}

impl Link {
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Link::Logit => sigmoid(x),
            Link::Probit => 0.5 * erfc(-x / SQRT_2),
        }
    }

    /// Log-probability mass of the band `(lower, upper]`; either end may be
    /// infinite.
    pub fn log_band(self, upper: f64, lower: f64) -> LogBand {
        match self {
            Link::Logit => logit_band(upper, lower),
            Link::Probit => probit_band(upper, lower),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `log(1 - exp(x))` for `x < 0`.
#[inline]
fn log1mexp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

fn logit_band(upper: f64, lower: f64) -> LogBand {
    match (upper.is_finite(), lower.is_finite()) {
        (false, false) => LogBand {
            value: 0.0,
            d_upper: 0.0,
            d_lower: 0.0,
        },
        (true, false) => LogBand {
            value: log_sigmoid(upper),
            d_upper: sigmoid(-upper),
            d_lower: 0.0,
        },
        (false, true) => LogBand {
            value: log_sigmoid(-lower),
            d_upper: 0.0,
            d_lower: -sigmoid(lower),
        },
        (true, true) => {
            // sigma(u) - sigma(l) = sigma(u) sigma(-l) (1 - e^{l-u})
            let gap = upper - lower;
            let inv = 1.0 / gap.exp_m1();
            LogBand {
                value: log_sigmoid(upper) + log_sigmoid(-lower) + log1mexp(-gap),
                d_upper: sigmoid(-upper) + inv,
                d_lower: -sigmoid(lower) - inv,
            }
        }
    }
}

/// `log Phi(x)`, accurate far into the lower tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else if x > -20.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2));
        -0.5 * x * x - (-x).ln() - HALF_LN_2PI + series.ln()
    }
}

#[inline]
fn log_npdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

fn probit_band(upper: f64, lower: f64) -> LogBand {
    let value = match (upper.is_finite(), lower.is_finite()) {
        (false, false) => {
            return LogBand {
                value: 0.0,
                d_upper: 0.0,
                d_lower: 0.0,
            }
        }
        (true, false) => log_ndtr(upper),
        (false, true) => log_ndtr(-lower),
        (true, true) => {
            if lower > 0.0 {
                // mass sits in the upper tail: Phi(-l) - Phi(-u)
                let (a, b) = (log_ndtr(-lower), log_ndtr(-upper));
                a + log1mexp(b - a)
            } else {
                let (a, b) = (log_ndtr(upper), log_ndtr(lower));
                a + log1mexp(b - a)
            }
        }
    };
    let d_upper = if upper.is_finite() {
        (log_npdf(upper) - value).exp()
    } else {
        0.0
    };
    let d_lower = if lower.is_finite() {
        -(log_npdf(lower) - value).exp()
    } else {
        0.0
    };
    LogBand {
        value,
        d_upper,
        d_lower,
    }
}

/// Strictly increasing cut points `b_1 < ... < b_{C-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalThresholds {
    cuts: Vec<f64>,
}

impl OrdinalThresholds {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if let Some(c) = cuts.iter().find(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("threshold {c} is not finite")));
        }
        if let Some(w) = cuts.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(format!(
                "thresholds must be strictly increasing, found {} followed by {}",
                w[0], w[1]
            )));
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn num_levels(&self) -> usize {
        self.cuts.len() + 1
    }

    /// `(b_c, b_{c-1})` for a 1-based level, with infinite ends.
    #[inline]
    fn band(&self, level: usize) -> (f64, f64) {
        let upper = self.cuts.get(level - 1).copied().unwrap_or(f64::INFINITY);
        let lower = if level >= 2 {
            self.cuts[level - 2]
        } else {
            f64::NEG_INFINITY
        };
        (upper, lower)
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.num_levels() {
            return Err(Error::Data(format!(
                "response level {level} outside 1..={}",
                self.num_levels()
            )));
        }
        Ok(())
    }
}

/// Categorical distribution over the `C` levels given the latent value `f`.
pub fn ordinal_probs(f: f64, thresholds: &OrdinalThresholds, link: Link) -> Vec<f64> {
    (1..=thresholds.num_levels())
        .map(|level| {
            let (upper, lower) = thresholds.band(level);
            link.log_band(upper - f, lower - f).value.exp()
        })
        .collect()
}

/// `log p(y = level | f)`.
pub fn ordinal_log_prob(
    level: usize,
    f: f64,
    thresholds: &OrdinalThresholds,
    link: Link,
) -> Result<f64> {
    thresholds.check_level(level)?;
    Ok(ordinal_log_prob_grad(level, f, thresholds, link).value)
}

/// Log-probability with derivatives with respect to `f` and to the two cuts
/// bounding the level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdinalLogProbGrad {
    pub value: f64,
    pub d_f: f64,
    /// Derivative with respect to `b_level` (zero for the top level).
    pub d_upper_cut: f64,
    /// Derivative with respect to `b_{level-1}` (zero for the bottom level).
    pub d_lower_cut: f64,
}

/// Unchecked variant used inside the quadrature loops; `level` must be valid.
#[inline]
pub fn ordinal_log_prob_grad(
    level: usize,
    f: f64,
    thresholds: &OrdinalThresholds,
    link: Link,
) -> OrdinalLogProbGrad {
    let (upper, lower) = thresholds.band(level);
    let band = link.log_band(upper - f, lower - f);
    OrdinalLogProbGrad {
        value: band.value,
        d_f: -(band.d_upper + band.d_lower),
        d_upper_cut: band.d_upper,
        d_lower_cut: band.d_lower,
    }
}

/// Maps an unconstrained vector onto strictly increasing cuts:
/// `b_1 = raw_1`, `b_k = b_{k-1} + softplus(raw_k)`.
///
/// Gaps are floored at [`MIN_CUT_GAP`] so that extreme negative inputs still
/// produce representable, strictly increasing cuts.
pub fn parameterize_thresholds(raw: &[f64]) -> OrdinalThresholds {
    let mut cuts = Vec::with_capacity(raw.len());
    for (k, &r) in raw.iter().enumerate() {
        if k == 0 {
            cuts.push(r);
        } else {
            let prev = cuts[k - 1];
            let mut next = prev + softplus(r).max(MIN_CUT_GAP);
            if next <= prev {
                next = prev + prev.abs() * 4.0 * f64::EPSILON;
            }
            cuts.push(next);
        }
    }
    OrdinalThresholds { cuts }
}

/// Inverse of [`parameterize_thresholds`].
pub fn unparameterize_thresholds(thresholds: &OrdinalThresholds) -> Vec<f64> {
    let cuts = thresholds.cuts();
    cuts.iter()
        .enumerate()
        .map(|(k, &c)| {
            if k == 0 {
                c
            } else {
                softplus_inv(c - cuts[k - 1])
            }
        })
        .collect()
}

/// Pulls a gradient with respect to the cuts back to the raw parameters.
pub fn threshold_raw_gradient(raw: &[f64], d_cuts: &[f64]) -> Vec<f64> {
    let n = raw.len();
    let mut suffix = vec![0.0; n];
    let mut acc = 0.0;
    for k in (0..n).rev() {
        acc += d_cuts[k];
        suffix[k] = acc;
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                suffix[0]
            } else if softplus(raw[k]) < MIN_CUT_GAP {
                0.0
            } else {
                sigmoid(raw[k]) * suffix[k]
            }
        })
        .collect()
}
