//! Per predictor-month normalization: winsorize, Hawkins–Weisberg shift, Box-Cox power,
//! standardize.

use std::collections::BTreeMap;
use std::io::Write;

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::quantile_sorted;
use crate::month::YearMonth;
use crate::panel::PredictorPanel;

/// Columns with fewer observations skip the power fit.
pub const MIN_FIT_OBS: usize = 10;
pub const WINSOR_TAIL: f64 = 0.01;
pub const LAMBDA_BOUNDS: (f64, f64) = (-3.0, 3.0);

/// Fitted transform of one predictor in one month.
///
/// `gamma == 0` denotes the shiftless path: the Hawkins step is skipped and, with
/// `lambda == 1`, the whole transform is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub predictor: String,
    pub yyyymm: YearMonth,
    pub winsor_lo: f64,
    pub winsor_hi: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub post_mean: f64,
    pub post_sd: f64,
    pub n_obs: usize,
    pub degenerate: bool,
}

/// Clips values to the empirical 1st and 99th percentiles.
pub fn winsorize(values: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = winsor_bounds(values)?;
    Ok(values.iter().map(|v| v.clamp(lo, hi)).collect())
}

fn winsor_bounds(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "winsorizing needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&sorted, WINSOR_TAIL),
        quantile_sorted(&sorted, 1.0 - WINSOR_TAIL),
    ))
}

/// Box-Cox power transform; `log x` at `lambda == 0`.
pub fn box_cox_core(x: f64, lambda: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Box-Cox needs a positive argument, got {x}"
        )));
    }
    Ok(box_cox_log(x.ln(), lambda))
}

fn box_cox_log(log_x: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        log_x
    } else {
        (lambda * log_x).exp_m1() / lambda
    }
}

fn box_cox_inverse(v: f64, lambda: f64) -> Option<f64> {
    if lambda == 0.0 {
        return Some(v.exp());
    }
    let t = lambda * v;
    if t <= -1.0 {
        return None;
    }
    let y = (t.ln_1p() / lambda).exp();
    y.is_finite().then_some(y)
}

/// `0.5·(y + sqrt(y² + γ²))`, a smooth positive shift of the real line.
pub fn hawkins_map(y: f64, gamma: f64) -> f64 {
    0.5 * (y + y.hypot(gamma))
}

fn hawkins_inverse(y: f64, gamma: f64) -> f64 {
    y - gamma * gamma / (4.0 * y)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Gaussian profile log-likelihood of `x` under `g_BC(g_HW(x | γ) | λ)` including
/// the Jacobian of both maps. `gamma == 0` with `lambda == 1` is the identity.
pub fn profile_loglik(x: &[f64], gamma: f64, lambda: f64) -> f64 {
    let n = x.len() as f64;
    if gamma == 0.0 {
        if lambda == 1.0 {
            let (_, sd) = mean_sd(x);
            return -0.5 * n * (sd * sd).ln();
        }
        if x.iter().any(|&v| v <= 0.0) {
            return f64::NEG_INFINITY;
        }
    }
    let shifted = Shifted::new(x, gamma);
    shifted.loglik(lambda)
}

struct Shifted {
    log_y: Vec<f64>,
    sum_log_y: f64,
    log_jacobian: f64,
}

impl Shifted {
    fn new(x: &[f64], gamma: f64) -> Self {
        let mut log_y = Vec::with_capacity(x.len());
        let mut log_jacobian = 0.0;
        for &v in x {
            let y = if gamma > 0.0 { hawkins_map(v, gamma) } else { v };
            log_y.push(y.ln());
            if gamma > 0.0 {
                log_jacobian += y.ln() - v.hypot(gamma).ln();
            }
        }
        let sum_log_y = log_y.iter().sum();
        Shifted {
            log_y,
            sum_log_y,
            log_jacobian,
        }
    }

    fn loglik(&self, lambda: f64) -> f64 {
        let z: Vec<f64> = self.log_y.iter().map(|&l| box_cox_log(l, lambda)).collect();
        let (_, sd) = mean_sd(&z);
        let n = z.len() as f64;
        let ll = -0.5 * n * (sd * sd).ln() + (lambda - 1.0) * self.sum_log_y + self.log_jacobian;
        if ll.is_nan() {
            f64::NEG_INFINITY
        } else {
            ll
        }
    }
}

struct NegLoglik<'a>(&'a Shifted);

impl CostFunction for NegLoglik<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, lambda: &f64) -> std::result::Result<f64, argmin::core::Error> {
        let ll = self.0.loglik(*lambda);
        Ok(if ll.is_finite() { -ll } else { f64::MAX })
    }
}

fn best_lambda(shifted: &Shifted) -> Option<(f64, f64)> {
    let (lo, hi) = LAMBDA_BOUNDS;
    let solver = BrentOpt::new(lo, hi).set_tolerance(1e-10, 1e-9);
    let res = Executor::new(NegLoglik(shifted), solver)
        .configure(|s| s.max_iters(500))
        .run()
        .ok()?;
    let mut best = res.state().best_param?;
    let mut best_ll = shifted.loglik(best);
    // Brent is local; a coarse scan guards against a second mode.
    for k in 0..=12 {
        let lam = lo + (hi - lo) * k as f64 / 12.0;
        let ll = shifted.loglik(lam);
        if ll > best_ll {
            best = lam;
            best_ll = ll;
        }
    }
    best_ll.is_finite().then_some((best, best_ll))
}

/// Fits the transform on one column of observed values and returns the standardized
/// column.
pub fn fit_transform(
    predictor: &str,
    month: YearMonth,
    values: &[f64],
) -> Result<(TransformParams, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{predictor} has no observations in {month}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { line: 0 });
    }
    let n = values.len();
    let (lo, hi, gamma, lambda) = if n < MIN_FIT_OBS {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi, 0.0, 1.0)
    } else {
        let (lo, hi) = winsor_bounds(values)?;
        let w: Vec<f64> = values.iter().map(|v| v.clamp(lo, hi)).collect();
        let (gamma, lambda) = if lo == hi { (0.0, 1.0) } else { fit_power(&w) };
        (lo, hi, gamma, lambda)
    };
    let mut params = TransformParams {
        predictor: predictor.to_string(),
        yyyymm: month,
        winsor_lo: lo,
        winsor_hi: hi,
        gamma,
        lambda,
        post_mean: 0.0,
        post_sd: 1.0,
        n_obs: n,
        degenerate: false,
    };
    let raw: Vec<f64> = values
        .iter()
        .map(|&v| params.power(v))
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_sd(&raw);
    params.post_mean = mean;
    if sd > 0.0 && sd.is_finite() {
        params.post_sd = sd;
    } else {
        params.degenerate = true;
    }
    let out = raw.iter().map(|r| (r - mean) / params.post_sd).collect();
    Ok((params, out))
}

/// Chooses `(γ, λ)` by maximizing the profile likelihood over the γ grid, with the
/// identity transform (the γ → ∞ member of the family) as a candidate.
fn fit_power(w: &[f64]) -> (f64, f64) {
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scale = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    if !(scale > 0.0) {
        scale = sorted[sorted.len() - 1] - sorted[0];
    }
    let eps = 1e-6 * scale;
    let fallback = (eps, 1.0);
    let mut best = (0.0, 1.0);
    let mut best_ll = profile_loglik(w, 0.0, 1.0);
    let fallback_ll = profile_loglik(w, fallback.0, fallback.1);
    if fallback_ll > best_ll {
        best = fallback;
        best_ll = fallback_ll;
    }
    for gamma in [eps, scale / 100.0, scale / 10.0, scale, 10.0 * scale] {
        let shifted = Shifted::new(w, gamma);
        if let Some((lambda, ll)) = best_lambda(&shifted) {
            if ll > best_ll {
                best = (gamma, lambda);
                best_ll = ll;
            }
        }
    }
    best
}

impl TransformParams {
    fn power(&self, x: f64) -> Result<f64> {
        let x = x.clamp(self.winsor_lo, self.winsor_hi);
        let y = if self.gamma > 0.0 {
            hawkins_map(x, self.gamma)
        } else {
            x
        };
        if self.lambda == 1.0 {
            return Ok(y - 1.0);
        }
        box_cox_core(y, self.lambda).map_err(|_| Error::OutsideRange { value: x })
    }

    /// Transforms a raw value (clipped to the winsor bounds) into standardized units.
    pub fn apply(&self, x: f64) -> Result<f64> {
        Ok((self.power(x)? - self.post_mean) / self.post_sd)
    }

    /// Maps a standardized value back to raw units.
    pub fn invert(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::OutsideRange { value: z });
        }
        let v = z * self.post_sd + self.post_mean;
        let y = if self.lambda == 1.0 {
            v + 1.0
        } else {
            box_cox_inverse(v, self.lambda).ok_or(Error::OutsideRange { value: z })?
        };
        if self.gamma > 0.0 {
            if !(y > 0.0) {
                return Err(Error::OutsideRange { value: z });
            }
            Ok(hawkins_inverse(y, self.gamma))
        } else {
            Ok(y)
        }
    }
}

pub fn apply_transform(params: &TransformParams, values: &[f64]) -> Result<Vec<f64>> {
    values.iter().map(|&v| params.apply(v)).collect()
}

pub fn invert_transform(params: &TransformParams, z: &[f64]) -> Result<Vec<f64>> {
    z.iter().map(|&v| params.invert(v)).collect()
}

/// Writes `predictor,yyyymm,winsor_lo,winsor_hi,gamma,lambda,post_mean,post_sd,n_obs,degenerate`.
pub fn write_params_csv<W: Write>(params: &[TransformParams], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in params {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params_csv<R: std::io::Read>(input: R) -> Result<Vec<TransformParams>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

/// A raw panel together with its per predictor-month transformed copy.
#[derive(Debug, Clone)]
pub struct TransformedPanel {
    pub raw: PredictorPanel,
    /// Same cells as `raw`, in standardized units.
    pub z: PredictorPanel,
    params: BTreeMap<(YearMonth, String), TransformParams>,
}

impl TransformedPanel {
    /// Fits every predictor-month independently, in parallel.
    pub fn fit(raw: PredictorPanel) -> Result<Self> {
        let jobs: Vec<(YearMonth, String)> = raw
            .months()
            .flat_map(|m| {
                raw.observed_counts(m)
                    .into_keys()
                    .map(move |p| (m, p.to_string()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let fitted: Vec<TransformParams> = jobs
            .par_iter()
            .map(|(m, p)| {
                let values: Vec<f64> = raw.column(*m, p).into_iter().map(|(_, v)| v).collect();
                fit_transform(p, *m, &values).map(|(params, _)| params)
            })
            .collect::<Result<_>>()?;
        let params: BTreeMap<(YearMonth, String), TransformParams> =
            jobs.into_iter().zip(fitted).collect();
        let mut failure = None;
        let z = raw.map_values(|m, p, _, v| {
            let t = &params[&(m, p.to_string())];
            match t.apply(v) {
                Ok(z) => Some(z),
                Err(e) => {
                    failure.get_or_insert(e);
                    None
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(TransformedPanel { raw, z, params })
    }

    pub fn params(&self, month: YearMonth, predictor: &str) -> Option<&TransformParams> {
        self.params.get(&(month, predictor.to_string()))
    }

    /// All fitted parameters in (month, predictor) order.
    pub fn all_params(&self) -> impl Iterator<Item = &TransformParams> {
        self.params.values()
    }
}
