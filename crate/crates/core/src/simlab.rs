//! Random correlation matrices, the dimensionality/imputation-slope experiment and a
//! synthetic panel generator.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{quantiles, sorted_eigen};
use crate::month::YearMonth;
use crate::panel::{PanelBuilder, PredictorPanel};
use crate::spectral::{imputation_slopes, pca_spectrum, write_quantiles_csv, SUMMARY_PROBS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub j: usize,
    pub beta_shape: f64,
    /// Probability that a cell is missing.
    pub miss_prob: f64,
    pub n_sims: usize,
    /// Simulated mask rows per matrix.
    pub rows: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(beta_shape: f64) -> Self {
        SimConfig {
            j: 125,
            beta_shape,
            miss_prob: 2.0 / 3.0,
            n_sims: 20,
            rows: 1000,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::InvalidArgument("dimension must be at least 2".into()));
        }
        if !(self.beta_shape > 0.0) || !self.beta_shape.is_finite() {
            return Err(Error::InvalidArgument("beta shape must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.miss_prob) {
            return Err(Error::InvalidArgument("missing probability must lie in [0, 1)".into()));
        }
        if self.n_sims == 0 || self.rows == 0 {
            return Err(Error::InvalidArgument("need at least one simulation and one row".into()));
        }
        Ok(())
    }
}

/// Correlation matrix from a C-vine of partial correlations `2·Beta(s, s) − 1`.
pub fn random_corr<R: Rng + ?Sized>(j: usize, beta_shape: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if j < 2 {
        return Err(Error::InvalidArgument("dimension must be at least 2".into()));
    }
    let beta = Beta::new(beta_shape, beta_shape)
        .map_err(|e| Error::InvalidArgument(format!("beta shape {beta_shape}: {e}")))?;
    // partial[(k, i)]: correlation of k and i given 0..k.
    let mut partial = DMatrix::zeros(j, j);
    let mut corr = DMatrix::identity(j, j);
    for k in 0..j - 1 {
        for i in (k + 1)..j {
            let p0 = 2.0 * beta.sample(rng) - 1.0;
            partial[(k, i)] = p0;
            let mut p = p0;
            for l in (0..k).rev() {
                let (a, b) = (partial[(l, i)], partial[(l, k)]);
                p = p * ((1.0 - a * a) * (1.0 - b * b)).sqrt() + a * b;
            }
            corr[(k, i)] = p;
            corr[(i, k)] = p;
        }
    }
    Ok(corr)
}

/// Averages over simulations of the experiment's three outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimReport {
    pub config: SimConfig,
    /// Off-diagonal correlation quantiles at [`SUMMARY_PROBS`].
    pub corr_quantiles: Vec<f64>,
    /// Cumulative variance share of the first `k + 1` components.
    pub variance_share: Vec<f64>,
    /// Slope quantiles at [`SUMMARY_PROBS`].
    pub slope_quantiles: Vec<f64>,
    pub mean_abs_slope: f64,
    pub mean_abs_slope_by_sim: Vec<f64>,
    pub min_eigenvalue_by_sim: Vec<f64>,
}

struct SimOutcome {
    corr_q: Vec<f64>,
    share: Vec<f64>,
    slope_q: Vec<f64>,
    mean_abs: f64,
    min_eig: f64,
}

fn one_sim(cfg: &SimConfig, sim: usize) -> Result<SimOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(sim as u64));
    let sigma = random_corr(cfg.j, cfg.beta_shape, &mut rng)?;
    let spectrum = pca_spectrum(&sigma)?;
    let mask = DMatrix::from_fn(cfg.rows, cfg.j, |_, _| rng.random::<f64>() >= cfg.miss_prob);
    let slopes = imputation_slopes(&sigma, &mask)?;
    let off: Vec<f64> = (0..cfg.j)
        .flat_map(|a| ((a + 1)..cfg.j).map(move |b| (a, b)))
        .map(|(a, b)| sigma[(a, b)])
        .collect();
    Ok(SimOutcome {
        corr_q: quantiles(&off, &SUMMARY_PROBS),
        share: spectrum.variance_share,
        slope_q: slopes.quantiles,
        mean_abs: slopes.mean_abs,
        min_eig: spectrum.eigenvalues[cfg.j - 1],
    })
}

fn average(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect()
}

/// Draws `n_sims` correlation matrices and reports their spectra and the imputation
/// slopes implied by random masks, evaluated at the true matrix.
pub fn run_dim_experiment(cfg: &SimConfig) -> Result<DimReport> {
    cfg.validate()?;
    let sims: Vec<SimOutcome> = (0..cfg.n_sims)
        .into_par_iter()
        .map(|s| one_sim(cfg, s))
        .collect::<Result<_>>()?;
    let corr: Vec<&[f64]> = sims.iter().map(|s| s.corr_q.as_slice()).collect();
    let share: Vec<&[f64]> = sims.iter().map(|s| s.share.as_slice()).collect();
    let slope: Vec<&[f64]> = sims.iter().map(|s| s.slope_q.as_slice()).collect();
    let by_sim: Vec<f64> = sims.iter().map(|s| s.mean_abs).collect();
    Ok(DimReport {
        config: cfg.clone(),
        corr_quantiles: average(&corr),
        variance_share: average(&share),
        slope_quantiles: average(&slope),
        mean_abs_slope: by_sim.iter().sum::<f64>() / by_sim.len() as f64,
        mean_abs_slope_by_sim: by_sim,
        min_eigenvalue_by_sim: sims.iter().map(|s| s.min_eig).collect(),
    })
}

impl DimReport {
    pub fn write_corr_quantiles_csv<W: Write>(&self, out: W) -> Result<()> {
        write_quantiles_csv(&SUMMARY_PROBS, &self.corr_quantiles, out)
    }

    pub fn write_slope_quantiles_csv<W: Write>(&self, out: W) -> Result<()> {
        write_quantiles_csv(&SUMMARY_PROBS, &self.slope_quantiles, out)
    }

    /// `k,cum_share`
    pub fn write_variance_share_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "cum_share"])?;
        for (k, v) in self.variance_share.iter().enumerate() {
            w.write_record([(k + 1).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings for [`synth_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub months: usize,
    pub start: YearMonth,
    pub sigma: DMatrix<f64>,
    /// Return loading on the previous month's predictors.
    pub beta: Option<DVector<f64>>,
    pub noise_sd: f64,
    /// AR1 coefficient of each stock's predictor vector.
    pub persistence: f64,
    /// Probability that a predictor cell is missing.
    pub miss_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(sigma: DMatrix<f64>, n: usize, months: usize) -> Self {
        SynthConfig {
            n,
            months,
            start: YearMonth::new(2000, 1).expect("valid month"),
            sigma,
            beta: None,
            noise_sd: 0.1,
            persistence: 0.0,
            miss_prob: 0.0,
            seed: 0,
        }
    }
}

/// Loading vector `Σ_k c_k v_k` placing return signal on chosen principal components
/// (`pcs[k]` is a zero-based component index).
pub fn signal_on_pcs(sigma: &DMatrix<f64>, pcs: &[(usize, f64)]) -> Result<DVector<f64>> {
    let (_, vecs) = sorted_eigen(sigma);
    let mut beta = DVector::zeros(sigma.nrows());
    for &(k, c) in pcs {
        if k >= sigma.nrows() {
            return Err(Error::InvalidArgument(format!("component {k} out of range")));
        }
        beta += vecs.column(k) * c;
    }
    Ok(beta)
}

fn psd_root(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let j = sigma.nrows();
    if !sigma.is_square() || j == 0 {
        return Err(Error::InvalidArgument("covariance must be square".into()));
    }
    let (vals, vecs) = sorted_eigen(sigma);
    if vals[j - 1] < -1e-10 * vals[0].abs().max(1.0) {
        return Err(Error::InvalidArgument("covariance is not positive semidefinite".into()));
    }
    let root = DVector::from_fn(j, |k, _| vals[k].max(0.0).sqrt());
    Ok(vecs * DMatrix::from_diagonal(&root))
}

pub fn stock_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn predictor_id(j: usize) -> String {
    format!("p{j:03}")
}

/// Panel with `X_t ~ MVN(0, Σ)` per stock (AR1 across months when `persistence > 0`),
/// returns `r_t = X_{t−1}·β + ε` and log-normal market caps. Returns are recorded from
/// the second month on.
pub fn synth_panel(cfg: &SynthConfig) -> Result<PredictorPanel> {
    let j = cfg.sigma.nrows();
    let root = psd_root(&cfg.sigma)?;
    if let Some(b) = &cfg.beta {
        if b.len() != j {
            return Err(Error::InvalidArgument("signal length differs from predictor count".into()));
        }
    }
    if !(0.0..1.0).contains(&cfg.persistence.abs()) || !(0.0..1.0).contains(&cfg.miss_prob) {
        return Err(Error::InvalidArgument("persistence and missing share must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let preds: Vec<String> = (0..j).map(predictor_id).collect();
    let stocks: Vec<String> = (0..cfg.n).map(stock_id).collect();
    let base_cap: Vec<f64> = (0..cfg.n)
        .map(|_| 5.0 + 1.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let innovation = (1.0 - cfg.persistence * cfg.persistence).sqrt();
    let mut b = PanelBuilder::new();
    let mut x = DMatrix::<f64>::zeros(cfg.n, j);
    for t in 0..cfg.months {
        let month = cfg.start.add_months(t as i64);
        let z = DMatrix::from_fn(cfg.n, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fresh = z * root.transpose();
        let prev = x.clone();
        x = if t == 0 {
            fresh
        } else {
            prev.clone() * cfg.persistence + fresh * innovation
        };
        for i in 0..cfg.n {
            let ret = if t == 0 {
                None
            } else {
                let signal = cfg.beta.as_ref().map_or(0.0, |beta| prev.row(i).dot(&beta.transpose()));
                Some(signal + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal))
            };
            let cap = (base_cap[i] + 0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
            b.add_market(&stocks[i], month, ret, Some(cap))?;
            for c in 0..j {
                if cfg.miss_prob == 0.0 || rng.random::<f64>() >= cfg.miss_prob {
                    b.add_observation(&stocks[i], month, &preds[c], x[(i, c)])?;
                }
            }
        }
    }
    Ok(b.build())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    #[test]
    fn two_by_two_is_the_partial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_corr(2, 2.0, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 2.0 * Beta::new(2.0, 2.0).unwrap().sample(&mut rng) - 1.0;
        assert_eq!(c[(0, 1)], p);
        assert!(p.abs() < 1.0);
    }

    #[test]
    fn large_shape_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_corr(25, 500.0, &mut rng).unwrap();
        let off = max_abs(&(&c - DMatrix::identity(25, 25)));
        assert!(off < 0.15, "{off}");
    }

    #[test]
    fn outputs_are_correlation_matrices() {
        for (seed, shape) in [(1u64, 1.2), (2, 4.0), (3, 15.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_corr(30, shape, &mut rng).unwrap();
            assert_eq!(c, c.transpose());
            assert!(c.diagonal().iter().all(|&d| d == 1.0));
            let (vals, _) = sorted_eigen(&c);
            assert!(vals[29] > 0.0);
        }
    }

    #[test]
    fn experiment_orders_shapes() {
        let run = |shape: f64| {
            let mut cfg = SimConfig::new(shape);
            cfg.j = 30;
            cfg.n_sims = 3;
            cfg.rows = 100;
            run_dim_experiment(&cfg).unwrap()
        };
        let (a, b, c) = (run(1.2), run(4.0), run(15.0));
        assert!(a.mean_abs_slope > b.mean_abs_slope && b.mean_abs_slope > c.mean_abs_slope);
        for k in 0..29 {
            assert!(c.variance_share[k] <= a.variance_share[k] + 1e-12);
        }
        assert!((a.variance_share[29] - 1.0).abs() < 1e-10);
        assert_eq!(run(4.0), b);
    }

    #[test]
    fn report_files() {
        let mut cfg = SimConfig::new(4.0);
        cfg.j = 5;
        cfg.n_sims = 2;
        cfg.rows = 10;
        let r = run_dim_experiment(&cfg).unwrap();
        let mut buf = Vec::new();
        r.write_variance_share_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("k,cum_share\n1,"));
        assert!(serde_json::to_value(&r).unwrap()["mean_abs_slope"].is_number());
        cfg.miss_prob = 1.0;
        assert!(run_dim_experiment(&cfg).is_err());
    }

    #[test]
    fn synthetic_panel_shape_and_determinism() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let mut cfg = SynthConfig::new(sigma, 30, 4);
        cfg.beta = Some(DVector::from_vec(vec![0.01, 0.0]));
        cfg.miss_prob = 0.2;
        cfg.seed = 9;
        let a = synth_panel(&cfg).unwrap();
        let b = synth_panel(&cfg).unwrap();
        assert_eq!(a.n_observations(), b.n_observations());
        let m1 = cfg.start.next();
        assert_eq!(a.ret("s00003", m1), b.ret("s00003", m1));
        assert_eq!(a.ret("s00003", cfg.start), None);
        assert!(a.cap("s00003", cfg.start).unwrap() > 0.0);
        let total = 30 * 4 * 2;
        assert!(a.n_observations() < total && a.n_observations() > total / 2);
        let bad = SynthConfig::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 3, 2);
        assert!(synth_panel(&bad).is_err());
    }

    #[test]
    fn returns_follow_lagged_signal() {
        let mut cfg = SynthConfig::new(DMatrix::identity(1, 1), 200, 3);
        cfg.beta = Some(DVector::from_vec(vec![1.0]));
        cfg.noise_sd = 0.0;
        let p = synth_panel(&cfg).unwrap();
        let m0 = cfg.start;
        for i in [0, 7, 150] {
            let s = stock_id(i);
            let x = p.value(&s, m0, "p000").unwrap();
            assert_eq!(p.ret(&s, m0.next()).unwrap(), x);
        }
    }

    #[test]
    fn pc_signal_is_eigenvector() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let b = signal_on_pcs(&sigma, &[(1, 0.5)]).unwrap();
        assert_eq!(b, DVector::from_vec(vec![0.0, 0.5, 0.0]));
    }
}
