//! Rolling out-of-sample return forecasts and decile long-short portfolios.
//!
//! Each imputed month is reduced once to sufficient statistics (row sums and cross
//! products of the predictors, and of predictors against next-month returns); every
//! window fit then only adds statistics.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imputers::ImputedCrossSection;
use crate::linalg::sorted_eigen;
use crate::month::YearMonth;
use crate::panel::PredictorPanel;

/// Relative ridge added to every normal-equation system.
pub const OLS_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecaster {
    SinglePredictor,
    Ols,
    Pcr,
    Spcr,
}

impl FromStr for Forecaster {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" | "single_predictor" => Forecaster::SinglePredictor,
            "ols" => Forecaster::Ols,
            "pcr" => Forecaster::Pcr,
            "spcr" => Forecaster::Spcr,
            other => return Err(Error::InvalidArgument(format!("unknown forecaster {other:?}"))),
        })
    }
}

impl fmt::Display for Forecaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Forecaster::SinglePredictor => "single",
            Forecaster::Ols => "ols",
            Forecaster::Pcr => "pcr",
            Forecaster::Spcr => "spcr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    Value,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" | "ew" => Ok(Weighting::Equal),
            "value" | "vw" => Ok(Weighting::Value),
            other => Err(Error::InvalidArgument(format!("unknown weighting {other:?}"))),
        }
    }
}

/// Whether a single-predictor sort uses imputed values or observed values only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Handling {
    Imputed,
    DropMissing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningSpec {
    pub grid: Vec<usize>,
    /// Calendar month (1–12) at which the model is re-tuned and refitted.
    pub month_of_year: u32,
    pub max_validation_months: usize,
}

impl Default for TuningSpec {
    fn default() -> Self {
        TuningSpec {
            grid: vec![10, 30, 50, 70, 90],
            month_of_year: 6,
            max_validation_months: 144,
        }
    }
}

/// One forecasting strategy. Imputation happens before the backtest, so the imputer
/// choice lives with the caller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySpec {
    pub forecaster: Forecaster,
    pub k: usize,
    pub window: usize,
    pub weighting: Weighting,
    pub tuning: Option<TuningSpec>,
}

impl StrategySpec {
    pub fn new(forecaster: Forecaster, k: usize) -> Self {
        StrategySpec {
            forecaster,
            k,
            window: 120,
            weighting: Weighting::Equal,
            tuning: None,
        }
    }

    pub fn name(&self) -> String {
        match (self.forecaster, &self.tuning) {
            (Forecaster::Pcr | Forecaster::Spcr, None) => format!("{}_k{}", self.forecaster, self.k),
            (f, Some(_)) => format!("{f}_tuned"),
            (f, None) => f.to_string(),
        }
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        if self.window < 24 {
            return Err(Error::InvalidArgument("window must be at least 24 months".into()));
        }
        if self.forecaster == Forecaster::SinglePredictor {
            return Err(Error::InvalidArgument(
                "single-predictor sorts run through single_predictor_strategy".into(),
            ));
        }
        if matches!(self.forecaster, Forecaster::Pcr | Forecaster::Spcr) && self.tuning.is_none() && (self.k == 0 || self.k > j) {
            return Err(Error::InvalidArgument(format!("K = {} must lie in 1..={j}", self.k)));
        }
        if let Some(t) = &self.tuning {
            if !(1..=12).contains(&t.month_of_year) || t.max_validation_months == 0 {
                return Err(Error::InvalidArgument("invalid tuning schedule".into()));
            }
            if matches!(self.forecaster, Forecaster::Pcr | Forecaster::Spcr) && !t.grid.iter().any(|&k| k >= 1 && k <= j) {
                return Err(Error::InvalidArgument("no grid value fits the predictor count".into()));
            }
        }
        Ok(())
    }
}

/// Imputed predictors of one month.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedMonth {
    pub month: YearMonth,
    pub stock_ids: Vec<String>,
    pub predictor_ids: Vec<String>,
    pub x: DMatrix<f64>,
    /// `true` where the value was observed rather than imputed.
    pub mask: DMatrix<bool>,
}

impl From<&ImputedCrossSection> for ImputedMonth {
    fn from(ic: &ImputedCrossSection) -> Self {
        ImputedMonth {
            month: ic.cs.month,
            stock_ids: ic.cs.stock_ids.clone(),
            predictor_ids: ic.cs.predictor_ids.clone(),
            x: ic.filled.clone(),
            mask: ic.cs.mask.clone(),
        }
    }
}

/// Sums over rows of `1`, `x`, `xxᵀ`, and (for return pairs) `x·r`, `r`, `r²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: f64,
    pub sx: DVector<f64>,
    pub sxx: DMatrix<f64>,
    pub sxr: DVector<f64>,
    pub sr: f64,
    pub srr: f64,
}

impl Moments {
    pub fn zeros(j: usize) -> Self {
        Moments {
            n: 0.0,
            sx: DVector::zeros(j),
            sxx: DMatrix::zeros(j, j),
            sxr: DVector::zeros(j),
            sr: 0.0,
            srr: 0.0,
        }
    }

    fn of_rows(x: &DMatrix<f64>, r: Option<&DVector<f64>>) -> Self {
        let j = x.ncols();
        let mut m = Moments::zeros(j);
        m.n = x.nrows() as f64;
        m.sx = x.row_sum().transpose();
        m.sxx = x.tr_mul(x);
        if let Some(r) = r {
            m.sxr = x.tr_mul(r);
            m.sr = r.sum();
            m.srr = r.norm_squared();
        }
        m
    }

    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.sx += &o.sx;
        self.sxx += &o.sxx;
        self.sxr += &o.sxr;
        self.sr += o.sr;
        self.srr += o.srr;
    }

    /// Covariance around the pooled mean.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.n < 2.0 {
            return Err(Error::InsufficientData("fewer than two rows in the window".into()));
        }
        let mean = &self.sx / self.n;
        Ok(&self.sxx / self.n - &mean * mean.transpose())
    }

    /// Univariate OLS slope (with intercept) of the return on each predictor.
    pub fn univariate_slopes(&self) -> Result<DVector<f64>> {
        let j = self.sx.len();
        let mut g = DVector::zeros(j);
        for c in 0..j {
            let var = self.sxx[(c, c)] - self.sx[c] * self.sx[c] / self.n;
            if !(var > 1e-12 * self.sxx[(c, c)].max(f64::MIN_POSITIVE)) {
                return Err(Error::InsufficientData(format!(
                    "predictor {c} has no variation in the window"
                )));
            }
            g[c] = (self.sxr[c] - self.sx[c] * self.sr / self.n) / var;
        }
        Ok(g)
    }

    fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.n.to_bits().hash(h);
        for v in self.sx.iter().chain(self.sxx.iter()).chain(self.sxr.iter()) {
            v.to_bits().hash(h);
        }
        self.sr.to_bits().hash(h);
        self.srr.to_bits().hash(h);
    }
}

/// Imputed months, their statistics and the market data needed to evaluate
/// portfolios.
#[derive(Debug, Clone)]
pub struct BacktestData {
    predictors: Vec<String>,
    months: BTreeMap<YearMonth, ImputedMonth>,
    cov: BTreeMap<YearMonth, Moments>,
    /// Keyed by the predictor month `s`; returns come from `s + 1`.
    pairs: BTreeMap<YearMonth, Moments>,
    /// `(month, stock) -> (return, cap)`
    market: HashMap<(YearMonth, String), (Option<f64>, Option<f64>)>,
}

impl BacktestData {
    /// All months must share one predictor list.
    pub fn new(months: Vec<ImputedMonth>, market: &PredictorPanel) -> Result<Self> {
        let Some(first) = months.first() else {
            return Err(Error::InsufficientData("no imputed months".into()));
        };
        let predictors = first.predictor_ids.clone();
        if months.iter().any(|m| m.predictor_ids != predictors) {
            return Err(Error::PredictorMismatch);
        }
        let mut store = BTreeMap::new();
        let mut market_map = HashMap::new();
        for m in months {
            for s in &m.stock_ids {
                for t in [m.month.prev(), m.month, m.month.next()] {
                    if let Some(rec) = market.market(s, t) {
                        market_map.insert((t, s.clone()), (rec.ret, rec.cap));
                    }
                }
            }
            store.insert(m.month, m);
        }
        let mut data = BacktestData {
            predictors,
            months: store,
            cov: BTreeMap::new(),
            pairs: BTreeMap::new(),
            market: market_map,
        };
        data.rebuild_stats();
        Ok(data)
    }

    fn rebuild_stats(&mut self) {
        let stats: Vec<(YearMonth, Moments, Moments)> = self
            .months
            .par_iter()
            .map(|(&month, m)| {
                let cov = Moments::of_rows(&m.x, None);
                let next = month.next();
                let rows: Vec<(usize, f64)> = m
                    .stock_ids
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| self.ret(s, next).map(|r| (i, r)))
                    .collect();
                let x = DMatrix::from_fn(rows.len(), m.x.ncols(), |r, c| m.x[(rows[r].0, c)]);
                let r = DVector::from_iterator(rows.len(), rows.iter().map(|p| p.1));
                (month, cov, Moments::of_rows(&x, Some(&r)))
            })
            .collect();
        self.cov.clear();
        self.pairs.clear();
        for (month, cov, pair) in stats {
            self.cov.insert(month, cov);
            if pair.n > 0.0 {
                self.pairs.insert(month, pair);
            }
        }
    }

    pub fn predictors(&self) -> &[String] {
        &self.predictors
    }

    pub fn month(&self, m: YearMonth) -> Option<&ImputedMonth> {
        self.months.get(&m)
    }

    pub fn months(&self) -> impl Iterator<Item = YearMonth> + '_ {
        self.months.keys().copied()
    }

    pub fn ret(&self, stock: &str, month: YearMonth) -> Option<f64> {
        self.market.get(&(month, stock.to_string())).and_then(|r| r.0)
    }

    pub fn cap(&self, stock: &str, month: YearMonth) -> Option<f64> {
        self.market.get(&(month, stock.to_string())).and_then(|r| r.1)
    }

    /// Replaces one month's predictors; statistics are recomputed.
    pub fn replace_month(&mut self, m: ImputedMonth) -> Result<()> {
        if m.predictor_ids != self.predictors {
            return Err(Error::PredictorMismatch);
        }
        self.months.insert(m.month, m);
        self.rebuild_stats();
        Ok(())
    }

    /// Overrides a stored return (used to audit look-ahead).
    pub fn set_return(&mut self, stock: &str, month: YearMonth, ret: f64) {
        self.market.entry((month, stock.to_string())).or_insert((None, None)).0 = Some(ret);
        self.rebuild_stats();
    }

    pub fn view(&self, cutoff: YearMonth) -> HistoryView<'_> {
        HistoryView { data: self, cutoff }
    }
}

/// Read access to everything dated on or before `cutoff`.
#[derive(Clone, Copy)]
pub struct HistoryView<'a> {
    data: &'a BacktestData,
    cutoff: YearMonth,
}

impl<'a> HistoryView<'a> {
    pub fn cutoff(&self) -> YearMonth {
        self.cutoff
    }

    fn look_ahead(&self, month: YearMonth) -> Error {
        Error::InvalidArgument(format!("{month} lies after the information cutoff {}", self.cutoff))
    }

    /// Predictor moments over months `[a, b]`.
    pub fn cov_moments(&self, a: YearMonth, b: YearMonth) -> Result<Moments> {
        if b > self.cutoff {
            return Err(self.look_ahead(b));
        }
        let mut m = Moments::zeros(self.data.predictors.len());
        for (_, s) in self.data.cov.range(a..=b) {
            m.add(s);
        }
        Ok(m)
    }

    /// Return-pair moments over predictor months `[a, b]`; the returns are dated one
    /// month later.
    pub fn pair_moments(&self, a: YearMonth, b: YearMonth) -> Result<Moments> {
        if b.next() > self.cutoff {
            return Err(self.look_ahead(b.next()));
        }
        let mut m = Moments::zeros(self.data.predictors.len());
        for (_, s) in self.data.pairs.range(a..=b) {
            m.add(s);
        }
        Ok(m)
    }

    /// Predictor months with a return pair whose return is known by the cutoff.
    pub fn pair_months(&self) -> Vec<YearMonth> {
        self.data
            .pairs
            .range(..self.cutoff)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn first_month(&self) -> Option<YearMonth> {
        self.data.cov.keys().next().copied().filter(|m| *m <= self.cutoff)
    }

    /// The latest predictors, used to forecast the month after the cutoff.
    pub fn latest(&self) -> Option<&'a ImputedMonth> {
        self.data.months.get(&self.cutoff)
    }

    /// Hash of everything the view exposes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (m, s) in self.data.cov.range(..=self.cutoff) {
            m.hash(&mut h);
            s.fingerprint(&mut h);
        }
        for (m, s) in self.data.pairs.range(..self.cutoff) {
            m.hash(&mut h);
            s.fingerprint(&mut h);
        }
        if let Some(x) = self.latest() {
            x.stock_ids.hash(&mut h);
            for v in x.x.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// `forecast = a + x·L·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub loadings: DMatrix<f64>,
    /// Intercept first.
    pub coef: DVector<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let b = self.coef.rows(1, self.coef.len() - 1);
        (x * &self.loadings) * b + DVector::from_element(x.nrows(), self.coef[0])
    }

    /// Normal-equation blocks `(ZᵀZ, Zᵀr)` for `Z = [1, X·L]`.
    fn design(&self, p: &Moments) -> (DMatrix<f64>, DVector<f64>) {
        design(&self.loadings, p)
    }

    /// Root mean squared prediction error over the pairs summarised by `p`.
    pub fn rmse(&self, p: &Moments) -> f64 {
        let (g, zr) = self.design(p);
        let sse = p.srr - 2.0 * self.coef.dot(&zr) + (self.coef.transpose() * g * &self.coef)[0];
        (sse.max(0.0) / p.n).sqrt()
    }
}

fn design(l: &DMatrix<f64>, p: &Moments) -> (DMatrix<f64>, DVector<f64>) {
    let k = l.ncols();
    let mut g = DMatrix::zeros(k + 1, k + 1);
    g[(0, 0)] = p.n;
    let lx = l.tr_mul(&p.sx);
    let lxxl = l.tr_mul(&p.sxx) * l;
    for a in 0..k {
        g[(0, a + 1)] = lx[a];
        g[(a + 1, 0)] = lx[a];
        for b in 0..k {
            g[(a + 1, b + 1)] = lxxl[(a, b)];
        }
    }
    let mut zr = DVector::zeros(k + 1);
    zr[0] = p.sr;
    zr.rows_mut(1, k).copy_from(&l.tr_mul(&p.sxr));
    (g, zr)
}

fn leading_vectors(cov: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sorted_eigen(cov);
    if k == 0 || k > vals.len() {
        return Err(Error::InvalidArgument(format!("K = {k} out of range")));
    }
    if !(vals[k - 1] > 1e-12 * vals[0].abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::InsufficientData(format!(
            "window has fewer than {k} effective dimensions"
        )));
    }
    Ok(vecs.columns(0, k).into_owned())
}

/// Fits one linear forecaster from window statistics: `cov` for the components,
/// `pairs` for the regression.
pub fn fit_linear(forecaster: Forecaster, k: usize, cov: &Moments, pairs: &Moments) -> Result<LinearModel> {
    let j = cov.sx.len();
    let loadings = match forecaster {
        Forecaster::Ols => DMatrix::identity(j, j),
        Forecaster::Pcr => leading_vectors(&cov.covariance()?, k)?,
        Forecaster::Spcr => {
            let gamma = pairs.univariate_slopes()?;
            if gamma.iter().all(|g| *g == 0.0) {
                return Err(Error::InsufficientData("every scaling slope is zero".into()));
            }
            let g = DMatrix::from_diagonal(&gamma);
            let scaled = &g * cov.covariance()? * &g;
            &g * leading_vectors(&scaled, k)?
        }
        Forecaster::SinglePredictor => {
            return Err(Error::InvalidArgument("single-predictor sorts have no linear fit".into()))
        }
    };
    if pairs.n < (loadings.ncols() + 1) as f64 {
        return Err(Error::InsufficientData("fewer return pairs than regressors".into()));
    }
    let (mut g, zr) = design(&loadings, pairs);
    let dim = g.nrows();
    let ridge = OLS_RIDGE * g.trace() / dim as f64;
    for d in 0..dim {
        g[(d, d)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(g)
        .ok_or_else(|| Error::Singular("regression design is rank deficient".into()))?;
    let coef = chol.solve(&zr);
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("regression produced non-finite coefficients".into()));
    }
    Ok(LinearModel { loadings, coef })
}

/// Forecasts for the month after the view's cutoff, fitted on the trailing `window`
/// months: components from predictor months `[T−W, T−1]`, regression on pairs with
/// predictor months `[T−W, T−2]`.
pub fn window_forecast(
    view: &HistoryView<'_>,
    forecaster: Forecaster,
    k: usize,
    window: usize,
) -> Result<Vec<(String, f64)>> {
    let model = fit_window(view, forecaster, k, window)?;
    let latest = view
        .latest()
        .ok_or_else(|| Error::InsufficientData(format!("no predictors for {}", view.cutoff())))?;
    let f = model.predict(&latest.x);
    Ok(latest.stock_ids.iter().cloned().zip(f.iter().copied()).collect())
}

fn fit_window(view: &HistoryView<'_>, forecaster: Forecaster, k: usize, window: usize) -> Result<LinearModel> {
    let t_minus_1 = view.cutoff();
    let start = t_minus_1.add_months(1 - window as i64);
    if view.first_month().is_none_or(|f| f > start) {
        return Err(Error::InsufficientData(format!(
            "a {window}-month window ending {t_minus_1} is not covered"
        )));
    }
    let cov = view.cov_moments(start, t_minus_1)?;
    let pairs = view.pair_moments(start, t_minus_1.prev())?;
    fit_linear(forecaster, k, &cov, &pairs)
}

pub fn pcr_forecast(view: &HistoryView<'_>, k: usize, window: usize) -> Result<Vec<(String, f64)>> {
    window_forecast(view, Forecaster::Pcr, k, window)
}

pub fn spcr_forecast(view: &HistoryView<'_>, k: usize, window: usize) -> Result<Vec<(String, f64)>> {
    window_forecast(view, Forecaster::Spcr, k, window)
}

pub fn ols_forecast(view: &HistoryView<'_>, window: usize) -> Result<Vec<(String, f64)>> {
    window_forecast(view, Forecaster::Ols, 0, window)
}

/// Long-minus-short return of one month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PortfolioMonth {
    pub ls_ret: f64,
    pub n_long: usize,
    pub n_short: usize,
}

/// Top-decile minus bottom-decile return. Stocks are ordered by `(forecast, stock id)`
/// and each leg holds `⌊n/10⌋` stocks. Value weights use `caps`.
pub fn decile_portfolio(
    forecasts: &[(String, f64)],
    returns: &HashMap<String, f64>,
    caps: &HashMap<String, f64>,
    weighting: Weighting,
) -> Result<PortfolioMonth> {
    let mut rows: Vec<(&str, f64, f64)> = forecasts
        .iter()
        .filter_map(|(s, f)| {
            let r = *returns.get(s)?;
            if weighting == Weighting::Value && !caps.get(s).is_some_and(|c| *c > 0.0) {
                return None;
            }
            Some((s.as_str(), *f, r))
        })
        .collect();
    if rows.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "{} stocks with forecasts and returns; need 10",
            rows.len()
        )));
    }
    if rows.iter().all(|r| r.1 == rows[0].1) {
        return Err(Error::DegenerateSort);
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let leg = rows.len() / 10;
    let short = &rows[..leg];
    let long = &rows[rows.len() - leg..];
    let leg_ret = |members: &[(&str, f64, f64)]| match weighting {
        Weighting::Equal => members.iter().map(|m| m.2).sum::<f64>() / members.len() as f64,
        Weighting::Value => {
            let total: f64 = members.iter().map(|m| caps[m.0]).sum();
            members.iter().map(|m| caps[m.0] / total * m.2).sum()
        }
    };
    Ok(PortfolioMonth {
        ls_ret: leg_ret(long) - leg_ret(short),
        n_long: leg,
        n_short: leg,
    })
}

/// Monthly long-short returns of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioSeries {
    pub strategy: String,
    pub weighting: Weighting,
    pub months: Vec<YearMonth>,
    pub returns: Vec<f64>,
    pub n_long: Vec<usize>,
    pub n_short: Vec<usize>,
    /// Months without a portfolio and why.
    pub skipped: Vec<(YearMonth, String)>,
    /// Fingerprint of the information each month's forecast could see.
    pub audit: Vec<(YearMonth, u64)>,
}

impl PortfolioSeries {
    fn new(strategy: String, weighting: Weighting) -> Self {
        PortfolioSeries {
            strategy,
            weighting,
            months: vec![],
            returns: vec![],
            n_long: vec![],
            n_short: vec![],
            skipped: vec![],
            audit: vec![],
        }
    }

    fn push(&mut self, month: YearMonth, p: PortfolioMonth) {
        self.months.push(month);
        self.returns.push(p.ls_ret);
        self.n_long.push(p.n_long);
        self.n_short.push(p.n_short);
    }

    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Sample standard deviation of monthly returns.
    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let n = self.returns.len() as f64;
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    /// `12 × mean`, in percent.
    pub fn annualized_mean(&self) -> f64 {
        1200.0 * self.mean()
    }

    /// `mean / sd × √12`.
    pub fn annualized_sharpe(&self) -> f64 {
        self.mean() / self.sd() * 12f64.sqrt()
    }

    /// t-statistic of the monthly mean.
    pub fn t_stat(&self) -> f64 {
        self.mean() / (self.sd() / (self.returns.len() as f64).sqrt())
    }

    /// `yyyymm,ls_ret,n_long,n_short`
    pub fn write_returns_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["yyyymm", "ls_ret", "n_long", "n_short"])?;
        for i in 0..self.months.len() {
            w.write_record([
                self.months[i].to_string(),
                self.returns[i].to_string(),
                self.n_long[i].to_string(),
                self.n_short[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `strategy,weighting,months,mean_ann_pct,sharpe_ann`
pub fn write_summary_csv<W: Write>(series: &[PortfolioSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "weighting", "months", "mean_ann_pct", "sharpe_ann"])?;
    for s in series {
        let weighting = match s.weighting {
            Weighting::Equal => "equal",
            Weighting::Value => "value",
        };
        w.write_record([
            s.strategy.clone(),
            weighting.to_string(),
            s.months.len().to_string(),
            s.annualized_mean().to_string(),
            s.annualized_sharpe().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one tuning date.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningRecord {
    pub date: YearMonth,
    pub selected_k: usize,
    pub validation_rmse: Vec<(usize, f64)>,
}

/// `date,selected_k,k,validation_rmse`, one line per grid value.
pub fn write_tuning_csv<W: Write>(records: &[TuningRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "selected_k", "k", "validation_rmse"])?;
    for r in records {
        for (k, e) in &r.validation_rmse {
            w.write_record([r.date.to_string(), r.selected_k.to_string(), k.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Chooses `K` on a train/validation split of the history and refits on all of it.
///
/// The validation sample is the later `min(⌊M/2⌋, max_validation_months)` of the `M`
/// months with return pairs.
pub fn tune_and_fit(
    view: &HistoryView<'_>,
    forecaster: Forecaster,
    tuning: &TuningSpec,
) -> Result<(LinearModel, TuningRecord)> {
    let pair_months = view.pair_months();
    let first = view
        .first_month()
        .ok_or_else(|| Error::InsufficientData("empty history".into()))?;
    let m = pair_months.len();
    let n_val = (m / 2).min(tuning.max_validation_months);
    if n_val == 0 || m - n_val == 0 {
        return Err(Error::InsufficientData(format!(
            "tuning at {} needs at least two months of return history",
            view.cutoff().next()
        )));
    }
    let last_train = pair_months[m - n_val - 1];
    let first_val = pair_months[m - n_val];
    let train_cov = view.cov_moments(first, last_train)?;
    let train_pairs = view.pair_moments(first, last_train)?;
    let val_pairs = view.pair_moments(first_val, pair_months[m - 1])?;
    let j = train_cov.sx.len();
    let grid: Vec<usize> = match forecaster {
        Forecaster::Ols => vec![j],
        _ => tuning.grid.iter().copied().filter(|&k| k >= 1 && k <= j).collect(),
    };
    let mut scores = Vec::new();
    for &k in &grid {
        match fit_linear(forecaster, k, &train_cov, &train_pairs) {
            Ok(model) => scores.push((k, model.rmse(&val_pairs))),
            Err(e) => log::debug!("K = {k} skipped at {}: {e}", view.cutoff()),
        }
    }
    let best = scores
        .iter()
        .filter(|s| s.1.is_finite())
        .fold(None::<(usize, f64)>, |acc, &(k, e)| match acc {
            Some((bk, be)) if be < e || (be == e && bk < k) => Some((bk, be)),
            _ => Some((k, e)),
        })
        .ok_or_else(|| Error::InsufficientData("no grid value could be fitted".into()))?;
    let full_cov = view.cov_moments(first, view.cutoff())?;
    let full_pairs = view.pair_moments(first, pair_months[m - 1])?;
    let model = fit_linear(forecaster, best.0, &full_cov, &full_pairs)?;
    Ok((
        model,
        TuningRecord {
            date: view.cutoff().next(),
            selected_k: best.0,
            validation_rmse: scores,
        },
    ))
}

fn evaluate(
    data: &BacktestData,
    month: YearMonth,
    forecasts: &[(String, f64)],
    weighting: Weighting,
) -> Result<PortfolioMonth> {
    let mut returns = HashMap::new();
    let mut caps = HashMap::new();
    for (s, _) in forecasts {
        if let Some(r) = data.ret(s, month) {
            returns.insert(s.clone(), r);
        }
        if let Some(c) = data.cap(s, month.prev()) {
            caps.insert(s.clone(), c);
        }
    }
    decile_portfolio(forecasts, &returns, &caps, weighting)
}

/// Output of [`rolling_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RollingResult {
    pub series: PortfolioSeries,
    pub tuning: Vec<TuningRecord>,
}

/// Forms a portfolio in every month of `[start, end]` from forecasts that only see
/// data dated up to the previous month.
///
/// Without tuning the model is refitted each month on the trailing window. With
/// tuning it is re-tuned and refitted on the full history at the first month and at
/// each tuning month, then held until the next one.
pub fn rolling_run(
    spec: &StrategySpec,
    data: &BacktestData,
    start: YearMonth,
    end: YearMonth,
) -> Result<RollingResult> {
    spec.validate(data.predictors().len())?;
    if end < start {
        return Err(Error::InvalidArgument(format!("empty range {start}:{end}")));
    }
    let months: Vec<YearMonth> = YearMonth::range_inclusive(start, end).collect();
    let mut records = Vec::new();
    let models: Vec<Result<LinearModel>> = match &spec.tuning {
        None => months
            .par_iter()
            .map(|t| fit_window(&data.view(t.prev()), spec.forecaster, spec.k, spec.window))
            .collect(),
        Some(tuning) => {
            let dates: Vec<YearMonth> = months
                .iter()
                .copied()
                .filter(|t| *t == start || t.month() == tuning.month_of_year)
                .collect();
            let fitted: Vec<(LinearModel, TuningRecord)> = dates
                .par_iter()
                .map(|t| tune_and_fit(&data.view(t.prev()), spec.forecaster, tuning))
                .collect::<Result<_>>()?;
            let mut out = Vec::with_capacity(months.len());
            let mut current = 0;
            for t in &months {
                if current + 1 < dates.len() && *t >= dates[current + 1] {
                    current += 1;
                }
                out.push(Ok(fitted[current].0.clone()));
            }
            records = fitted.into_iter().map(|f| f.1).collect();
            out
        }
    };
    let mut series = PortfolioSeries::new(spec.name(), spec.weighting);
    for (t, model) in months.iter().zip(models) {
        let view = data.view(t.prev());
        let model = model?;
        let Some(latest) = view.latest() else {
            series.skipped.push((*t, "no predictors in the previous month".into()));
            continue;
        };
        series.audit.push((*t, view.fingerprint()));
        let f = model.predict(&latest.x);
        let forecasts: Vec<(String, f64)> = latest.stock_ids.iter().cloned().zip(f.iter().copied()).collect();
        match evaluate(data, *t, &forecasts, spec.weighting) {
            Ok(p) => series.push(*t, p),
            Err(e) => {
                log::info!("{}: {t} skipped: {e}", spec.name());
                series.skipped.push((*t, e.to_string()));
            }
        }
    }
    if series.months.is_empty() {
        return Err(Error::InsufficientData("no month produced a portfolio".into()));
    }
    Ok(RollingResult { series, tuning: records })
}

/// Settings of the one-predictor sort.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleSpec {
    pub predictor: String,
    pub handling: Handling,
    pub leg_size: usize,
    /// Months whose predictor has fewer observations are skipped.
    pub min_obs: usize,
    pub weighting: Weighting,
}

impl SingleSpec {
    pub fn new(predictor: &str) -> Self {
        SingleSpec {
            predictor: predictor.to_string(),
            handling: Handling::Imputed,
            leg_size: 500,
            min_obs: 1000,
            weighting: Weighting::Equal,
        }
    }
}

/// Long the `leg_size` stocks with the highest previous-month predictor value and short
/// the `leg_size` lowest; legs shrink to half the sample when it is small.
pub fn single_predictor_strategy(
    spec: &SingleSpec,
    data: &BacktestData,
    start: YearMonth,
    end: YearMonth,
) -> Result<PortfolioSeries> {
    let col = data
        .predictors()
        .iter()
        .position(|p| *p == spec.predictor)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown predictor {}", spec.predictor)))?;
    if spec.leg_size == 0 {
        return Err(Error::InvalidArgument("leg size must be positive".into()));
    }
    let name = match spec.handling {
        Handling::Imputed => format!("single_{}_imputed", spec.predictor),
        Handling::DropMissing => format!("single_{}_observed", spec.predictor),
    };
    let mut series = PortfolioSeries::new(name, spec.weighting);
    for t in YearMonth::range_inclusive(start, end) {
        let Some(m) = data.month(t.prev()) else {
            series.skipped.push((t, "no predictors in the previous month".into()));
            continue;
        };
        let observed = (0..m.x.nrows()).filter(|&i| m.mask[(i, col)]).count();
        if observed < spec.min_obs {
            series.skipped.push((t, format!("{observed} observations < {}", spec.min_obs)));
            continue;
        }
        let mut rows: Vec<(&str, f64, f64)> = (0..m.x.nrows())
            .filter(|&i| spec.handling == Handling::Imputed || m.mask[(i, col)])
            .filter_map(|i| {
                let s = m.stock_ids[i].as_str();
                let r = data.ret(s, t)?;
                if spec.weighting == Weighting::Value && !data.cap(s, t.prev()).is_some_and(|c| c > 0.0) {
                    return None;
                }
                Some((s, m.x[(i, col)], r))
            })
            .collect();
        if rows.len() < 2 {
            series.skipped.push((t, "fewer than two stocks".into()));
            continue;
        }
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        let leg = spec.leg_size.min(rows.len() / 2);
        let leg_ret = |members: &[(&str, f64, f64)]| match spec.weighting {
            Weighting::Equal => members.iter().map(|m| m.2).sum::<f64>() / members.len() as f64,
            Weighting::Value => {
                let caps: Vec<f64> = members.iter().map(|m| data.cap(m.0, t.prev()).unwrap()).collect();
                let total: f64 = caps.iter().sum();
                members.iter().zip(&caps).map(|(m, c)| c / total * m.2).sum()
            }
        };
        let p = PortfolioMonth {
            ls_ret: leg_ret(&rows[rows.len() - leg..]) - leg_ret(&rows[..leg]),
            n_long: leg,
            n_short: leg,
        };
        series.push(t, p);
    }
    if series.months.is_empty() {
        return Err(Error::InsufficientData("no month qualified".into()));
    }
    Ok(series)
}
