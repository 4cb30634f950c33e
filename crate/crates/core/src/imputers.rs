//! The six imputation methods behind one interface.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, impute_em, CovModel, EmConfig};
use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, ridge_cholesky, sorted_eigen};
use crate::month::YearMonth;
use crate::panel::CrossSection;
use crate::transform::TransformedPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SimpleMean,
    GroupMean,
    LastObserved,
    MvnEm,
    Ar1Em,
    PpcaEm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SimpleMean,
        Method::GroupMean,
        Method::LastObserved,
        Method::MvnEm,
        Method::Ar1Em,
        Method::PpcaEm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SimpleMean => "simple_mean",
            Method::GroupMean => "group_mean",
            Method::LastObserved => "last_observed",
            Method::MvnEm => "mvn_em",
            Method::Ar1Em => "ar1_em",
            Method::PpcaEm => "ppca_em",
        }
    }

    /// Whether the method fits a covariance model that can be exported.
    pub fn has_cov_model(self) -> bool {
        matches!(self, Method::MvnEm | Method::Ar1Em)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts both the long names and the short CLI names.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simple_mean" | "mean" => Method::SimpleMean,
            "group_mean" | "group" => Method::GroupMean,
            "last_observed" | "last" => Method::LastObserved,
            "mvn_em" | "em" => Method::MvnEm,
            "ar1_em" | "ar1em" => Method::Ar1Em,
            "ppca_em" | "ppca" => Method::PpcaEm,
            other => {
                return Err(Error::InvalidArgument(format!("unknown imputation method {other:?}")))
            }
        })
    }
}

/// Method choice plus every method-specific setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputerSpec {
    pub method: Method,
    pub em: EmConfig,
    /// Months searched back by `last_observed`.
    pub lookback: u32,
    /// Months (ending at the imputation month) used to estimate AR1 persistence.
    pub ar1_window: u32,
    /// Fewer usable pairs than this set the persistence to zero.
    pub ar1_min_pairs: usize,
    pub factors: usize,
    pub ppca_max_iter: usize,
    pub ppca_tol: f64,
}

impl ImputerSpec {
    pub fn new(method: Method) -> Self {
        ImputerSpec {
            method,
            em: EmConfig::default(),
            lookback: 12,
            ar1_window: 60,
            ar1_min_pairs: 24,
            factors: 60,
            ppca_max_iter: 500,
            ppca_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.em.tol > 0.0) || self.em.max_iter == 0 {
            return bad("EM tolerance must be positive and max_iter at least 1");
        }
        if self.lookback == 0 {
            return bad("lookback must be at least one month");
        }
        if self.ar1_window < 2 {
            return bad("AR1 window must span at least two months");
        }
        if self.factors == 0 {
            return bad("factor count must be positive");
        }
        if !(self.ppca_tol > 0.0) || self.ppca_max_iter == 0 {
            return bad("ppca tolerance must be positive and max_iter at least 1");
        }
        Ok(())
    }
}

/// Where a filled cell came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Observed,
    Primary,
    Fallback,
}

impl Provenance {
    pub fn code(self) -> char {
        match self {
            Provenance::Observed => 'O',
            Provenance::Primary => 'P',
            Provenance::Fallback => 'F',
        }
    }
}

/// Convergence record of the factor-model imputer.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcaFit {
    pub iterations: usize,
    pub converged: bool,
    pub sigma2: f64,
    /// Accepted M-step objectives.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ImputedCrossSection {
    pub cs: CrossSection,
    pub filled: DMatrix<f64>,
    pub provenance: DMatrix<Provenance>,
    pub model: Option<CovModel>,
    /// AR1 persistence per predictor (`ar1_em` only).
    pub persistence: Option<Vec<f64>>,
    pub ppca: Option<PpcaFit>,
}

impl ImputedCrossSection {
    fn new(cs: &CrossSection, filled: DMatrix<f64>, provenance: DMatrix<Provenance>) -> Result<Self> {
        if let Some(pos) = filled.iter().position(|v| !v.is_finite()) {
            return Err(Error::Singular(format!(
                "imputation produced a non-finite value in column {}",
                cs.predictor_ids[pos / filled.nrows()]
            )));
        }
        Ok(ImputedCrossSection {
            cs: cs.clone(),
            filled,
            provenance,
            model: None,
            persistence: None,
            ppca: None,
        })
    }

    fn with_primary(cs: &CrossSection, filled: DMatrix<f64>) -> Result<Self> {
        let prov = cs.mask.map(|m| if m { Provenance::Observed } else { Provenance::Primary });
        Self::new(cs, filled, prov)
    }

    /// Writes the filled matrix as `stock_id,<predictors…>`.
    pub fn write_filled_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.write_wide(out, |i, j| self.filled[(i, j)].to_string())
    }

    /// Same layout as the filled matrix, with `O`, `P` or `F` in each cell.
    pub fn write_provenance_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        self.write_wide(out, |i, j| self.provenance[(i, j)].code().to_string())
    }

    fn write_wide<W: std::io::Write>(&self, out: W, cell: impl Fn(usize, usize) -> String) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("stock_id")];
        header.extend(self.cs.predictor_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, s) in self.cs.stock_ids.iter().enumerate() {
            let mut rec = vec![s.clone()];
            rec.extend((0..self.cs.j()).map(|j| cell(i, j)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn column_means(cs: &CrossSection) -> Result<Vec<f64>> {
    (0..cs.j())
        .map(|j| {
            let v = cs.column_observed(j);
            if v.is_empty() {
                Err(Error::InsufficientData(format!(
                    "predictor {} has no observations in {}",
                    cs.predictor_ids[j], cs.month
                )))
            } else {
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        })
        .collect()
}

/// Replaces missing cells with the month's observed column mean.
pub fn impute_simple_mean(cs: &CrossSection) -> Result<ImputedCrossSection> {
    let means = column_means(cs)?;
    let filled = DMatrix::from_fn(cs.n(), cs.j(), |i, j| {
        if cs.mask[(i, j)] {
            cs.values[(i, j)]
        } else {
            means[j]
        }
    });
    ImputedCrossSection::with_primary(cs, filled)
}

/// Size-bin index of each stock within its industry.
///
/// Stocks are ranked by `(cap, position)`; an industry with `n` capped stocks uses
/// `min(n, 10)` bins. Stocks without a cap get no bin.
pub fn size_bins(industries: &[Option<String>], caps: &[Option<f64>]) -> Vec<Option<usize>> {
    let mut members: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, ind) in industries.iter().enumerate() {
        if caps[i].is_some() {
            members.entry(ind.as_deref()).or_default().push(i);
        }
    }
    let mut bins = vec![None; caps.len()];
    for rows in members.values_mut() {
        rows.sort_by(|&a, &b| caps[a].unwrap().total_cmp(&caps[b].unwrap()).then(a.cmp(&b)));
        let n = rows.len();
        let k = n.min(10);
        for (rank, &i) in rows.iter().enumerate() {
            bins[i] = Some(rank * k / n);
        }
    }
    bins
}

/// Replaces missing cells with the mean over the stock's (industry, size decile)
/// group, falling back to the industry mean and then the cross-sectional mean.
///
/// `industries` and `caps` are aligned with the cross-section's rows; stocks with no
/// industry form one shared group.
pub fn impute_group_mean(
    cs: &CrossSection,
    industries: &[Option<String>],
    caps: &[Option<f64>],
) -> Result<ImputedCrossSection> {
    if industries.len() != cs.n() || caps.len() != cs.n() {
        return Err(Error::InvalidArgument("group keys do not match the rows".into()));
    }
    let global = column_means(cs)?;
    let bins = size_bins(industries, caps);
    let mut filled = cs.values.clone();
    let mut prov = cs.mask.map(|m| if m { Provenance::Observed } else { Provenance::Primary });
    for j in 0..cs.j() {
        let mut group: BTreeMap<_, (f64, usize)> = BTreeMap::new();
        let mut industry: BTreeMap<Option<&str>, (f64, usize)> = BTreeMap::new();
        for i in 0..cs.n() {
            if let Some(v) = cs.get(i, j) {
                let ind = industries[i].as_deref();
                let g = group.entry((ind, bins[i])).or_default();
                g.0 += v;
                g.1 += 1;
                let h = industry.entry(ind).or_default();
                h.0 += v;
                h.1 += 1;
            }
        }
        for i in 0..cs.n() {
            if cs.mask[(i, j)] {
                continue;
            }
            let ind = industries[i].as_deref();
            let mean = |e: Option<&(f64, usize)>| e.filter(|e| e.1 > 0).map(|e| e.0 / e.1 as f64);
            if let Some(m) = mean(group.get(&(ind, bins[i]))) {
                filled[(i, j)] = m;
            } else if let Some(m) = mean(industry.get(&ind)) {
                filled[(i, j)] = m;
                prov[(i, j)] = Provenance::Fallback;
            } else {
                filled[(i, j)] = global[j];
                prov[(i, j)] = Provenance::Fallback;
            }
        }
    }
    ImputedCrossSection::new(cs, filled, prov)
}

/// Replaces missing cells with the most recent raw value of the same stock and
/// predictor within `lookback` months, re-standardized under this month's transform;
/// otherwise with the cross-sectional mean.
pub fn impute_last_observed(
    data: &TransformedPanel,
    cs: &CrossSection,
    lookback: u32,
) -> Result<ImputedCrossSection> {
    let means = column_means(cs)?;
    let mut filled = cs.values.clone();
    let mut prov = cs.mask.map(|m| if m { Provenance::Observed } else { Provenance::Primary });
    for j in 0..cs.j() {
        let pred = &cs.predictor_ids[j];
        let params = data.params(cs.month, pred);
        for i in 0..cs.n() {
            if cs.mask[(i, j)] {
                continue;
            }
            let stock = &cs.stock_ids[i];
            let recent = params.and_then(|p| {
                (1..=lookback as i64)
                    .find_map(|k| data.raw.value(stock, cs.month.add_months(-k), pred))
                    .map(|v| p.apply(v))
            });
            match recent {
                Some(z) => filled[(i, j)] = z?,
                None => {
                    filled[(i, j)] = means[j];
                    prov[(i, j)] = Provenance::Fallback;
                }
            }
        }
    }
    ImputedCrossSection::new(cs, filled, prov)
}

/// Unrestricted multivariate normal EM followed by conditional-mean imputation.
pub fn impute_mvn_em(cs: &CrossSection, config: &EmConfig) -> Result<ImputedCrossSection> {
    let model = em_fit(cs, config)?;
    let filled = impute_em(cs, &model)?;
    let mut out = ImputedCrossSection::with_primary(cs, filled)?;
    out.model = Some(model);
    Ok(out)
}

/// Pooled no-intercept OLS persistence of each predictor at its own update period,
/// over months `[τ − window + 1, τ]`.
pub fn ar1_persistence(
    data: &TransformedPanel,
    month: YearMonth,
    predictors: &[String],
    window: u32,
    min_pairs: usize,
) -> Vec<f64> {
    predictors
        .iter()
        .map(|pred| {
            let h = data.raw.update_period(pred) as i64;
            let (mut sxy, mut sxx, mut n) = (0.0, 0.0, 0usize);
            for back in 0..window as i64 {
                let t = month.add_months(-back);
                let lag_month = t.add_months(-h);
                for (stock, x) in data.z.column(t, pred) {
                    if let Some(lag) = data.z.value(stock, lag_month, pred) {
                        sxy += x * lag;
                        sxx += lag * lag;
                        n += 1;
                    }
                }
            }
            if n < min_pairs || !(sxx > 0.0) {
                0.0
            } else {
                sxy / sxx
            }
        })
        .collect()
}

/// EM on AR1 residuals: missing cells become `φ̂·lag + ε̂` when the lag is observed and
/// `ε̂` otherwise. An observed value whose lag is missing enters the residual
/// cross-section unchanged.
pub fn impute_ar1_em(
    data: &TransformedPanel,
    cs: &CrossSection,
    spec: &ImputerSpec,
) -> Result<ImputedCrossSection> {
    let phi = ar1_persistence(data, cs.month, &cs.predictor_ids, spec.ar1_window, spec.ar1_min_pairs);
    let lags = DMatrix::from_fn(cs.n(), cs.j(), |i, j| {
        let pred = &cs.predictor_ids[j];
        let h = data.raw.update_period(pred) as i64;
        data.z
            .value(&cs.stock_ids[i], cs.month.add_months(-h), pred)
            .unwrap_or(f64::NAN)
    });
    let resid_values = DMatrix::from_fn(cs.n(), cs.j(), |i, j| {
        let x = cs.values[(i, j)];
        let lag = lags[(i, j)];
        if phi[j] != 0.0 && lag.is_finite() {
            x - phi[j] * lag
        } else {
            x
        }
    });
    let resid = cs.with_values(resid_values)?;
    let model = em_fit(&resid, &spec.em)?;
    let eps = impute_em(&resid, &model)?;
    let filled = DMatrix::from_fn(cs.n(), cs.j(), |i, j| {
        if cs.mask[(i, j)] {
            cs.values[(i, j)]
        } else if phi[j] != 0.0 && lags[(i, j)].is_finite() {
            phi[j] * lags[(i, j)] + eps[(i, j)]
        } else {
            eps[(i, j)]
        }
    });
    let mut out = ImputedCrossSection::with_primary(cs, filled)?;
    out.model = Some(model);
    out.persistence = Some(phi);
    Ok(out)
}

fn ppca_objective(s: &DMatrix<f64>, w: &DMatrix<f64>, sigma2: f64, n: usize) -> Result<f64> {
    let j = s.nrows();
    let mut c = w * w.transpose();
    for d in 0..j {
        c[(d, d)] += sigma2;
    }
    let chol = ridge_cholesky(&c)?;
    let trace = chol.solve(s).trace();
    Ok(-0.5 * n as f64 * (j as f64 * (2.0 * std::f64::consts::PI).ln() + chol_log_det(&chol) + trace))
}

fn centered_cov(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.nrows() as f64;
    let mu = y.row_sum().transpose() / n;
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= mu.transpose();
    }
    let s = yc.tr_mul(&yc) / n;
    (mu, s)
}

/// Sets every missing cell to `μ + Λ F̂`, with `F̂` the posterior factor mean given the
/// row's observed cells only.
fn fill_factor_means(
    cs: &CrossSection,
    y: &mut DMatrix<f64>,
    mu: &DVector<f64>,
    w: &DMatrix<f64>,
    sigma2: f64,
) -> Result<()> {
    let k = w.ncols();
    for g in cs.patterns() {
        let mis = g.missing();
        if mis.is_empty() {
            continue;
        }
        let obs = g.observed();
        let w_o = DMatrix::from_fn(obs.len(), k, |r, c| w[(obs[r], c)]);
        let mut a = w_o.tr_mul(&w_o);
        for d in 0..k {
            a[(d, d)] += sigma2;
        }
        let chol = ridge_cholesky(&a)?;
        for &i in &g.rows {
            let dev = DVector::from_fn(obs.len(), |r, _| y[(i, obs[r])] - mu[obs[r]]);
            let f = chol.solve(&w_o.tr_mul(&dev));
            for &c in &mis {
                y[(i, c)] = mu[c] + (w.row(c) * &f)[0];
            }
        }
    }
    Ok(())
}

/// Probabilistic PCA fitted by the practical EM: missing cells are replaced by the
/// reconstruction `μ + Λ F̂`, then the complete-data PPCA M-step runs on the filled
/// matrix without second moments of the missing cells. Stops when the objective's
/// relative gain falls below `tol`.
pub fn impute_ppca_em(
    cs: &CrossSection,
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ImputedCrossSection> {
    let (n, j) = (cs.n(), cs.j());
    if k == 0 || k >= j || k >= n {
        return Err(Error::InvalidArgument(format!(
            "factor count {k} must be below both the predictor count {j} and the row count {n}"
        )));
    }
    let means = column_means(cs)?;
    let mut y = DMatrix::from_fn(n, j, |i, c| if cs.mask[(i, c)] { cs.values[(i, c)] } else { means[c] });

    let (mut mu, s) = centered_cov(&y);
    let (vals, vecs) = sorted_eigen(&s);
    let floor = 1e-10 * (s.trace() / j as f64).max(f64::MIN_POSITIVE);
    let mut sigma2 = (vals.rows(k, j - k).sum() / (j - k) as f64).max(floor);
    let mut w = DMatrix::from_fn(j, k, |r, c| vecs[(r, c)] * (vals[c] - sigma2).max(0.0).sqrt());

    let mut best_obj = f64::NEG_INFINITY;
    let mut best_fill = y.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let eye_k = DMatrix::<f64>::identity(k, k);
    while iterations < max_iter {
        iterations += 1;
        fill_factor_means(cs, &mut y, &mu, &w, sigma2)?;
        let (mu_new, s) = centered_cov(&y);
        mu = mu_new;
        let m = w.tr_mul(&w) + &eye_k * sigma2;
        let m_inv = ridge_cholesky(&m)?.inverse();
        let sw = &s * &w;
        let inner = &eye_k * sigma2 + &m_inv * w.tr_mul(&sw);
        let w_new = &sw * ridge_cholesky(&(&inner + inner.transpose()).scale(0.5))
            .map(|c| c.inverse())
            .unwrap_or_else(|_| inner.clone().try_inverse().unwrap_or_else(|| eye_k.clone()));
        let sigma2_new = ((s.trace() - (&sw * &m_inv * w_new.transpose()).trace()) / j as f64).max(floor);
        if !sigma2_new.is_finite() || w_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate { iteration: iterations });
        }
        let obj = ppca_objective(&s, &w_new, sigma2_new, n)?;
        if obj <= best_obj {
            converged = true;
            break;
        }
        let gain = if best_obj.is_finite() {
            (obj - best_obj) / best_obj.abs().max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        best_obj = obj;
        best_fill = y.clone();
        trace.push(obj);
        w = w_new;
        sigma2 = sigma2_new;
        if gain < tol {
            converged = true;
            break;
        }
    }
    let mut out = ImputedCrossSection::with_primary(cs, best_fill)?;
    out.ppca = Some(PpcaFit {
        iterations,
        converged,
        sigma2,
        objective_trace: trace,
    });
    Ok(out)
}

/// Builds the month's cross-section from the transformed panel and runs `spec`.
pub fn run_imputer(
    spec: &ImputerSpec,
    data: &TransformedPanel,
    month: YearMonth,
    predictors: &[String],
) -> Result<ImputedCrossSection> {
    spec.validate()?;
    let cs = data.z.cross_section(month, predictors)?;
    impute_cross_section(spec, data, &cs)
}

/// Runs `spec` on an already-built cross-section of `data`.
pub fn impute_cross_section(
    spec: &ImputerSpec,
    data: &TransformedPanel,
    cs: &CrossSection,
) -> Result<ImputedCrossSection> {
    match spec.method {
        Method::SimpleMean => impute_simple_mean(cs),
        Method::GroupMean => {
            let industries: Vec<Option<String>> = cs
                .stock_ids
                .iter()
                .map(|s| data.raw.industry(s).map(str::to_string))
                .collect();
            let caps: Vec<Option<f64>> = cs.stock_ids.iter().map(|s| data.raw.cap(s, cs.month)).collect();
            impute_group_mean(cs, &industries, &caps)
        }
        Method::LastObserved => impute_last_observed(data, cs, spec.lookback),
        Method::MvnEm => impute_mvn_em(cs, &spec.em),
        Method::Ar1Em => impute_ar1_em(data, cs, spec),
        Method::PpcaEm => impute_ppca_em(cs, spec.factors, spec.ppca_max_iter, spec.ppca_tol),
    }
}

/// Imputes each listed month independently, in parallel. Results come back in the
/// order of `months`; a failing month does not affect the others.
pub fn impute_range(
    spec: &ImputerSpec,
    data: &TransformedPanel,
    months: &[YearMonth],
    predictors: &[String],
) -> Vec<Result<ImputedCrossSection>> {
    months
        .par_iter()
        .map(|&m| run_imputer(spec, data, m, predictors))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::tests::mvn_mcar;
    use crate::panel::PanelBuilder;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ym(c: u32) -> YearMonth {
        YearMonth::from_yyyymm(c).unwrap()
    }

    fn cs_from(rows: &[Vec<Option<f64>>]) -> CrossSection {
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        let preds = (0..rows[0].len()).map(|j| format!("p{j}")).collect();
        CrossSection::from_rows(ym(200001), ids, preds, rows).unwrap()
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ar1em".parse::<Method>().unwrap(), Method::Ar1Em);
        assert!("median".parse::<Method>().is_err());
    }

    #[test]
    fn simple_mean_fills() {
        let cs = cs_from(&[vec![Some(1.0)], vec![Some(3.0)], vec![None]]);
        let out = impute_simple_mean(&cs).unwrap();
        assert_eq!(out.filled.as_slice(), &[1.0, 3.0, 2.0]);
        assert_eq!(out.provenance[(2, 0)], Provenance::Primary);
        assert_eq!(out.provenance[(0, 0)], Provenance::Observed);
        let empty = cs_from(&[vec![Some(1.0), None], vec![Some(3.0), None]]);
        assert!(impute_simple_mean(&empty).is_err());
    }

    #[test]
    fn group_mean_and_fallbacks() {
        let cs = cs_from(&[
            vec![Some(1.0)],
            vec![Some(2.0)],
            vec![None],
            vec![Some(10.0)],
            vec![None],
            vec![None],
        ]);
        let ind = vec![
            Some("a".to_string()),
            Some("a".into()),
            Some("a".into()),
            Some("b".into()),
            Some("b".into()),
            Some("c".into()),
        ];
        // No caps: one bin per industry.
        let out = impute_group_mean(&cs, &ind, &[None; 6]).unwrap();
        assert_eq!(out.filled[(2, 0)], 1.5);
        assert_eq!(out.provenance[(2, 0)], Provenance::Primary);
        assert_eq!(out.filled[(4, 0)], 10.0);
        let global = (1.0 + 2.0 + 10.0) / 3.0;
        assert_eq!(out.filled[(5, 0)], global);
        assert_eq!(out.provenance[(5, 0)], Provenance::Fallback);

        // With caps, stock 4 sits alone in its size bin and falls back to industry b.
        let caps = [Some(1.0), Some(2.0), Some(3.0), Some(5.0), Some(1.0), Some(1.0)];
        let out = impute_group_mean(&cs, &ind, &caps).unwrap();
        assert_eq!(out.filled[(4, 0)], 10.0);
        assert_eq!(out.provenance[(4, 0)], Provenance::Fallback);
    }

    #[test]
    fn small_industries_use_fewer_bins() {
        let ind: Vec<Option<String>> = (0..3).map(|_| Some("x".into())).chain((0..25).map(|_| Some("y".into()))).collect();
        let caps: Vec<Option<f64>> = (0..28).map(|i| Some(100.0 - i as f64)).collect();
        let bins = size_bins(&ind, &caps);
        let small: Vec<usize> = bins[..3].iter().map(|b| b.unwrap()).collect();
        assert_eq!(small, vec![2, 1, 0]);
        let large: std::collections::BTreeSet<usize> = bins[3..].iter().map(|b| b.unwrap()).collect();
        assert_eq!(large.len(), 10);
    }

    #[test]
    fn single_group_equals_simple_mean() {
        let cs = mvn_mcar(&DMatrix::identity(4, 4), 60, 0.3, 2);
        let a = impute_simple_mean(&cs).unwrap();
        let b = impute_group_mean(&cs, &vec![Some("z".into()); 60], &[None; 60]).unwrap();
        assert_eq!(a.filled, b.filled);
    }

    /// Panel with `months` months of AR1(φ) predictors for `n` stocks.
    fn ar1_panel(n: usize, months: u32, j: usize, phi: f64, miss: f64, seed: u64) -> TransformedPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = PanelBuilder::new();
        let mut x = vec![vec![0.0; j]; n];
        for row in x.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let start = ym(199001);
        let inds = ["100", "200", "300"];
        for t in 0..months {
            let m = start.add_months(t as i64);
            for (i, row) in x.iter_mut().enumerate() {
                let stock = format!("s{i:03}");
                b.add_market(&stock, m, Some(0.0), Some(1.0 + i as f64)).unwrap();
                if t == 0 {
                    b.set_industry(&stock, inds[i % 3]);
                }
                for (c, v) in row.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = phi * *v + (1.0 - phi * phi).sqrt() * e;
                    if rng.random::<f64>() >= miss || c == 0 {
                        b.add_observation(&stock, m, &format!("p{c}"), *v).unwrap();
                    }
                }
            }
        }
        TransformedPanel::fit(b.build()).unwrap()
    }

    #[test]
    fn persistence_recovered() {
        let data = ar1_panel(400, 24, 2, 0.9, 0.0, 3);
        let phi = ar1_persistence(&data, ym(199112), &["p0".into(), "p1".into()], 60, 24);
        for p in phi {
            assert!((0.85..=0.95).contains(&p), "phi {p}");
        }
    }

    #[test]
    fn ar1_without_history_equals_mvn_em() {
        let data = ar1_panel(80, 1, 3, 0.5, 0.3, 4);
        let preds: Vec<String> = (0..3).map(|c| format!("p{c}")).collect();
        let m = ym(199001);
        let mut spec = ImputerSpec::new(Method::Ar1Em);
        let a = run_imputer(&spec, &data, m, &preds).unwrap();
        assert!(a.persistence.as_ref().unwrap().iter().all(|&p| p == 0.0));
        spec.method = Method::MvnEm;
        let b = run_imputer(&spec, &data, m, &preds).unwrap();
        assert_eq!(a.filled, b.filled);
    }

    #[test]
    fn ar1_uses_lag_when_present() {
        let data = ar1_panel(300, 30, 3, 0.9, 0.3, 5);
        let preds: Vec<String> = (0..3).map(|c| format!("p{c}")).collect();
        let m = ym(199206);
        let out = run_imputer(&ImputerSpec::new(Method::Ar1Em), &data, m, &preds).unwrap();
        let phi = out.persistence.clone().unwrap();
        assert!(phi[1] > 0.8);
        let resid = out.model.as_ref().unwrap();
        let cs = &out.cs;
        let mut lagged = 0;
        for i in 0..cs.n() {
            if cs.mask[(i, 1)] {
                continue;
            }
            let lag = data.z.value(&cs.stock_ids[i], m.prev(), "p1");
            let resid_cs = {
                let v = DMatrix::from_fn(cs.n(), cs.j(), |r, c| {
                    let lag = data.z.value(&cs.stock_ids[r], m.prev(), &preds[c]);
                    match lag {
                        Some(l) if phi[c] != 0.0 => cs.values[(r, c)] - phi[c] * l,
                        _ => cs.values[(r, c)],
                    }
                });
                cs.with_values(v).unwrap()
            };
            let eps = impute_em(&resid_cs, resid).unwrap()[(i, 1)];
            match lag {
                Some(l) => {
                    lagged += 1;
                    assert_relative_eq!(out.filled[(i, 1)], phi[1] * l + eps, epsilon = 1e-12);
                }
                None => assert_relative_eq!(out.filled[(i, 1)], eps, epsilon = 1e-12),
            }
        }
        assert!(lagged > 0);
    }

    #[test]
    fn last_observed_window() {
        let mut b = PanelBuilder::new();
        let m0 = ym(200001);
        for t in 0..14 {
            let m = m0.add_months(t);
            for s in 0..12 {
                let stock = format!("s{s:02}");
                let skip = (stock == "s00" && t >= 10) || (stock == "s01" && t >= 1);
                if !skip {
                    b.add_observation(&stock, m, "x", (s as f64 + 1.0) * (1.0 + t as f64 / 10.0)).unwrap();
                }
            }
        }
        let data = TransformedPanel::fit(b.build()).unwrap();
        let m = m0.add_months(13);
        let cs = data.z.cross_section(m, &["x".into()]);
        // s00 and s01 have no observation in month 13, so they are not rows; add them
        // through a second predictor observed by everyone.
        assert!(cs.is_ok());
        let mut b = PanelBuilder::new();
        for t in 0..14 {
            let m = m0.add_months(t);
            for s in 0..12 {
                let stock = format!("s{s:02}");
                b.add_observation(&stock, m, "y", s as f64).unwrap();
                let skip = (stock == "s00" && t >= 10) || (stock == "s01" && t >= 1);
                if !skip {
                    b.add_observation(&stock, m, "x", (s as f64 + 1.0) * (1.0 + t as f64 / 10.0)).unwrap();
                }
            }
        }
        let data = TransformedPanel::fit(b.build()).unwrap();
        let preds = vec!["x".to_string(), "y".to_string()];
        let out = run_imputer(&ImputerSpec::new(Method::LastObserved), &data, m, &preds).unwrap();
        let p = data.params(m, "x").unwrap();
        // s00 last seen 4 months ago (month 9).
        let raw = data.raw.value("s00", m0.add_months(9), "x").unwrap();
        assert_eq!(out.filled[(0, 0)], p.apply(raw).unwrap());
        assert_eq!(out.provenance[(0, 0)], Provenance::Primary);
        // s01 last seen 13 months ago: cross-sectional mean.
        let mean = out.cs.column_observed(0).iter().sum::<f64>() / 10.0;
        assert_relative_eq!(out.filled[(1, 0)], mean, epsilon = 1e-15);
        assert_eq!(out.provenance[(1, 0)], Provenance::Fallback);
        assert_eq!(out.filled[(2, 0)], out.cs.values[(2, 0)]);
    }

    #[test]
    fn ppca_recovers_factor_data() {
        let (n, j, k) = (500, 20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lambda = DMatrix::from_fn(j, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(n, j, |_, _| 1e-3 * rng.sample::<f64, _>(StandardNormal));
        let x = &f * lambda.transpose() + noise;
        let mask = DMatrix::from_fn(n, j, |_, _| rng.random::<f64>() >= 0.1);
        let cs = CrossSection::anonymous(ym(200001), x.clone(), mask.clone()).unwrap();
        let out = impute_ppca_em(&cs, k, 500, 1e-6).unwrap();
        let (mut se, mut m) = (0.0, 0);
        for i in 0..n {
            for c in 0..j {
                if !mask[(i, c)] {
                    se += (out.filled[(i, c)] - x[(i, c)]).powi(2);
                    m += 1;
                }
            }
        }
        let rmse = (se / m as f64).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
        let fit = out.ppca.unwrap();
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ppca_rejects_large_k() {
        let cs = mvn_mcar(&DMatrix::identity(4, 4), 50, 0.2, 1);
        assert!(impute_ppca_em(&cs, 4, 10, 1e-6).is_err());
        let out = impute_ppca_em(&cs, 3, 100, 1e-6).unwrap();
        assert!(out.filled.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn diagonal_sigma_em_equals_mean() {
        let cs = mvn_mcar(&DMatrix::identity(3, 3), 50, 0.3, 7);
        let mean = impute_simple_mean(&cs).unwrap();
        let mu = DVector::from_fn(3, |c, _| {
            let v = cs.column_observed(c);
            v.iter().sum::<f64>() / v.len() as f64
        });
        let model = CovModel {
            month: cs.month,
            predictor_ids: cs.predictor_ids.clone(),
            mu,
            sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5])),
            iterations: 0,
            converged: true,
            final_delta: 0.0,
            quasi_loglik_trace: vec![],
        };
        let em = impute_em(&cs, &model).unwrap();
        for (a, b) in em.iter().zip(mean.filled.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wide_csv_layout() {
        let cs = cs_from(&[vec![Some(1.0), None], vec![Some(3.0), Some(4.0)]]);
        let out = impute_simple_mean(&cs).unwrap();
        let mut f = Vec::new();
        out.write_filled_csv(&mut f).unwrap();
        assert_eq!(String::from_utf8(f).unwrap(), "stock_id,p0,p1\ns0,1,4\ns1,3,4\n");
        let mut p = Vec::new();
        out.write_provenance_csv(&mut p).unwrap();
        assert_eq!(String::from_utf8(p).unwrap(), "stock_id,p0,p1\ns0,O,P\ns1,O,O\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn observed_cells_never_change(seed in any::<u64>(), miss in 0.05f64..0.5) {
            let data = ar1_panel(40, 4, 4, 0.6, miss, seed);
            let preds: Vec<String> = (0..4).map(|c| format!("p{c}")).collect();
            let month = ym(199004);
            for method in Method::ALL {
                let mut spec = ImputerSpec::new(method);
                spec.factors = 2;
                spec.ar1_min_pairs = 5;
                let out = run_imputer(&spec, &data, month, &preds).unwrap();
                let again = run_imputer(&spec, &data, month, &preds).unwrap();
                prop_assert_eq!(&out.filled, &again.filled);
                for i in 0..out.cs.n() {
                    for c in 0..4 {
                        let obs = out.cs.mask[(i, c)];
                        prop_assert_eq!(out.provenance[(i, c)] == Provenance::Observed, obs);
                        if obs {
                            prop_assert_eq!(out.filled[(i, c)], out.cs.values[(i, c)]);
                        }
                    }
                }
            }
        }
    }
}
