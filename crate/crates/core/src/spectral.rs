//! Correlation, spectrum and imputation-slope diagnostics.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::em::CovModel;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, quantiles, ridge_cholesky, sorted_eigen, submatrix};
use crate::panel::CrossSection;

/// Probabilities at which distribution summaries are reported.
pub const SUMMARY_PROBS: [f64; 9] = [0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99];

/// Smallest |observed correlation| that enters the percent-difference panel.
pub const PERCENT_GUARD: f64 = 1e-6;

/// Correlation matrix whose entries may be undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub values: DMatrix<f64>,
    pub defined: DMatrix<bool>,
}

/// Pearson correlation of each predictor pair over the rows observing both.
///
/// Pairs with fewer than two joint observations, or with no joint variation, are
/// marked undefined.
pub fn available_case_corr(cs: &CrossSection) -> CorrMatrix {
    let j = cs.j();
    let mut values = DMatrix::identity(j, j);
    let mut defined = DMatrix::from_element(j, j, false);
    for a in 0..j {
        defined[(a, a)] = true;
        for b in (a + 1)..j {
            let pairs: Vec<(f64, f64)> = (0..cs.n())
                .filter(|&i| cs.mask[(i, a)] && cs.mask[(i, b)])
                .map(|i| (cs.values[(i, a)], cs.values[(i, b)]))
                .collect();
            if pairs.len() < 2 {
                values[(a, b)] = f64::NAN;
                values[(b, a)] = f64::NAN;
                continue;
            }
            let m = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / m;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / m;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in &pairs {
                sab += (x - ma) * (y - mb);
                saa += (x - ma) * (x - ma);
                sbb += (y - mb) * (y - mb);
            }
            let r = if saa > 0.0 && sbb > 0.0 {
                (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
            } else {
                f64::NAN
            };
            let ok = r.is_finite();
            values[(a, b)] = r;
            values[(b, a)] = r;
            defined[(a, b)] = ok;
            defined[(b, a)] = ok;
        }
    }
    CorrMatrix { values, defined }
}

/// Rescales a covariance matrix to unit diagonal.
pub fn cov_to_corr(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d: Vec<f64> = sigma.diagonal().iter().map(|v| v.sqrt()).collect();
    if let Some(k) = d.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Singular(format!("diagonal entry {k} is not positive")));
    }
    let n = sigma.nrows();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            1.0
        } else {
            sigma[(a, b)] / (d[a] * d[b])
        }
    }))
}

pub fn em_corr(model: &CovModel) -> Result<DMatrix<f64>> {
    cov_to_corr(&model.sigma)
}

/// Pairwise differences between an EM and an available-case correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrDiffStats {
    /// `em − obs` over defined upper-triangle pairs.
    pub level: Vec<f64>,
    /// `100·(em − obs)/|obs|`, pairs with `|obs| < 1e-6` excluded.
    pub percent: Vec<f64>,
    pub mean_abs_level: f64,
    pub mean_abs_percent: f64,
    pub level_quantiles: Vec<f64>,
    pub percent_quantiles: Vec<f64>,
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn quantiles_or_nan(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        vec![f64::NAN; SUMMARY_PROBS.len()]
    } else {
        quantiles(v, &SUMMARY_PROBS)
    }
}

pub fn corr_difference_stats(em: &DMatrix<f64>, obs: &CorrMatrix) -> Result<CorrDiffStats> {
    if em.shape() != obs.values.shape() {
        return Err(Error::InvalidArgument("correlation matrices differ in shape".into()));
    }
    let j = em.nrows();
    let mut level = Vec::new();
    let mut percent = Vec::new();
    for a in 0..j {
        for b in (a + 1)..j {
            if !obs.defined[(a, b)] {
                continue;
            }
            let o = obs.values[(a, b)];
            let d = em[(a, b)] - o;
            level.push(d);
            if o.abs() >= PERCENT_GUARD {
                percent.push(100.0 * d / o.abs());
            }
        }
    }
    Ok(CorrDiffStats {
        mean_abs_level: mean_abs(&level),
        mean_abs_percent: mean_abs(&percent),
        level_quantiles: quantiles_or_nan(&level),
        percent_quantiles: quantiles_or_nan(&percent),
        level,
        percent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// Cumulative share of total variance of the first `k + 1` components.
    pub variance_share: Vec<f64>,
}

pub fn pca_spectrum(sigma: &DMatrix<f64>) -> Result<Spectrum> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::InvalidArgument("spectrum needs a non-empty square matrix".into()));
    }
    let scale = max_abs(sigma).max(f64::MIN_POSITIVE);
    if max_abs(&(sigma - sigma.transpose())) > 1e-10 * scale {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let (eigenvalues, eigenvectors) = sorted_eigen(sigma);
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Singular("total variance is not positive".into()));
    }
    let mut acc = 0.0;
    let variance_share = eigenvalues
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
        variance_share,
    })
}

/// How [`pooled_covariance`] centres the rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Demean {
    #[default]
    Pooled,
    PerMonth,
}

/// Covariance of all rows of all months taken together.
pub fn pooled_covariance(months: &[DMatrix<f64>], demean: Demean) -> Result<DMatrix<f64>> {
    let Some(first) = months.first() else {
        return Err(Error::InsufficientData("no months to pool".into()));
    };
    let j = first.ncols();
    if months.iter().any(|m| m.ncols() != j) {
        return Err(Error::PredictorMismatch);
    }
    let total: usize = months.iter().map(|m| m.nrows()).sum();
    if total == 0 {
        return Err(Error::InsufficientData("no rows to pool".into()));
    }
    let pooled_mean = months
        .iter()
        .fold(DVector::zeros(j), |acc, m| acc + m.row_sum().transpose())
        / total as f64;
    let mut acc = DMatrix::zeros(j, j);
    for m in months {
        if m.nrows() == 0 {
            continue;
        }
        let mean = match demean {
            Demean::Pooled => pooled_mean.clone(),
            Demean::PerMonth => m.row_sum().transpose() / m.nrows() as f64,
        };
        let mut c = m.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        acc += c.tr_mul(&c);
    }
    Ok(acc / total as f64)
}

/// Univariate pooled OLS slope (with intercept) of the target on each predictor, and
/// the predictors rescaled by those slopes.
pub fn scaled_predictors(
    months: &[DMatrix<f64>],
    returns: &[DVector<f64>],
) -> Result<(Vec<DMatrix<f64>>, DVector<f64>)> {
    if months.len() != returns.len() || months.is_empty() {
        return Err(Error::InvalidArgument("predictor and return windows differ".into()));
    }
    let j = months[0].ncols();
    let mut n = 0usize;
    let mut sx = DVector::<f64>::zeros(j);
    let mut sxx = DVector::<f64>::zeros(j);
    let mut sxy = DVector::<f64>::zeros(j);
    let mut sy = 0.0;
    for (x, r) in months.iter().zip(returns) {
        if x.nrows() != r.len() || x.ncols() != j {
            return Err(Error::InvalidArgument("rows and returns are misaligned".into()));
        }
        for i in 0..x.nrows() {
            n += 1;
            sy += r[i];
            for c in 0..j {
                let v = x[(i, c)];
                sx[c] += v;
                sxx[c] += v * v;
                sxy[c] += v * r[i];
            }
        }
    }
    let nf = n as f64;
    let mut gamma = DVector::zeros(j);
    for c in 0..j {
        let var = sxx[c] - sx[c] * sx[c] / nf;
        if !(var > 1e-12 * sxx[c].max(f64::MIN_POSITIVE)) {
            return Err(Error::InsufficientData(format!("predictor {c} has no variation in the window")));
        }
        gamma[c] = (sxy[c] - sx[c] * sy / nf) / var;
    }
    let scaled = months
        .iter()
        .map(|x| {
            let mut s = x.clone();
            for (c, mut col) in s.column_iter_mut().enumerate() {
                col *= gamma[c];
            }
            s
        })
        .collect();
    Ok((scaled, gamma))
}

/// All entries of `β = Σ_{j,obs} Σ_{obs,obs}⁻¹` over every (row, missing predictor).
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeDistribution {
    pub slopes: Vec<f64>,
    pub mean_abs: f64,
    /// Values at [`SUMMARY_PROBS`].
    pub quantiles: Vec<f64>,
}

/// Slope blocks (missing × observed) for one pattern.
fn pattern_slopes(sigma: &DMatrix<f64>, mask: &[bool]) -> Result<DMatrix<f64>> {
    let obs: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    let mis: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
    if obs.is_empty() || mis.is_empty() {
        return Ok(DMatrix::zeros(mis.len(), 0));
    }
    let chol = ridge_cholesky(&submatrix(sigma, &obs, &obs))?;
    Ok(chol.solve(&submatrix(sigma, &obs, &mis)).transpose())
}

/// Stacks imputation slopes row by row; within a row, by missing predictor and then
/// observed predictor. Rows sharing a mask share one factorization.
pub fn imputation_slopes(sigma: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<SlopeDistribution> {
    let j = sigma.nrows();
    if mask.ncols() != j || !sigma.is_square() {
        return Err(Error::InvalidArgument("mask and covariance dimensions differ".into()));
    }
    let mut cache: HashMap<Vec<bool>, DMatrix<f64>> = HashMap::new();
    let mut slopes = Vec::new();
    for i in 0..mask.nrows() {
        let key: Vec<bool> = mask.row(i).iter().copied().collect();
        if !cache.contains_key(&key) {
            let b = pattern_slopes(sigma, &key)?;
            cache.insert(key.clone(), b);
        }
        let b = &cache[&key];
        for r in 0..b.nrows() {
            slopes.extend(b.row(r).iter());
        }
    }
    Ok(SlopeDistribution {
        mean_abs: if slopes.is_empty() { 0.0 } else { mean_abs(&slopes) },
        quantiles: quantiles_or_nan(&slopes),
        slopes,
    })
}

/// `k,eigenvalue,cum_share` with `k` starting at 1.
pub fn write_spectrum_csv<W: Write>(s: &Spectrum, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "eigenvalue", "cum_share"])?;
    for (k, (v, c)) in s.eigenvalues.iter().zip(&s.variance_share).enumerate() {
        w.write_record([(k + 1).to_string(), v.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `quantile,value`
pub fn write_quantiles_csv<W: Write>(probs: &[f64], values: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["quantile", "value"])?;
    for (p, v) in probs.iter().zip(values) {
        w.write_record([p.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One column named `header`.
pub fn write_values_csv<W: Write>(header: &str, values: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([header])?;
    for v in values {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Upper-triangle entries as `predictor_a,predictor_b,corr`; undefined pairs skipped.
pub fn write_corr_pairs_csv<W: Write>(
    ids: &[String],
    corr: &DMatrix<f64>,
    defined: Option<&DMatrix<bool>>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["predictor_a", "predictor_b", "corr"])?;
    for a in 0..ids.len() {
        for b in (a + 1)..ids.len() {
            if defined.is_some_and(|d| !d[(a, b)]) {
                continue;
            }
            w.write_record([ids[a].as_str(), ids[b].as_str(), &corr[(a, b)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::tests::mvn_mcar;
    use crate::em::{em_fit, EmConfig};
    use crate::month::YearMonth;
    use approx::assert_relative_eq;
    use nalgebra::Cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ym() -> YearMonth {
        YearMonth::from_yyyymm(200001).unwrap()
    }

    fn rows(r: &[Vec<Option<f64>>]) -> CrossSection {
        let ids = (0..r.len()).map(|i| format!("s{i}")).collect();
        let preds = (0..r[0].len()).map(|j| format!("p{j}")).collect();
        CrossSection::from_rows(ym(), ids, preds, r).unwrap()
    }

    #[test]
    fn available_case_flags_and_identity() {
        let cs = rows(&[
            vec![Some(1.0), None, Some(1.0)],
            vec![Some(2.0), None, Some(2.0)],
            vec![None, Some(1.0), Some(5.0)],
            vec![None, Some(3.0), Some(3.0)],
        ]);
        let c = available_case_corr(&cs);
        assert!(!c.defined[(0, 1)]);
        assert!(c.defined[(0, 2)]);
        assert_relative_eq!(c.values[(0, 2)], 1.0);
        assert_relative_eq!(c.values[(1, 2)], -1.0);
        assert_eq!(c.values[(1, 1)], 1.0);
    }

    #[test]
    fn complete_data_corr_matches_em() {
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.0, -0.3, 0.2, -0.3, 1.0]);
        let cs = mvn_mcar(&sigma, 300, 0.0, 3);
        let obs = available_case_corr(&cs);
        let model = em_fit(&cs, &EmConfig::default()).unwrap();
        let em = em_corr(&model).unwrap();
        assert!(max_abs(&(&em - &obs.values)) < 1e-8);
        let d = corr_difference_stats(&em, &obs).unwrap();
        assert!(d.level.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn em_corr_cases() {
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        assert_eq!(cov_to_corr(&diag).unwrap(), DMatrix::identity(2, 2));
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(cov_to_corr(&c).unwrap(), c);
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!(cov_to_corr(&z).is_err());
    }

    #[test]
    fn difference_single_pair() {
        let em = DMatrix::from_row_slice(2, 2, &[1.0, 0.10, 0.10, 1.0]);
        let obs = CorrMatrix {
            values: DMatrix::from_row_slice(2, 2, &[1.0, 0.05, 0.05, 1.0]),
            defined: DMatrix::from_element(2, 2, true),
        };
        let d = corr_difference_stats(&em, &obs).unwrap();
        assert_relative_eq!(d.level[0], 0.05, epsilon = 1e-15);
        assert_relative_eq!(d.percent[0], 100.0, epsilon = 1e-10);
        let tiny = CorrMatrix {
            values: DMatrix::from_row_slice(2, 2, &[1.0, 1e-7, 1e-7, 1.0]),
            defined: DMatrix::from_element(2, 2, true),
        };
        let d = corr_difference_stats(&em, &tiny).unwrap();
        assert_eq!(d.level.len(), 1);
        assert!(d.percent.is_empty());
        assert!(corr_difference_stats(&DMatrix::identity(3, 3), &obs).is_err());
    }

    #[test]
    fn spectrum_cases() {
        let s = pca_spectrum(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(s.variance_share, vec![0.25, 0.5, 0.75, 1.0]);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let s = pca_spectrum(&(&v * v.transpose())).unwrap();
        assert_relative_eq!(s.variance_share[0], 1.0, epsilon = 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(pca_spectrum(&bad).is_err());
    }

    fn random_psd(j: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(j, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() / j as f64 + DMatrix::identity(j, j) * 0.1
    }

    #[test]
    fn spectrum_reconstructs() {
        let sigma = random_psd(8, 2);
        let s = pca_spectrum(&sigma).unwrap();
        let back = &s.eigenvectors * DMatrix::from_diagonal(&s.eigenvalues) * s.eigenvectors.transpose();
        assert!(max_abs(&(back - &sigma)) < 1e-8);
        let gram = s.eigenvectors.tr_mul(&s.eigenvectors);
        assert!(max_abs(&(gram - DMatrix::identity(8, 8))) < 1e-8);
        assert!(s.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pooled_cases() {
        let cs = mvn_mcar(&random_psd(3, 5), 200, 0.0, 5);
        let x = cs.values.clone();
        let one = pooled_covariance(std::slice::from_ref(&x), Demean::Pooled).unwrap();
        let two = pooled_covariance(&[x.clone(), x.clone()], Demean::Pooled).unwrap();
        assert!(max_abs(&(&one - &two)) < 1e-12);
        let model = em_fit(&cs, &EmConfig::default()).unwrap();
        assert!(max_abs(&(&one - &model.sigma)) < 1e-10);
        assert!(pooled_covariance(&[], Demean::Pooled).is_err());
    }

    #[test]
    fn pooled_close_to_truth() {
        let sigma = random_psd(5, 6);
        let months: Vec<DMatrix<f64>> = (0..20).map(|t| mvn_mcar(&sigma, 1000, 0.0, 100 + t).values).collect();
        let pooled = pooled_covariance(&months, Demean::PerMonth).unwrap();
        assert!(max_abs(&(pooled - &sigma)) < 0.05);
    }

    #[test]
    fn scaled_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<DMatrix<f64>> = (0..5)
            .map(|_| DMatrix::from_fn(400, 3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let rs: Vec<DVector<f64>> = xs.iter().map(|x| x.column(0) * 0.1).collect();
        let (scaled, g) = scaled_predictors(&xs, &rs).unwrap();
        assert_relative_eq!(g[0], 0.1, epsilon = 1e-12);
        assert!(g[1].abs() < 0.01 && g[2].abs() < 0.01);
        assert_relative_eq!(scaled[0][(3, 0)], 0.1 * xs[0][(3, 0)], epsilon = 1e-15);
        let doubled: Vec<DVector<f64>> = rs.iter().map(|r| r * 2.0).collect();
        let (_, g2) = scaled_predictors(&xs, &doubled).unwrap();
        assert_relative_eq!(g2[0], 0.2, epsilon = 1e-12);
        let flat = vec![DMatrix::from_element(4, 1, 1.0)];
        assert!(scaled_predictors(&flat, &[DVector::zeros(4)]).is_err());
    }

    #[test]
    fn bivariate_slope_is_rho() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.37, 0.37, 1.0]);
        let mask = DMatrix::from_row_slice(1, 2, &[true, false]);
        let d = imputation_slopes(&sigma, &mask).unwrap();
        assert_eq!(d.slopes.len(), 1);
        assert_relative_eq!(d.slopes[0], 0.37, epsilon = 1e-7);
    }

    #[test]
    fn diagonal_sigma_zero_slopes() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = DMatrix::from_fn(50, 4, |_, _| rng.random::<f64>() < 0.6);
        let d = imputation_slopes(&sigma, &mask).unwrap();
        assert!(!d.slopes.is_empty());
        assert!(d.slopes.iter().all(|&s| s == 0.0));
        assert_eq!(d.mean_abs, 0.0);
    }

    #[test]
    fn slopes_match_ols() {
        let j = 4;
        let sigma = random_psd(j, 9);
        let n = 100_000;
        let l = Cholesky::new(sigma.clone()).unwrap().unpack();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = DMatrix::from_fn(n, j, |_, _| rng.sample::<f64, _>(StandardNormal)) * l.transpose();
        // Regress column 2 on the rest through the normal equations.
        let others = [0usize, 1, 3];
        let design = DMatrix::from_fn(n, 3, |i, c| x[(i, others[c])]);
        let y = x.column(2).into_owned();
        let beta = (design.tr_mul(&design)).lu().solve(&design.tr_mul(&y)).unwrap();
        let mask = DMatrix::from_row_slice(1, 4, &[true, true, false, true]);
        let d = imputation_slopes(&sigma, &mask).unwrap();
        for c in 0..3 {
            assert!((d.slopes[c] - beta[c]).abs() < 0.02, "{} vs {}", d.slopes[c], beta[c]);
        }
    }

    #[test]
    fn csv_writers() {
        let s = pca_spectrum(&DMatrix::identity(2, 2)).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,eigenvalue,cum_share\n1,1,0.5\n2,1,1\n");
        let mut buf = Vec::new();
        let ids = vec!["a".to_string(), "b".to_string()];
        let defined = DMatrix::from_element(2, 2, false);
        write_corr_pairs_csv(&ids, &DMatrix::identity(2, 2), Some(&defined), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "predictor_a,predictor_b,corr\n");
    }

    proptest! {
        #[test]
        fn share_invariant_to_reordering(seed in any::<u64>(), shift in 1usize..5) {
            let sigma = random_psd(5, seed);
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let permuted = DMatrix::from_fn(5, 5, |a, b| sigma[(perm[a], perm[b])]);
            let a = pca_spectrum(&sigma).unwrap();
            let b = pca_spectrum(&permuted).unwrap();
            for (x, y) in a.variance_share.iter().zip(&b.variance_share) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            prop_assert!((a.variance_share[4] - 1.0).abs() < 1e-10);
        }

        #[test]
        fn mean_abs_is_exact(seed in any::<u64>()) {
            let sigma = random_psd(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = DMatrix::from_fn(20, 6, |_, _| rng.random::<f64>() < 0.5);
            let d = imputation_slopes(&sigma, &mask).unwrap();
            let m = if d.slopes.is_empty() { 0.0 } else {
                d.slopes.iter().map(|s| s.abs()).sum::<f64>() / d.slopes.len() as f64
            };
            prop_assert_eq!(d.mean_abs, m);
        }
    }
}
