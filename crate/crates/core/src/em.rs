//! Maximum likelihood for a multivariate normal observed under arbitrary missingness
//! patterns, and conditional-mean imputation.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, max_abs, project_psd, ridge_cholesky, submatrix, symmetrize};
use crate::month::YearMonth;
use crate::panel::CrossSection;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigenvalue floor (relative to the largest) for the initial covariance.
pub const INIT_EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-4,
            max_iter: 10_000,
        }
    }
}

/// Estimated mean and covariance for one month.
#[derive(Debug, Clone, PartialEq)]
pub struct CovModel {
    pub month: YearMonth,
    pub predictor_ids: Vec<String>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm size of the last parameter step.
    pub final_delta: f64,
    /// Observed-data log-likelihood at the start value and after every iteration.
    pub quasi_loglik_trace: Vec<f64>,
}

/// First two conditional moments of one row given its observed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub row: usize,
    pub e: DVector<f64>,
    pub s: DMatrix<f64>,
}

/// Regression of the missing block on the observed block, shared by every row with
/// the same mask.
struct PatternSolver {
    obs: Vec<usize>,
    mis: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
    /// `Σ_mo Σ_oo⁻¹`
    slope: DMatrix<f64>,
    /// `Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om`
    cond_cov: DMatrix<f64>,
}

impl PatternSolver {
    fn new(mask: &[bool], sigma: &DMatrix<f64>) -> Result<Self> {
        let obs: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        let mis: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
        if obs.is_empty() {
            return Ok(PatternSolver {
                slope: DMatrix::zeros(mis.len(), 0),
                cond_cov: submatrix(sigma, &mis, &mis),
                obs,
                mis,
                chol: None,
            });
        }
        let chol = ridge_cholesky(&submatrix(sigma, &obs, &obs))?;
        let s_om = submatrix(sigma, &obs, &mis);
        let slope = chol.solve(&s_om).transpose();
        let mut cond_cov = submatrix(sigma, &mis, &mis) - &slope * &s_om;
        symmetrize(&mut cond_cov);
        Ok(PatternSolver {
            obs,
            mis,
            chol: Some(chol),
            slope,
            cond_cov,
        })
    }

    /// Conditional mean of row `x` (missing entries ignored).
    fn fill(&self, x: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        let mut e = DVector::from_fn(x.len(), |j, _| x[j]);
        if self.mis.is_empty() {
            return e;
        }
        let dev = DVector::from_fn(self.obs.len(), |k, _| x[self.obs[k]] - mu[self.obs[k]]);
        let shift = &self.slope * dev;
        for (k, &j) in self.mis.iter().enumerate() {
            e[j] = mu[j] + shift[k];
        }
        e
    }

    /// `log N(x_o; μ_o, Σ_oo)`; zero for a row with nothing observed.
    fn log_density(&self, x: &[f64], mu: &DVector<f64>) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let dev = DVector::from_fn(self.obs.len(), |k, _| x[self.obs[k]] - mu[self.obs[k]]);
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&dev)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (self.obs.len() as f64 * LN_2PI + chol_log_det(chol) + z.norm_squared())
    }
}

fn row_of(cs: &CrossSection, i: usize) -> Vec<f64> {
    (0..cs.j()).map(|j| cs.values[(i, j)]).collect()
}

fn check_params(cs: &CrossSection, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    let j = cs.j();
    if mu.len() != j || sigma.shape() != (j, j) {
        return Err(Error::InvalidArgument(format!(
            "parameters have dimension {} but the cross-section has {j} predictors",
            mu.len()
        )));
    }
    Ok(())
}

/// Conditional moments of one row given `(μ, Σ)`.
pub fn conditional_moments(
    row: usize,
    x: &[Option<f64>],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<ConditionalMoments> {
    if x.len() != mu.len() || sigma.shape() != (mu.len(), mu.len()) {
        return Err(Error::InvalidArgument("row and parameter dimensions differ".into()));
    }
    let mask: Vec<bool> = x.iter().map(Option::is_some).collect();
    let values: Vec<f64> = x.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let solver = PatternSolver::new(&mask, sigma)?;
    let e = solver.fill(&values, mu);
    let mut s = &e * e.transpose();
    for (a, &ja) in solver.mis.iter().enumerate() {
        for (b, &jb) in solver.mis.iter().enumerate() {
            s[(ja, jb)] += solver.cond_cov[(a, b)];
        }
    }
    Ok(ConditionalMoments { row, e, s })
}

/// Result of one E-step.
pub struct EStep {
    /// Conditional means, one row per stock.
    pub filled: DMatrix<f64>,
    /// `Σ_i Cov(x_i | x_i,o)`, accumulated in row order.
    pub cond_cov_sum: DMatrix<f64>,
    /// Observed-data log-likelihood at the parameters used.
    pub loglik: f64,
}

fn solve_patterns(
    cs: &CrossSection,
    sigma: &DMatrix<f64>,
) -> Result<Vec<PatternSolver>> {
    cs.patterns()
        .par_iter()
        .map(|g| PatternSolver::new(&g.mask, sigma))
        .collect()
}

/// E-step with one factorization per distinct missingness pattern.
pub fn e_step(cs: &CrossSection, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<EStep> {
    check_params(cs, mu, sigma)?;
    let solvers = solve_patterns(cs, sigma)?;
    let rows: Vec<(DVector<f64>, f64)> = (0..cs.n())
        .into_par_iter()
        .map(|i| {
            let x = row_of(cs, i);
            let s = &solvers[cs.row_pattern()[i]];
            (s.fill(&x, mu), s.log_density(&x, mu))
        })
        .collect();
    let refs: Vec<&PatternSolver> = cs.row_pattern().iter().map(|&g| &solvers[g]).collect();
    Ok(assemble(cs.j(), &rows, &refs))
}

fn assemble(j: usize, rows: &[(DVector<f64>, f64)], solvers: &[&PatternSolver]) -> EStep {
    let n = rows.len();
    let mut filled = DMatrix::zeros(n, j);
    let mut cond_cov_sum = DMatrix::zeros(j, j);
    let mut loglik = 0.0;
    for (i, ((e, ll), s)) in rows.iter().zip(solvers).enumerate() {
        filled.set_row(i, &e.transpose());
        loglik += ll;
        for (a, &ja) in s.mis.iter().enumerate() {
            for (b, &jb) in s.mis.iter().enumerate() {
                cond_cov_sum[(ja, jb)] += s.cond_cov[(a, b)];
            }
        }
    }
    EStep {
        filled,
        cond_cov_sum,
        loglik,
    }
}

/// Reference E-step that factorizes separately for every row.
pub fn e_step_rowwise(
    cs: &CrossSection,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<EStep> {
    check_params(cs, mu, sigma)?;
    let mut rows = Vec::with_capacity(cs.n());
    let mut solvers = Vec::with_capacity(cs.n());
    for i in 0..cs.n() {
        let x = row_of(cs, i);
        let mask: Vec<bool> = (0..cs.j()).map(|j| cs.mask[(i, j)]).collect();
        let s = PatternSolver::new(&mask, sigma)?;
        rows.push((s.fill(&x, mu), s.log_density(&x, mu)));
        solvers.push(s);
    }
    let refs: Vec<&PatternSolver> = solvers.iter().collect();
    Ok(assemble(cs.j(), &rows, &refs))
}

/// M-step: `μ = N⁻¹ Σ e_i`, `Σ = N⁻¹ Σ S_i − μμᵀ`.
pub fn m_step(step: &EStep) -> (DVector<f64>, DMatrix<f64>) {
    let n = step.filled.nrows() as f64;
    let mu = step.filled.row_sum().transpose() / n;
    let mut sigma = (step.filled.tr_mul(&step.filled) + &step.cond_cov_sum) / n - &mu * mu.transpose();
    symmetrize(&mut sigma);
    (mu, sigma)
}

/// Observed-data log-likelihood `Σ_i log N(x_i,o; μ_o, Σ_oo)`.
pub fn quasi_loglik(cs: &CrossSection, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    Ok(e_step(cs, mu, sigma)?.loglik)
}

/// Observed means and the pairwise available-case covariance, projected to the PSD
/// cone with the observed variances kept on the diagonal.
pub fn initial_params(cs: &CrossSection) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, j) = (cs.n(), cs.j());
    for c in 0..j {
        if cs.observed_count(c) < 2 {
            return Err(Error::InsufficientData(format!(
                "predictor {} has {} observations in {}",
                cs.predictor_ids[c],
                cs.observed_count(c),
                cs.month
            )));
        }
    }
    let mu = DVector::from_fn(j, |c, _| {
        let v = cs.column_observed(c);
        v.iter().sum::<f64>() / v.len() as f64
    });
    let mut cov = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in a..j {
            let pairs: Vec<(f64, f64)> = (0..n)
                .filter(|&i| cs.mask[(i, a)] && cs.mask[(i, b)])
                .map(|i| (cs.values[(i, a)], cs.values[(i, b)]))
                .collect();
            if pairs.len() < 2 {
                continue;
            }
            let m = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / m;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / m;
            let c = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / m;
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    Ok((mu, project_psd(&cov, INIT_EIGEN_FLOOR)))
}

/// Runs EM to convergence in the max norm over `(μ, Σ)`.
pub fn em_fit(cs: &CrossSection, config: &EmConfig) -> Result<CovModel> {
    let (mu, sigma) = initial_params(cs)?;
    em_fit_from(cs, mu, sigma, config)
}

/// Runs EM from given start values.
pub fn em_fit_from(
    cs: &CrossSection,
    mut mu: DVector<f64>,
    mut sigma: DMatrix<f64>,
    config: &EmConfig,
) -> Result<CovModel> {
    if !(config.tol > 0.0) || config.max_iter == 0 {
        return Err(Error::InvalidArgument(
            "EM needs a positive tolerance and at least one iteration".into(),
        ));
    }
    check_params(cs, &mu, &sigma)?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    let mut converged = false;
    while iterations < config.max_iter {
        let step = e_step(cs, &mu, &sigma)?;
        trace.push(step.loglik);
        let (mu_new, sigma_new) = m_step(&step);
        iterations += 1;
        if mu_new.iter().chain(sigma_new.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate {
                iteration: iterations,
            });
        }
        delta = max_abs(&(&sigma_new - &sigma)).max((&mu_new - &mu).amax());
        mu = mu_new;
        sigma = sigma_new;
        if delta <= config.tol {
            converged = true;
            break;
        }
    }
    trace.push(quasi_loglik(cs, &mu, &sigma)?);
    log::debug!(
        "EM {}: {iterations} iterations, delta {delta:e}, converged {converged}",
        cs.month
    );
    Ok(CovModel {
        month: cs.month,
        predictor_ids: cs.predictor_ids.clone(),
        mu,
        sigma,
        iterations,
        converged,
        final_delta: delta,
        quasi_loglik_trace: trace,
    })
}

/// Replaces missing cells by their conditional means under `model`.
pub fn impute_em(cs: &CrossSection, model: &CovModel) -> Result<DMatrix<f64>> {
    if model.predictor_ids != cs.predictor_ids {
        return Err(Error::PredictorMismatch);
    }
    impute_conditional(cs, &model.mu, &model.sigma)
}

pub fn impute_conditional(
    cs: &CrossSection,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_params(cs, mu, sigma)?;
    let solvers = solve_patterns(cs, sigma)?;
    let mut out = cs.values.clone();
    for i in 0..cs.n() {
        let x = row_of(cs, i);
        let e = solvers[cs.row_pattern()[i]].fill(&x, mu);
        for j in 0..cs.j() {
            if !cs.mask[(i, j)] {
                out[(i, j)] = e[j];
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    iterations: usize,
    converged: bool,
    final_delta: f64,
    quasi_loglik_trace: Vec<f64>,
}

impl CovModel {
    /// `predictor,mu`
    pub fn write_mu_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["predictor", "mu"])?;
        for (p, m) in self.predictor_ids.iter().zip(self.mu.iter()) {
            w.write_record([p.clone(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Dense matrix with predictor ids labelling rows and columns.
    pub fn write_sigma_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("predictor")];
        header.extend(self.predictor_ids.iter().cloned());
        w.write_record(&header)?;
        for (r, p) in self.predictor_ids.iter().enumerate() {
            let mut rec = vec![p.clone()];
            rec.extend(self.sigma.row(r).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar_json<W: Write>(&self, out: W) -> Result<()> {
        let side = Sidecar {
            iterations: self.iterations,
            converged: self.converged,
            final_delta: self.final_delta,
            quasi_loglik_trace: self.quasi_loglik_trace.clone(),
        };
        serde_json::to_writer_pretty(out, &side)?;
        Ok(())
    }
}

/// Reads a matrix written by [`CovModel::write_sigma_csv`].
pub fn read_sigma_csv<R: std::io::Read>(input: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let bad = |line: u64, message: String| Error::Parse {
        path: "sigma".into(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_reader(input);
    let ids: Vec<String> = rdr.headers()?.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let j = ids.len();
    let mut sigma = DMatrix::zeros(j, j);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rows >= j || rec.len() != j + 1 || rec[0].trim() != ids[rows] {
            return Err(bad(line, "matrix is not square or rows are out of order".into()));
        }
        for c in 0..j {
            sigma[(rows, c)] = rec[c + 1]
                .trim()
                .parse()
                .map_err(|_| bad(line, format!("not a number: {:?}", &rec[c + 1])))?;
        }
        rows += 1;
    }
    if rows != j {
        return Err(bad(rows as u64 + 1, format!("expected {j} rows")));
    }
    Ok((ids, sigma))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::sorted_eigen;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ym() -> YearMonth {
        YearMonth::from_yyyymm(200001).unwrap()
    }

    /// Draws `n` rows from N(0, Σ) and hides each cell with probability `miss`,
    /// keeping at least one observed cell per row.
    pub(crate) fn mvn_mcar(sigma: &DMatrix<f64>, n: usize, miss: f64, seed: u64) -> CrossSection {
        let j = sigma.nrows();
        let l = Cholesky::new(sigma.clone()).unwrap().unpack();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = z * l.transpose();
        let mut mask = DMatrix::from_fn(n, j, |_, _| rng.random::<f64>() >= miss);
        for i in 0..n {
            if (0..j).all(|c| !mask[(i, c)]) {
                mask[(i, rng.random_range(0..j))] = true;
            }
        }
        CrossSection::anonymous(ym(), x, mask).unwrap()
    }

    fn equicorrelated(j: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(j, j, |a, b| if a == b { 1.0 } else { rho })
    }

    #[test]
    fn bivariate_conditional_moments() {
        let sigma = equicorrelated(2, 0.6);
        let mu = DVector::zeros(2);
        let m = conditional_moments(0, &[Some(1.5), None], &mu, &sigma).unwrap();
        assert_eq!(m.e[0], 1.5);
        assert_relative_eq!(m.e[1], 0.9, epsilon = 1e-7);
        assert_relative_eq!(m.s[(1, 1)] - m.e[1] * m.e[1], 1.0 - 0.36, epsilon = 1e-7);
        assert_relative_eq!(m.s[(0, 1)], 1.5 * m.e[1]);
    }

    #[test]
    fn full_and_empty_rows() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mu = DVector::zeros(2);
        let m = conditional_moments(3, &[Some(1.0), Some(-2.0)], &mu, &sigma).unwrap();
        assert_eq!(m.e, DVector::from_vec(vec![1.0, -2.0]));
        assert_eq!(m.s, &m.e * m.e.transpose());
        let m = conditional_moments(3, &[None, None], &mu, &sigma).unwrap();
        assert_eq!(m.e, mu);
        assert_eq!(m.s, sigma);
    }

    #[test]
    fn complete_data_converges_at_once() {
        let cs = mvn_mcar(&equicorrelated(4, 0.4), 300, 0.0, 1);
        let model = em_fit(&cs, &EmConfig::default()).unwrap();
        assert!(model.converged);
        assert_eq!(model.iterations, 1);
        let n = cs.n() as f64;
        for a in 0..4 {
            let ma: f64 = (0..cs.n()).map(|i| cs.values[(i, a)]).sum::<f64>() / n;
            assert_relative_eq!(model.mu[a], ma, epsilon = 1e-12);
            for b in 0..4 {
                let mb: f64 = (0..cs.n()).map(|i| cs.values[(i, b)]).sum::<f64>() / n;
                let c: f64 = (0..cs.n())
                    .map(|i| (cs.values[(i, a)] - ma) * (cs.values[(i, b)] - mb))
                    .sum::<f64>()
                    / n;
                assert_relative_eq!(model.sigma[(a, b)], c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn monotone_bivariate_matches_factored_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let mut rows = Vec::new();
        for i in 0..n {
            let x1: f64 = rng.sample(StandardNormal);
            let x2 = 0.5 + 0.7 * x1 + 0.6 * rng.sample::<f64, _>(StandardNormal);
            rows.push(vec![Some(x1), (i % 3 != 0).then_some(x2)]);
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        let cs = CrossSection::from_rows(ym(), ids, vec!["a".into(), "b".into()], &rows).unwrap();
        let model = em_fit(
            &cs,
            &EmConfig {
                tol: 1e-12,
                max_iter: 100_000,
            },
        )
        .unwrap();

        // Factored likelihood: moments of X1 from all rows, regression of X2 on X1
        // from complete rows.
        let x1: Vec<f64> = rows.iter().map(|r| r[0].unwrap()).collect();
        let m1 = x1.iter().sum::<f64>() / n as f64;
        let v1 = x1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / n as f64;
        let cc: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r[1].map(|b| (r[0].unwrap(), b)))
            .collect();
        let k = cc.len() as f64;
        let ca = cc.iter().map(|p| p.0).sum::<f64>() / k;
        let cb = cc.iter().map(|p| p.1).sum::<f64>() / k;
        let saa = cc.iter().map(|p| (p.0 - ca).powi(2)).sum::<f64>() / k;
        let sab = cc.iter().map(|p| (p.0 - ca) * (p.1 - cb)).sum::<f64>() / k;
        let sbb = cc.iter().map(|p| (p.1 - cb).powi(2)).sum::<f64>() / k;
        let beta = sab / saa;
        let alpha = cb - beta * ca;
        let resid = sbb - beta * sab;
        let m2 = alpha + beta * m1;
        let v12 = beta * v1;
        let v2 = resid + beta * beta * v1;

        assert_relative_eq!(model.mu[0], m1, epsilon = 1e-6);
        assert_relative_eq!(model.mu[1], m2, epsilon = 1e-6);
        assert_relative_eq!(model.sigma[(0, 0)], v1, epsilon = 1e-6);
        assert_relative_eq!(model.sigma[(0, 1)], v12, epsilon = 1e-6);
        assert_relative_eq!(model.sigma[(1, 1)], v2, epsilon = 1e-6);
    }

    fn nondecreasing(trace: &[f64]) -> bool {
        trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-8 * w[0].abs())
    }

    #[test]
    fn trace_increases_thirty_percent_mcar() {
        let sigma = DMatrix::from_fn(10, 10, |a, b| 0.7_f64.powi((a as i32 - b as i32).abs()));
        let cs = mvn_mcar(&sigma, 2000, 0.3, 4);
        let model = em_fit(&cs, &EmConfig::default()).unwrap();
        assert!(model.converged);
        assert!(model.quasi_loglik_trace.len() >= 3);
        assert!(nondecreasing(&model.quasi_loglik_trace));
        assert_eq!(model.quasi_loglik_trace.len(), model.iterations + 1);
    }

    #[test]
    fn single_cell_loglik() {
        let cs = CrossSection::from_rows(ym(), vec!["s".into()], vec!["p".into()], &[vec![Some(0.0)]])
            .unwrap();
        let ll = quasi_loglik(&cs, &DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-7);
    }

    #[test]
    fn complete_loglik_is_mvn() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.3, 0.1, -0.3, 1.5]);
        let cs = mvn_mcar(&sigma, 50, 0.0, 2);
        let mu = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let inv = sigma.clone().try_inverse().unwrap();
        let det = sigma.clone().determinant();
        let oracle: f64 = (0..cs.n())
            .map(|i| {
                let d = DVector::from_fn(3, |j, _| cs.values[(i, j)] - mu[j]);
                -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + det.ln() + (d.transpose() * &inv * &d)[0])
            })
            .sum();
        let ll = quasi_loglik(&cs, &mu, &sigma).unwrap();
        assert_relative_eq!(ll, oracle, max_relative = 1e-7);
    }

    fn model_for(cs: &CrossSection, mu: DVector<f64>, sigma: DMatrix<f64>) -> CovModel {
        CovModel {
            month: cs.month,
            predictor_ids: cs.predictor_ids.clone(),
            mu,
            sigma,
            iterations: 0,
            converged: true,
            final_delta: 0.0,
            quasi_loglik_trace: vec![],
        }
    }

    #[test]
    fn identity_sigma_imputes_means() {
        let cs = mvn_mcar(&DMatrix::identity(3, 3), 40, 0.4, 3);
        let mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let filled = impute_em(&cs, &model_for(&cs, mu, DMatrix::identity(3, 3))).unwrap();
        for i in 0..cs.n() {
            for j in 0..3 {
                if !cs.mask[(i, j)] {
                    assert_relative_eq!(filled[(i, j)], (j + 1) as f64, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rho_point_nine() {
        let cs = CrossSection::from_rows(
            ym(),
            vec!["s".into()],
            vec!["a".into(), "b".into()],
            &[vec![Some(2.0), None]],
        )
        .unwrap();
        let filled = impute_em(&cs, &model_for(&cs, DVector::zeros(2), equicorrelated(2, 0.9))).unwrap();
        assert_relative_eq!(filled[(0, 1)], 1.8, epsilon = 1e-7);
        assert_eq!(filled[(0, 0)], 2.0);
    }

    #[test]
    fn complete_matrix_unchanged_and_mismatch_rejected() {
        let cs = mvn_mcar(&equicorrelated(3, 0.2), 20, 0.0, 5);
        let m = model_for(&cs, DVector::zeros(3), equicorrelated(3, 0.2));
        assert_eq!(impute_em(&cs, &m).unwrap(), cs.values);
        let mut other = m.clone();
        other.predictor_ids[0] = "zz".into();
        assert!(matches!(impute_em(&cs, &other), Err(Error::PredictorMismatch)));
    }

    #[test]
    fn grouped_equals_rowwise_bitwise() {
        let sigma = DMatrix::from_fn(6, 6, |a, b| 0.5_f64.powi((a as i32 - b as i32).abs()));
        let cs = mvn_mcar(&sigma, 500, 0.35, 6);
        assert!(cs.patterns().len() < cs.n());
        let (mut mu, mut sig) = initial_params(&cs).unwrap();
        for _ in 0..5 {
            let g = e_step(&cs, &mu, &sig).unwrap();
            let r = e_step_rowwise(&cs, &mu, &sig).unwrap();
            assert_eq!(g.loglik.to_bits(), r.loglik.to_bits());
            let (mg, sg) = m_step(&g);
            let (mr, sr) = m_step(&r);
            assert_eq!(mg, mr);
            assert_eq!(sg, sr);
            mu = mg;
            sig = sg;
        }
    }

    #[test]
    fn thin_column_rejected() {
        let rows = vec![vec![Some(1.0), Some(1.0)], vec![Some(2.0), None], vec![Some(0.5), None]];
        let cs = CrossSection::from_rows(
            ym(),
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
            &rows,
        )
        .unwrap();
        assert!(matches!(em_fit(&cs, &EmConfig::default()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn fewer_rows_than_columns() {
        let cs = mvn_mcar(&equicorrelated(12, 0.3), 8, 0.2, 8);
        let model = em_fit(&cs, &EmConfig { tol: 1e-4, max_iter: 300 }).unwrap();
        assert!(model.sigma.iter().all(|v| v.is_finite()));
        let filled = impute_em(&cs, &model).unwrap();
        assert!(filled.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn model_files() {
        let cs = mvn_mcar(&equicorrelated(2, 0.3), 30, 0.2, 1);
        let model = em_fit(&cs, &EmConfig::default()).unwrap();
        let mut mu = Vec::new();
        model.write_mu_csv(&mut mu).unwrap();
        assert!(String::from_utf8(mu).unwrap().starts_with("predictor,mu\np0,"));
        let mut sig = Vec::new();
        model.write_sigma_csv(&mut sig).unwrap();
        let sig = String::from_utf8(sig).unwrap();
        assert_eq!(sig.lines().next().unwrap(), "predictor,p0,p1");
        assert_eq!(sig.lines().count(), 3);
        let (ids, back) = read_sigma_csv(sig.as_bytes()).unwrap();
        assert_eq!(ids, model.predictor_ids);
        assert_eq!(back, model.sigma);
        assert!(read_sigma_csv("predictor,p0,p1\np0,1,0\n".as_bytes()).is_err());
        let mut js = Vec::new();
        model.write_sidecar_json(&mut js).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&js).unwrap();
        assert_eq!(v["iterations"], model.iterations);
        assert_eq!(v["converged"], true);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn loglik_never_decreases(
            j in 2usize..=15,
            n in 30usize..=500,
            miss in 0.0f64..0.6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(j, j, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sigma = &a * a.transpose() / j as f64 + DMatrix::identity(j, j) * 0.2;
            let cs = mvn_mcar(&sigma, n, miss, seed ^ 0xabc);
            prop_assume!((0..j).all(|c| cs.observed_count(c) >= 2));
            let model = em_fit(&cs, &EmConfig { tol: 1e-4, max_iter: 2000 }).unwrap();
            prop_assert!(nondecreasing(&model.quasi_loglik_trace), "{:?}", model.quasi_loglik_trace);
            let s = &model.sigma;
            prop_assert!(max_abs(&(s - s.transpose())) < 1e-12);
            let (vals, _) = sorted_eigen(s);
            prop_assert!(vals[j - 1] >= -1e-8 * vals[0]);
            let filled = impute_em(&cs, &model).unwrap();
            for i in 0..cs.n() {
                for c in 0..j {
                    if cs.mask[(i, c)] {
                        prop_assert_eq!(filled[(i, c)], cs.values[(i, c)]);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>()) {
            let sigma = DMatrix::from_fn(5, 5, |a, b| 0.6_f64.powi((a as i32 - b as i32).abs()));
            let cs = mvn_mcar(&sigma, 200, 0.3, seed);
            let perm = [3usize, 0, 4, 1, 2];
            let cp = cs.select_columns(&perm).unwrap();
            prop_assume!(cp.n() == cs.n());
            let cfg = EmConfig { tol: 1e-10, max_iter: 20_000 };
            let a = em_fit(&cs, &cfg).unwrap();
            let b = em_fit(&cp, &cfg).unwrap();
            for (r, &pr) in perm.iter().enumerate() {
                prop_assert!((b.mu[r] - a.mu[pr]).abs() < 1e-7);
                for (c, &pc) in perm.iter().enumerate() {
                    prop_assert!((b.sigma[(r, c)] - a.sigma[(pr, pc)]).abs() < 1e-7);
                }
            }
        }
    }
}
