//! Subcommand pipelines.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use xsmiss::backtest::{
    rolling_run, single_predictor_strategy, write_summary_csv, write_tuning_csv, BacktestData, Forecaster,
    Handling, ImputedMonth, PortfolioSeries, SingleSpec, StrategySpec, TuningRecord, TuningSpec, Weighting,
};
use xsmiss::em::{em_fit, read_sigma_csv, EmConfig};
use xsmiss::imputers::{impute_range, run_imputer, ImputedCrossSection, ImputerSpec};
use xsmiss::panel::{ColumnSchema, PanelBuilder, PredictorPanel};
use xsmiss::simlab::{run_dim_experiment, signal_on_pcs, synth_panel, SimConfig, SynthConfig};
use xsmiss::spectral::{
    available_case_corr, corr_difference_stats, cov_to_corr, imputation_slopes, pca_spectrum, write_corr_pairs_csv,
    write_quantiles_csv, write_spectrum_csv, write_values_csv, SUMMARY_PROBS,
};
use xsmiss::transform::{write_params_csv, TransformParams, TransformedPanel};
use xsmiss::{Error, YearMonth};

use crate::{
    BacktestArgs, CliError, CliResult, DiagnoseArgs, ImputeArgs, ImputerArgs, PredictorChoice, RunConfig,
    SimulateArgs, SynthArgs, TransformArgs,
};

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", path.display())))
}

fn load(run: &RunConfig) -> CliResult<PredictorPanel> {
    let mut b = PanelBuilder::new();
    b.read_observations(&run.input, &ColumnSchema::default())?;
    if let Some(p) = &run.returns {
        b.read_market(p)?;
    }
    if let Some(p) = &run.meta {
        b.read_meta(p)?;
    }
    if let Some(p) = &run.industries {
        b.read_industries(p)?;
    }
    let panel = b.build();
    Ok(match run.months {
        Some(r) => panel.restrict(r.start, r.end),
        None => panel,
    })
}

fn select_predictors(panel: &PredictorPanel, choice: &PredictorChoice) -> CliResult<Vec<String>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for m in panel.months() {
        for (p, n) in panel.observed_counts(m) {
            *counts.entry(p.to_string()).or_default() += n;
        }
    }
    let preds = match choice {
        PredictorChoice::All => counts.into_keys().collect(),
        PredictorChoice::Top(n) => {
            let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.into_iter().take(*n).map(|r| r.0).collect()
        }
        PredictorChoice::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read predictor list {}: {e}", path.display())))?;
            let list: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if let Some(p) = list.iter().find(|p| !counts.contains_key(*p)) {
                return Err(CliError::Core(Error::InsufficientData(format!("predictor {p} has no observations"))));
            }
            list
        }
    };
    if preds.is_empty() {
        return Err(CliError::Core(Error::InsufficientData("no predictors selected".into())));
    }
    Ok(preds)
}

fn imputer_spec(a: &ImputerArgs) -> CliResult<ImputerSpec> {
    let mut spec = ImputerSpec::new(a.method);
    spec.em = EmConfig {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    spec.factors = a.factors;
    spec.ar1_window = a.ar1_window;
    spec.lookback = a.lookback;
    spec.validate()?;
    Ok(spec)
}

fn write_params(tp: &TransformedPanel, dir: &Path) -> CliResult<()> {
    let params: Vec<TransformParams> = tp.all_params().cloned().collect();
    write_params_csv(&params, create(dir, "transform_params.csv")?)?;
    Ok(())
}

fn fit_transforms(panel: PredictorPanel) -> CliResult<TransformedPanel> {
    let t0 = Instant::now();
    let tp = TransformedPanel::fit(panel)?;
    log::info!("transforms fitted in {:.2}s", t0.elapsed().as_secs_f64());
    Ok(tp)
}

pub fn cmd_transform(a: &TransformArgs) -> CliResult<()> {
    out_dir(&a.run.out)?;
    let tp = fit_transforms(load(&a.run)?)?;
    write_params(&tp, &a.run.out)?;
    tp.z.write_observations_csv(create(&a.run.out, "transformed.csv")?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MonthEntry {
    yyyymm: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    stocks: usize,
    missing_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_delta: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    method: String,
    predictors: Vec<String>,
    months: Vec<MonthEntry>,
}

fn failure(failed: &[(YearMonth, &Error)], total: usize) -> CliResult<()> {
    match failed.first() {
        None => Ok(()),
        Some((m, e)) => Err(CliError::Partial {
            failed: failed.len(),
            total,
            first: format!("{m}: {e}"),
            class: e.class(),
        }),
    }
}

fn write_month(ic: &ImputedCrossSection, dir: &Path) -> CliResult<()> {
    let m = ic.cs.month;
    ic.write_filled_csv(create(dir, &format!("filled_{m}.csv"))?)?;
    ic.write_provenance_csv(create(dir, &format!("provenance_{m}.csv"))?)?;
    if let Some(model) = &ic.model {
        model.write_mu_csv(create(dir, &format!("mu_{m}.csv"))?)?;
        model.write_sigma_csv(create(dir, &format!("sigma_{m}.csv"))?)?;
        model.write_sidecar_json(create(dir, &format!("em_{m}.json"))?)?;
    }
    Ok(())
}

/// Imputes every month in parallel, writes each month's files and finally the
/// manifest. A failing month is recorded and the others still complete.
pub fn cmd_impute(a: &ImputeArgs) -> CliResult<()> {
    let spec = imputer_spec(&a.imputer)?;
    out_dir(&a.run.out)?;
    let tp = fit_transforms(load(&a.run)?)?;
    let preds = select_predictors(&tp.raw, &a.run.predictors)?;
    let months: Vec<YearMonth> = tp.z.months().collect();
    write_params(&tp, &a.run.out)?;
    let dir = &a.run.out;
    let results: Vec<Result<ImputedCrossSection, Error>> = months
        .par_iter()
        .map(|&m| {
            let t0 = Instant::now();
            let res = run_imputer(&spec, &tp, m, &preds).and_then(|ic| {
                write_month(&ic, dir).map_err(|e| match e {
                    CliError::Core(e) => e,
                    other => Error::InvalidArgument(other.to_string()),
                })?;
                Ok(ic)
            });
            let secs = t0.elapsed().as_secs_f64();
            match &res {
                Ok(ic) => match &ic.model {
                    Some(model) => log::info!(
                        "{m}: {} stocks, {} iterations, delta {:.3e}, {secs:.2}s",
                        ic.cs.n(),
                        model.iterations,
                        model.final_delta
                    ),
                    None => log::info!("{m}: {} stocks, {secs:.2}s", ic.cs.n()),
                },
                Err(e) => log::warn!("{m}: failed after {secs:.2}s: {e}"),
            }
            res
        })
        .collect();
    let mut entries = Vec::with_capacity(months.len());
    let mut failed = Vec::new();
    for (m, res) in months.iter().zip(&results) {
        entries.push(match res {
            Ok(ic) => MonthEntry {
                yyyymm: m.to_string(),
                status: "ok",
                error: None,
                stocks: ic.cs.n(),
                missing_cells: ic.cs.n() * ic.cs.j() - ic.cs.n_observed(),
                iterations: ic.model.as_ref().map(|c| c.iterations),
                converged: ic.model.as_ref().map(|c| c.converged),
                final_delta: ic.model.as_ref().map(|c| c.final_delta),
            },
            Err(e) => {
                failed.push((*m, e));
                MonthEntry {
                    yyyymm: m.to_string(),
                    status: "failed",
                    error: Some(e.to_string()),
                    stocks: 0,
                    missing_cells: 0,
                    iterations: None,
                    converged: None,
                    final_delta: None,
                }
            }
        });
    }
    let manifest = Manifest {
        method: spec.method.name().to_string(),
        predictors: preds,
        months: entries,
    };
    let mut w = create(dir, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(Error::from)?;
    w.flush()?;
    failure(&failed, months.len())
}

#[derive(serde::Deserialize)]
struct ManifestPredictors {
    predictors: Vec<String>,
}

fn manifest_predictors(dir: &Path) -> CliResult<Vec<String>> {
    let path = dir.join("manifest.json");
    let f = File::open(&path)
        .map_err(|e| Error::InsufficientData(format!("missing artifact {}: {e}", path.display())))?;
    let m: ManifestPredictors = serde_json::from_reader(std::io::BufReader::new(f)).map_err(Error::from)?;
    Ok(m.predictors)
}

fn diagnose_month(
    a: &DiagnoseArgs,
    tp: &TransformedPanel,
    preds: &[String],
    month: YearMonth,
) -> Result<(), Error> {
    let dir = &a.run.out;
    let file = |name: &str| -> Result<BufWriter<File>, Error> {
        Ok(BufWriter::new(File::create(dir.join(format!("{name}_{month}.csv")))?))
    };
    let cs = tp.z.cross_section(month, preds)?;
    let sigma = match &a.artifacts {
        Some(art) => {
            let path = art.join(format!("sigma_{month}.csv"));
            let f = File::open(&path).map_err(|e| {
                Error::InsufficientData(format!("missing artifact {}: {e}", path.display()))
            })?;
            let (ids, sigma) = read_sigma_csv(f)?;
            if ids != preds {
                return Err(Error::PredictorMismatch);
            }
            sigma
        }
        None => em_fit(&cs, &EmConfig { tol: a.tol, max_iter: a.max_iter })?.sigma,
    };
    let em = cov_to_corr(&sigma)?;
    let obs = available_case_corr(&cs);
    write_corr_pairs_csv(preds, &obs.values, Some(&obs.defined), file("corr_obs")?)?;
    write_corr_pairs_csv(preds, &em, None, file("corr_em")?)?;
    let diff = corr_difference_stats(&em, &obs)?;
    let mut w = csv::Writer::from_writer(file("corr_diff")?);
    w.write_record(["quantile", "level", "percent"])?;
    for (k, p) in SUMMARY_PROBS.iter().enumerate() {
        w.write_record([p.to_string(), diff.level_quantiles[k].to_string(), diff.percent_quantiles[k].to_string()])?;
    }
    w.flush()?;
    write_spectrum_csv(&pca_spectrum(&em)?, file("spectrum")?)?;
    let slopes = imputation_slopes(&em, &cs.mask)?;
    write_values_csv("slope", &slopes.slopes, file("slopes")?)?;
    write_quantiles_csv(&SUMMARY_PROBS, &slopes.quantiles, file("slope_quantiles")?)?;
    log::info!(
        "{month}: mean |corr diff| {:.4}, mean |slope| {:.4}",
        diff.mean_abs_level,
        slopes.mean_abs
    );
    Ok(())
}

/// Writes `<report>_<yyyymm>.csv` files for each month of the range: available-case
/// and EM correlations, their difference quantiles, the EM spectrum and the implied
/// imputation slopes.
pub fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    if let Some(dir) = &a.artifacts {
        if !dir.is_dir() {
            return Err(CliError::Core(Error::InsufficientData(format!(
                "artifact directory {} does not exist",
                dir.display()
            ))));
        }
    }
    out_dir(&a.run.out)?;
    let tp = fit_transforms(load(&a.run)?)?;
    let preds = match &a.artifacts {
        Some(dir) => manifest_predictors(dir)?,
        None => select_predictors(&tp.raw, &a.run.predictors)?,
    };
    let months: Vec<YearMonth> = tp.z.months().collect();
    let results: Vec<Result<(), Error>> = months.par_iter().map(|&m| diagnose_month(a, &tp, &preds, m)).collect();
    let failed: Vec<(YearMonth, &Error)> = months
        .iter()
        .zip(&results)
        .filter_map(|(m, r)| r.as_ref().err().map(|e| (*m, e)))
        .collect();
    for (m, e) in &failed {
        log::warn!("{m}: {e}");
    }
    failure(&failed, months.len())
}

fn shape_tag(shape: f64) -> String {
    format!("shape{shape}")
}

/// Runs the dimensionality experiment for each requested shape.
pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    out_dir(&a.out)?;
    let mut summary = csv::Writer::from_writer(create(&a.out, "simulate_summary.csv")?);
    summary.write_record(["shape", "mean_abs_slope", "share_5pc", "share_10pc"]).map_err(Error::from)?;
    for &shape in &a.shape.0 {
        let cfg = SimConfig {
            j: a.j,
            beta_shape: shape,
            miss_prob: a.miss_prob,
            n_sims: a.sims,
            rows: a.rows,
            seed: a.seed,
        };
        let t0 = Instant::now();
        let report = run_dim_experiment(&cfg)?;
        let tag = shape_tag(shape);
        report.write_corr_quantiles_csv(create(&a.out, &format!("corr_quantiles_{tag}.csv"))?)?;
        report.write_slope_quantiles_csv(create(&a.out, &format!("slope_quantiles_{tag}.csv"))?)?;
        report.write_variance_share_csv(create(&a.out, &format!("variance_share_{tag}.csv"))?)?;
        let mut w = create(&a.out, &format!("report_{tag}.json"))?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
        w.flush()?;
        let share = |k: usize| report.variance_share.get(k - 1).map_or(String::new(), f64::to_string);
        summary
            .write_record([shape.to_string(), report.mean_abs_slope.to_string(), share(5), share(10)])
            .map_err(Error::from)?;
        log::info!(
            "shape {shape}: mean |slope| {:.3}, 5 PCs {:.1}%, {:.1}s",
            report.mean_abs_slope,
            100.0 * report.variance_share.get(4).copied().unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    }
    summary.flush()?;
    Ok(())
}

fn random_rotation(j: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(j, j, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..j {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Synthetic panel with eigenvalues spaced linearly from `eig_max` to `eig_min` and
/// equal return variance from each of the first `signal_pcs` components.
pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    if a.j == 0 || a.n == 0 || a.months < 2 {
        return Err(CliError::Usage("need J ≥ 1, n ≥ 1 and at least two months".into()));
    }
    if !(a.eig_min > 0.0 && a.eig_max >= a.eig_min) {
        return Err(CliError::Usage("eigenvalues must satisfy 0 < eig-min ≤ eig-max".into()));
    }
    if a.signal_pcs > a.j {
        return Err(CliError::Usage("more signal components than predictors".into()));
    }
    out_dir(&a.out)?;
    let eig = DVector::from_fn(a.j, |k, _| {
        if a.j == 1 {
            a.eig_max
        } else {
            a.eig_max + (a.eig_min - a.eig_max) * k as f64 / (a.j - 1) as f64
        }
    });
    let sigma = if a.rotate {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed);
        let q = random_rotation(a.j, &mut rng);
        let s = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        (&s + s.transpose()) * 0.5
    } else {
        DMatrix::from_diagonal(&eig)
    };
    let pcs: Vec<(usize, f64)> = (0..a.signal_pcs).map(|k| (k, a.signal / eig[k].sqrt())).collect();
    let mut cfg = SynthConfig::new(sigma.clone(), a.n, a.months);
    cfg.start = a.start;
    cfg.beta = (!pcs.is_empty()).then(|| signal_on_pcs(&sigma, &pcs)).transpose()?;
    cfg.noise_sd = a.noise;
    cfg.persistence = a.persistence;
    cfg.miss_prob = a.miss_prob;
    cfg.seed = a.seed;
    let panel = synth_panel(&cfg)?;
    panel.write_observations_csv(create(&a.out, "observations.csv")?)?;
    panel.write_market_csv(create(&a.out, "market.csv")?)?;
    Ok(())
}

fn file_stem(series: &PortfolioSeries) -> String {
    match series.weighting {
        Weighting::Equal => series.strategy.clone(),
        Weighting::Value => format!("{}_vw", series.strategy),
    }
}

/// Imputes every month, then runs the requested strategies over the out-of-sample
/// range and writes `returns_<strategy>.csv`, `summary.csv` and, when tuning,
/// `tuning_log.csv`.
pub fn cmd_backtest(a: &BacktestArgs) -> CliResult<()> {
    let spec = imputer_spec(&a.imputer)?;
    let weightings = match a.weighting.as_str() {
        "both" => vec![Weighting::Equal, Weighting::Value],
        w => vec![w.parse::<Weighting>()?],
    };
    let handling = match a.handling.as_str() {
        "imputed" => Handling::Imputed,
        "observed" | "drop_missing" => Handling::DropMissing,
        other => return Err(CliError::Usage(format!("unknown handling {other:?}"))),
    };
    if a.run.returns.is_none() {
        return Err(CliError::Usage("backtests need --returns".into()));
    }
    out_dir(&a.run.out)?;
    let tp = fit_transforms(load(&a.run)?)?;
    let preds = match (&a.forecaster, &a.predictor) {
        (Forecaster::SinglePredictor, Some(p)) => {
            if !tp.raw.predictors().contains(p) {
                return Err(CliError::Usage(format!("unknown predictor {p}")));
            }
            vec![p.clone()]
        }
        (Forecaster::SinglePredictor, None) => {
            return Err(CliError::Usage("the single-predictor sort needs --predictor".into()))
        }
        _ => select_predictors(&tp.raw, &a.run.predictors)?,
    };
    let months: Vec<YearMonth> = tp.z.months().collect();
    let t0 = Instant::now();
    let imputed = impute_range(&spec, &tp, &months, &preds);
    let mut ok = Vec::new();
    for (m, r) in months.iter().zip(imputed) {
        match r {
            Ok(ic) => ok.push(ImputedMonth::from(&ic)),
            Err(e) => log::warn!("{m}: imputation failed, month left out: {e}"),
        }
    }
    log::info!("{} of {} months imputed in {:.1}s", ok.len(), months.len(), t0.elapsed().as_secs_f64());
    let first = ok.first().map(|m| m.month).ok_or_else(|| Error::InsufficientData("no month imputed".into()))?;
    let last = ok.last().map(|m| m.month).unwrap_or(first);
    let data = BacktestData::new(ok, &tp.raw)?;
    let (start, end) = match a.oos {
        Some(r) => (r.start, r.end),
        None if a.forecaster == Forecaster::SinglePredictor => (first.next(), last),
        None => (first.add_months(a.window as i64), last),
    };
    let mut all: Vec<PortfolioSeries> = Vec::new();
    let mut tuning: Vec<TuningRecord> = Vec::new();
    for &w in &weightings {
        if a.forecaster == Forecaster::SinglePredictor {
            let s = SingleSpec {
                predictor: preds[0].clone(),
                handling,
                leg_size: a.leg_size,
                min_obs: a.min_obs,
                weighting: w,
            };
            all.push(single_predictor_strategy(&s, &data, start, end)?);
            continue;
        }
        let ks: Vec<usize> = if a.tune || a.forecaster == Forecaster::Ols { vec![0] } else { a.k.0.clone() };
        for k in ks {
            let strategy = StrategySpec {
                forecaster: a.forecaster,
                k,
                window: a.window,
                weighting: w,
                tuning: a.tune.then(|| TuningSpec {
                    grid: a.grid.0.clone(),
                    month_of_year: a.tune_month,
                    ..TuningSpec::default()
                }),
            };
            let t0 = Instant::now();
            let res = rolling_run(&strategy, &data, start, end)?;
            log::info!(
                "{}: {} months, mean {:.2}%/yr, Sharpe {:.2}, {:.1}s",
                res.series.strategy,
                res.series.months.len(),
                res.series.annualized_mean(),
                res.series.annualized_sharpe(),
                t0.elapsed().as_secs_f64()
            );
            if w == weightings[0] {
                tuning.extend(res.tuning);
            }
            all.push(res.series);
        }
    }
    for s in &all {
        s.write_returns_csv(create(&a.run.out, &format!("returns_{}.csv", file_stem(s)))?)?;
    }
    write_summary_csv(&all, create(&a.run.out, "summary.csv")?)?;
    if a.tune {
        write_tuning_csv(&tuning, create(&a.run.out, "tuning_log.csv")?)?;
    }
    Ok(())
}

