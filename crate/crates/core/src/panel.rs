//! Long-format predictor panels, monthly cross-sections and missingness summaries.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::month::YearMonth;

/// Admissible predictor update periods, in months.
pub const UPDATE_PERIODS: [u32; 3] = [1, 3, 12];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketRecord {
    /// Return over the month, as a decimal fraction.
    pub ret: Option<f64>,
    pub cap: Option<f64>,
}

/// Column names of the long-format observation file.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub stock: String,
    pub month: String,
    pub predictor: String,
    pub value: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            stock: "stock_id".into(),
            month: "yyyymm".into(),
            predictor: "predictor".into(),
            value: "value".into(),
        }
    }
}

/// Immutable store of `(stock, month, predictor) -> value` observations together with
/// monthly returns, market caps and predictor update periods.
#[derive(Debug, Clone, Default)]
pub struct PredictorPanel {
    stocks: Vec<String>,
    stock_index: HashMap<String, u32>,
    predictors: Vec<String>,
    predictor_index: HashMap<String, u32>,
    cells: BTreeMap<YearMonth, BTreeMap<(u32, u32), f64>>,
    market: BTreeMap<YearMonth, HashMap<u32, MarketRecord>>,
    update_period: HashMap<u32, u32>,
    industry: HashMap<u32, String>,
    range: Option<(YearMonth, YearMonth)>,
}

/// Incremental, validating constructor for [`PredictorPanel`].
#[derive(Debug, Default)]
pub struct PanelBuilder {
    panel: PredictorPanel,
    declared: Option<(YearMonth, YearMonth)>,
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, u32>, name: &str) -> u32 {
    if let Some(&i) = index.get(name) {
        return i;
    }
    let i = names.len() as u32;
    names.push(name.to_string());
    index.insert(name.to_string(), i);
    i
}

impl PanelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares the panel's date range; later inserts outside it are rejected.
    pub fn with_range(mut self, start: YearMonth, end: YearMonth) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidArgument(format!("empty range {start}:{end}")));
        }
        self.declared = Some((start, end));
        Ok(self)
    }

    fn check_range(&self, month: YearMonth) -> Result<()> {
        if let Some((a, b)) = self.declared {
            if month < a || month > b {
                return Err(Error::InvalidArgument(format!(
                    "month {month} outside declared range {a}:{b}"
                )));
            }
        }
        Ok(())
    }

    pub fn add_observation(
        &mut self,
        stock: &str,
        month: YearMonth,
        predictor: &str,
        value: f64,
    ) -> Result<()> {
        self.add_observation_at(stock, month, predictor, value, 0)
    }

    fn add_observation_at(
        &mut self,
        stock: &str,
        month: YearMonth,
        predictor: &str,
        value: f64,
        line: u64,
    ) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite { line });
        }
        self.check_range(month)?;
        let p = &mut self.panel;
        let s = intern(&mut p.stocks, &mut p.stock_index, stock);
        let k = intern(&mut p.predictors, &mut p.predictor_index, predictor);
        let slot = p.cells.entry(month).or_default();
        if slot.insert((s, k), value).is_some() {
            return Err(Error::DuplicateKey {
                key: format!("({stock}, {month}, {predictor})"),
                line,
            });
        }
        Ok(())
    }

    pub fn add_market(
        &mut self,
        stock: &str,
        month: YearMonth,
        ret: Option<f64>,
        cap: Option<f64>,
    ) -> Result<()> {
        self.add_market_at(stock, month, ret, cap, 0)
    }

    fn add_market_at(
        &mut self,
        stock: &str,
        month: YearMonth,
        ret: Option<f64>,
        cap: Option<f64>,
        line: u64,
    ) -> Result<()> {
        if ret.is_some_and(|r| !r.is_finite()) || cap.is_some_and(|c| !c.is_finite()) {
            return Err(Error::NonFinite { line });
        }
        if cap.is_some_and(|c| c <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "market cap must be positive (line {line})"
            )));
        }
        self.check_range(month)?;
        let p = &mut self.panel;
        let s = intern(&mut p.stocks, &mut p.stock_index, stock);
        let slot = p.market.entry(month).or_default();
        if slot.insert(s, MarketRecord { ret, cap }).is_some() {
            return Err(Error::DuplicateKey {
                key: format!("({stock}, {month})"),
                line,
            });
        }
        Ok(())
    }

    pub fn set_update_period(&mut self, predictor: &str, months: u32) -> Result<()> {
        if !UPDATE_PERIODS.contains(&months) {
            return Err(Error::InvalidArgument(format!(
                "update period for {predictor} must be 1, 3 or 12, got {months}"
            )));
        }
        let p = &mut self.panel;
        let k = intern(&mut p.predictors, &mut p.predictor_index, predictor);
        p.update_period.insert(k, months);
        Ok(())
    }

    /// Assigns an industry code to a stock; later assignments replace earlier ones.
    pub fn set_industry(&mut self, stock: &str, code: &str) {
        let p = &mut self.panel;
        let s = intern(&mut p.stocks, &mut p.stock_index, stock);
        p.industry.insert(s, code.to_string());
    }

    /// Reads `stock_id,industry`.
    pub fn read_industries(&mut self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        expect_header(&mut rdr, &["stock_id", "industry"], &name)?;
        for rec in rdr.records() {
            let rec = rec?;
            let stock = rec.get(0).unwrap_or("").trim();
            let code = rec.get(1).unwrap_or("").trim();
            if stock.is_empty() || code.is_empty() {
                return Err(Error::Parse {
                    path: name.clone(),
                    line: rec.position().map_or(0, |p| p.line()),
                    message: "empty stock_id or industry".into(),
                });
            }
            self.set_industry(stock, code);
        }
        Ok(())
    }

    /// Reads a long-format observation CSV.
    pub fn read_observations(&mut self, path: &Path, schema: &ColumnSchema) -> Result<()> {
        let name = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |wanted: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == wanted)
                .ok_or_else(|| Error::Parse {
                    path: name.clone(),
                    line: 1,
                    message: format!("missing column {wanted:?}"),
                })
        };
        let (cs, cm, cp, cv) = (
            col(&schema.stock)?,
            col(&schema.month)?,
            col(&schema.predictor)?,
            col(&schema.value)?,
        );
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let month: YearMonth = field(cm).parse().map_err(|_| Error::Parse {
                path: name.clone(),
                line,
                message: format!("bad month {:?}", field(cm)),
            })?;
            let value = parse_number(field(cv), &name, line)?;
            self.add_observation_at(field(cs), month, field(cp), value, line)?;
        }
        Ok(())
    }

    /// Reads `stock_id,yyyymm,ret,mktcap`; empty `ret` or `mktcap` fields are allowed.
    pub fn read_market(&mut self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        expect_header(&mut rdr, &["stock_id", "yyyymm", "ret", "mktcap"], &name)?;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let month: YearMonth = field(1).parse().map_err(|_| Error::Parse {
                path: name.clone(),
                line,
                message: format!("bad month {:?}", field(1)),
            })?;
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse_number(s, &name, line).map(Some)
                }
            };
            let (ret, cap) = (opt(field(2))?, opt(field(3))?);
            self.add_market_at(field(0), month, ret, cap, line)?;
        }
        Ok(())
    }

    /// Reads `predictor,update_months`.
    pub fn read_meta(&mut self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        expect_header(&mut rdr, &["predictor", "update_months"], &name)?;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let h: u32 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Parse {
                    path: name.clone(),
                    line,
                    message: "bad update_months".into(),
                })?;
            self.set_update_period(rec.get(0).unwrap_or("").trim(), h)?;
        }
        Ok(())
    }

    pub fn build(mut self) -> PredictorPanel {
        let first = self
            .panel
            .cells
            .keys()
            .chain(self.panel.market.keys())
            .min()
            .copied();
        let last = self
            .panel
            .cells
            .keys()
            .chain(self.panel.market.keys())
            .max()
            .copied();
        self.panel.range = self.declared.or(first.zip(last));
        self.panel
    }
}

fn parse_number(s: &str, path: &str, line: u64) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        message: format!("not a number: {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite { line });
    }
    Ok(v)
}

fn expect_header<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    expected: &[&str],
    path: &str,
) -> Result<()> {
    let headers = rdr.headers()?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

/// Loads a panel from an observation file plus optional market and metadata files.
pub fn load_panel(
    observations: &Path,
    schema: &ColumnSchema,
    market: Option<&Path>,
    meta: Option<&Path>,
) -> Result<PredictorPanel> {
    let mut b = PanelBuilder::new();
    b.read_observations(observations, schema)?;
    if let Some(p) = market {
        b.read_market(p)?;
    }
    if let Some(p) = meta {
        b.read_meta(p)?;
    }
    Ok(b.build())
}

impl PredictorPanel {
    pub fn range(&self) -> Option<(YearMonth, YearMonth)> {
        self.range
    }

    /// Months that carry at least one predictor observation.
    pub fn months(&self) -> impl Iterator<Item = YearMonth> + '_ {
        self.cells.keys().copied()
    }

    pub fn predictors(&self) -> &[String] {
        &self.predictors
    }

    pub fn stocks(&self) -> &[String] {
        &self.stocks
    }

    pub fn n_observations(&self) -> usize {
        self.cells.values().map(BTreeMap::len).sum()
    }

    pub fn value(&self, stock: &str, month: YearMonth, predictor: &str) -> Option<f64> {
        let s = *self.stock_index.get(stock)?;
        let k = *self.predictor_index.get(predictor)?;
        self.cells.get(&month)?.get(&(s, k)).copied()
    }

    pub fn market(&self, stock: &str, month: YearMonth) -> Option<MarketRecord> {
        let s = *self.stock_index.get(stock)?;
        self.market.get(&month)?.get(&s).copied()
    }

    pub fn ret(&self, stock: &str, month: YearMonth) -> Option<f64> {
        self.market(stock, month).and_then(|m| m.ret)
    }

    pub fn cap(&self, stock: &str, month: YearMonth) -> Option<f64> {
        self.market(stock, month).and_then(|m| m.cap)
    }

    /// Update period `h` of a predictor; 1 when no metadata was supplied.
    pub fn update_period(&self, predictor: &str) -> u32 {
        self.predictor_index
            .get(predictor)
            .and_then(|k| self.update_period.get(k))
            .copied()
            .unwrap_or(1)
    }

    pub fn industry(&self, stock: &str) -> Option<&str> {
        let s = self.stock_index.get(stock)?;
        self.industry.get(s).map(String::as_str)
    }

    /// Observed `(stock, value)` pairs of one predictor in one month, ordered by stock
    /// insertion index.
    pub fn column(&self, month: YearMonth, predictor: &str) -> Vec<(&str, f64)> {
        let Some(&k) = self.predictor_index.get(predictor) else {
            return Vec::new();
        };
        let Some(cells) = self.cells.get(&month) else {
            return Vec::new();
        };
        cells
            .iter()
            .filter(|((_, kk), _)| *kk == k)
            .map(|((s, _), v)| (self.stocks[*s as usize].as_str(), *v))
            .collect()
    }

    /// Number of observations per predictor in `month`.
    pub fn observed_counts(&self, month: YearMonth) -> BTreeMap<&str, usize> {
        let mut out: BTreeMap<&str, usize> = BTreeMap::new();
        if let Some(cells) = self.cells.get(&month) {
            for (_, k) in cells.keys() {
                *out.entry(self.predictors[*k as usize].as_str()).or_default() += 1;
            }
        }
        out
    }

    /// Predictors ranked by observation count in `month` (ties by id), counting only
    /// those with at least one observation.
    pub fn most_observed(&self, month: YearMonth) -> Vec<String> {
        let mut ranked: Vec<(&str, usize)> = self.observed_counts(month).into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.into_iter().map(|(p, _)| p.to_string()).collect()
    }

    /// Returns a copy of the panel whose cell values are replaced by `f(month, predictor,
    /// stock, value)`; cells mapped to `None` are dropped.
    pub fn map_values<F>(&self, mut f: F) -> PredictorPanel
    where
        F: FnMut(YearMonth, &str, &str, f64) -> Option<f64>,
    {
        let mut out = self.clone();
        for (month, cells) in out.cells.iter_mut() {
            cells.retain(|(s, k), v| {
                match f(
                    *month,
                    &self.predictors[*k as usize],
                    &self.stocks[*s as usize],
                    *v,
                ) {
                    Some(nv) => {
                        *v = nv;
                        true
                    }
                    None => false,
                }
            });
        }
        out
    }

    /// Copy holding only months in `[start, end]`.
    pub fn restrict(&self, start: YearMonth, end: YearMonth) -> PredictorPanel {
        let mut out = self.clone();
        out.cells.retain(|m, _| *m >= start && *m <= end);
        out.market.retain(|m, _| *m >= start && *m <= end);
        out.range = Some((start, end));
        out
    }

    /// `stock_id,yyyymm,predictor,value`, by month then stock and predictor index.
    pub fn write_observations_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stock_id", "yyyymm", "predictor", "value"])?;
        for (month, cells) in &self.cells {
            let m = month.to_string();
            for (&(s, k), v) in cells {
                w.write_record([
                    self.stocks[s as usize].as_str(),
                    &m,
                    &self.predictors[k as usize],
                    &v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `stock_id,yyyymm,ret,mktcap`, in stock-id order within each month.
    pub fn write_market_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stock_id", "yyyymm", "ret", "mktcap"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (month, recs) in &self.market {
            let mut rows: Vec<(&str, &MarketRecord)> =
                recs.iter().map(|(s, r)| (self.stocks[*s as usize].as_str(), r)).collect();
            rows.sort_by(|a, b| a.0.cmp(b.0));
            for (s, r) in rows {
                w.write_record([s.to_string(), month.to_string(), opt(r.ret), opt(r.cap)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Builds the month's cross-section over `predictors`.
    ///
    /// Rows are the stocks with at least one observed listed predictor, in stock-id order.
    pub fn cross_section(&self, month: YearMonth, predictors: &[String]) -> Result<CrossSection> {
        if predictors.is_empty() {
            return Err(Error::InvalidArgument("empty predictor list".into()));
        }
        if let Some((a, b)) = self.range {
            if month < a || month > b {
                return Err(Error::InvalidArgument(format!(
                    "month {month} outside panel range {a}:{b}"
                )));
            }
        }
        let cols: HashMap<u32, usize> = predictors
            .iter()
            .enumerate()
            .filter_map(|(j, p)| self.predictor_index.get(p).map(|&k| (k, j)))
            .collect();
        let mut rows: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
        if let Some(cells) = self.cells.get(&month) {
            for (&(s, k), &v) in cells {
                if let Some(&j) = cols.get(&k) {
                    let row = rows
                        .entry(self.stocks[s as usize].as_str())
                        .or_insert_with(|| vec![None; predictors.len()]);
                    row[j] = Some(v);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyCrossSection(month));
        }
        let stock_ids = rows.keys().map(|s| s.to_string()).collect();
        let data: Vec<Vec<Option<f64>>> = rows.into_values().collect();
        CrossSection::from_rows(month, stock_ids, predictors.to_vec(), &data)
    }
}

/// Rows sharing one observed/missing pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternGroup {
    /// `true` = observed.
    pub mask: Vec<bool>,
    pub rows: Vec<usize>,
}

impl PatternGroup {
    pub fn observed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| self.mask[j]).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| !self.mask[j]).collect()
    }
}

/// One month's `N × J` predictor matrix with an explicit observation mask.
#[derive(Debug, Clone)]
pub struct CrossSection {
    pub month: YearMonth,
    pub stock_ids: Vec<String>,
    pub predictor_ids: Vec<String>,
    /// Missing cells hold NaN.
    pub values: DMatrix<f64>,
    /// `true` = observed.
    pub mask: DMatrix<bool>,
    patterns: Vec<PatternGroup>,
    row_pattern: Vec<usize>,
}

impl CrossSection {
    pub fn new(
        month: YearMonth,
        stock_ids: Vec<String>,
        predictor_ids: Vec<String>,
        values: DMatrix<f64>,
        mask: DMatrix<bool>,
    ) -> Result<Self> {
        let (n, j) = values.shape();
        if mask.shape() != (n, j) || stock_ids.len() != n || predictor_ids.len() != j {
            return Err(Error::InvalidArgument("cross-section shape mismatch".into()));
        }
        let mut values = values;
        for r in 0..n {
            for c in 0..j {
                if mask[(r, c)] {
                    if !values[(r, c)].is_finite() {
                        return Err(Error::NonFinite { line: 0 });
                    }
                } else {
                    values[(r, c)] = f64::NAN;
                }
            }
        }
        let mut seen: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut patterns: Vec<PatternGroup> = Vec::new();
        let mut row_pattern = Vec::with_capacity(n);
        for r in 0..n {
            let key: Vec<bool> = (0..j).map(|c| mask[(r, c)]).collect();
            let g = *seen.entry(key.clone()).or_insert_with(|| {
                patterns.push(PatternGroup {
                    mask: key,
                    rows: Vec::new(),
                });
                patterns.len() - 1
            });
            patterns[g].rows.push(r);
            row_pattern.push(g);
        }
        Ok(CrossSection {
            month,
            stock_ids,
            predictor_ids,
            values,
            mask,
            patterns,
            row_pattern,
        })
    }

    /// Builds from row-major optional values (`None` = missing).
    pub fn from_rows(
        month: YearMonth,
        stock_ids: Vec<String>,
        predictor_ids: Vec<String>,
        rows: &[Vec<Option<f64>>],
    ) -> Result<Self> {
        let n = rows.len();
        let j = predictor_ids.len();
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let values = DMatrix::from_fn(n, j, |r, c| rows[r][c].unwrap_or(f64::NAN));
        let mask = DMatrix::from_fn(n, j, |r, c| rows[r][c].is_some());
        Self::new(month, stock_ids, predictor_ids, values, mask)
    }

    /// Synthetic ids `s0, s1, …` and `p0, p1, …`; convenient for tests and simulations.
    pub fn anonymous(month: YearMonth, values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        let stocks = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        let preds = (0..values.ncols()).map(|j| format!("p{j}")).collect();
        Self::new(month, stocks, preds, values, mask)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn j(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.mask[(i, j)].then(|| self.values[(i, j)])
    }

    pub fn patterns(&self) -> &[PatternGroup] {
        &self.patterns
    }

    /// Index into [`Self::patterns`] for each row.
    pub fn row_pattern(&self) -> &[usize] {
        &self.row_pattern
    }

    pub fn observed_count(&self, j: usize) -> usize {
        (0..self.n()).filter(|&i| self.mask[(i, j)]).count()
    }

    pub fn column_observed(&self, j: usize) -> Vec<f64> {
        (0..self.n()).filter_map(|i| self.get(i, j)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same rows and mask with different observed values (missing cells ignored).
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.month,
            self.stock_ids.clone(),
            self.predictor_ids.clone(),
            values,
            self.mask.clone(),
        )
    }

    /// Restricts to a subset of columns, dropping rows left with no observation.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n())
            .filter(|&i| cols.iter().any(|&c| self.mask[(i, c)]))
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyCrossSection(self.month));
        }
        let values = DMatrix::from_fn(keep.len(), cols.len(), |r, c| self.values[(keep[r], cols[c])]);
        let mask = DMatrix::from_fn(keep.len(), cols.len(), |r, c| self.mask[(keep[r], cols[c])]);
        Self::new(
            self.month,
            keep.iter().map(|&i| self.stock_ids[i].clone()).collect(),
            cols.iter().map(|&c| self.predictor_ids[c].clone()).collect(),
            values,
            mask,
        )
    }
}

/// Share of stocks (in percent) observing each predictor in each month, summarised by
/// order statistics across predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareRow {
    pub month: YearMonth,
    pub n_stocks: usize,
    /// One entry per requested percentile.
    pub values: Vec<f64>,
}

/// For each month, the per-predictor observed share (stocks with that predictor over
/// stocks with at least one predictor), reported at the requested percentiles (0–100).
///
/// Every predictor known to the panel enters, including ones unobserved that month.
pub fn observed_share_percentiles(
    panel: &PredictorPanel,
    months: &[YearMonth],
    percentiles: &[f64],
) -> Result<Vec<ShareRow>> {
    if months.is_empty() {
        return Err(Error::InvalidArgument("no months requested".into()));
    }
    let probs: Vec<f64> = percentiles.iter().map(|p| p / 100.0).collect();
    months
        .iter()
        .map(|&month| {
            let cells = panel.cells.get(&month);
            let n_stocks = cells
                .map(|c| {
                    let mut s: Vec<u32> = c.keys().map(|(s, _)| *s).collect();
                    s.dedup();
                    s.len()
                })
                .unwrap_or(0);
            if n_stocks == 0 {
                return Err(Error::EmptyCrossSection(month));
            }
            let counts = panel.observed_counts(month);
            let shares: Vec<f64> = panel
                .predictors
                .iter()
                .map(|p| 100.0 * *counts.get(p.as_str()).unwrap_or(&0) as f64 / n_stocks as f64)
                .collect();
            Ok(ShareRow {
                month,
                n_stocks,
                values: crate::linalg::quantiles(&shares, &probs),
            })
        })
        .collect()
}

/// `(pct_cells_observed, pct_stocks_complete)` for the `j_count` most-observed
/// predictors of `month`, over stocks having at least one of them.
pub fn combine_j_summary(
    panel: &PredictorPanel,
    month: YearMonth,
    j_count: usize,
) -> Result<(f64, f64)> {
    let ranked = panel.most_observed(month);
    if j_count == 0 || j_count > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "J = {j_count} but only {} predictors are observed in {month}",
            ranked.len()
        )));
    }
    let cs = panel.cross_section(month, &ranked[..j_count])?;
    Ok(mask_summary(&cs.mask))
}

/// Percent of observed cells and percent of complete rows of a mask.
pub fn mask_summary(mask: &DMatrix<bool>) -> (f64, f64) {
    let (n, j) = mask.shape();
    let cells = mask.iter().filter(|&&m| m).count();
    let complete = (0..n).filter(|&i| (0..j).all(|c| mask[(i, c)])).count();
    (
        100.0 * cells as f64 / (n * j) as f64,
        100.0 * complete as f64 / n as f64,
    )
}

/// Predictor × stock observation grid, predictors ordered by observed share.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessGrid {
    pub predictor_ids: Vec<String>,
    pub stock_ids: Vec<String>,
    /// `grid[p][s]`, `true` = observed.
    pub grid: Vec<Vec<bool>>,
}

pub fn missingness_map(cs: &CrossSection) -> MissingnessGrid {
    let mut order: Vec<usize> = (0..cs.j()).collect();
    order.sort_by(|&a, &b| {
        cs.observed_count(b)
            .cmp(&cs.observed_count(a))
            .then(cs.predictor_ids[a].cmp(&cs.predictor_ids[b]))
    });
    MissingnessGrid {
        predictor_ids: order.iter().map(|&j| cs.predictor_ids[j].clone()).collect(),
        stock_ids: cs.stock_ids.clone(),
        grid: order
            .iter()
            .map(|&j| (0..cs.n()).map(|i| cs.mask[(i, j)]).collect())
            .collect(),
    }
}

impl MissingnessGrid {
    /// CSV with a `predictor,<stock ids…>` header and one 0/1 row per predictor.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["predictor".to_string()];
        header.extend(self.stock_ids.iter().cloned());
        w.write_record(&header)?;
        for (p, row) in self.predictor_ids.iter().zip(&self.grid) {
            let mut rec = vec![p.clone()];
            rec.extend(row.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
