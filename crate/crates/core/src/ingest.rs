//! Weekly price ingestion, history filtering, and return computation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five years of weekly observations.
pub const DEFAULT_MIN_WEEKS: usize = 260;

/// Closing prices aligned on the union of observed dates.
///
/// `closes[k][t]` is `None` when ticker `k` has no observation on `dates[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMap {
    /// Sector names in index order.
    pub names: Vec<String>,
    assignment: BTreeMap<String, usize>,
}

/// Relative weekly changes for `K` stocks over `n` weeks, rows grouped by sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyReturnPanel {
    pub tickers: Vec<String>,
    pub sector_names: Vec<String>,
    /// Sector index of each row.
    pub stock_sector: Vec<usize>,
    /// Row indices belonging to each sector.
    pub sectors: Vec<Vec<usize>>,
    /// Week-ending date of each return column; may be empty for simulated panels.
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<Vec<f64>>,
}

impl SectorMap {
    /// Builds a map from `(ticker, sector)` pairs. Sector indices follow the
    /// lexicographic order of sector names, which coincides with the usual
    /// GICS listing order.
    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut by_ticker: BTreeMap<String, String> = BTreeMap::new();
        for (ticker, sector) in pairs {
            let ticker = ticker.into();
            let sector = sector.into();
            if let Some(prev) = by_ticker.get(&ticker) {
                if *prev != sector {
                    return Err(Error::Validation(format!(
                        "ticker {ticker} assigned to both {prev} and {sector}"
                    )));
                }
            }
            by_ticker.insert(ticker, sector);
        }
        if by_ticker.is_empty() {
            return Err(Error::Validation("sector map is empty".into()));
        }
        let names: Vec<String> = by_ticker
            .values()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let assignment = by_ticker
            .iter()
            .map(|(t, s)| (t.clone(), index[s.as_str()]))
            .collect();
        Ok(Self { names, assignment })
    }

    pub fn sector_of(&self, ticker: &str) -> Option<usize> {
        self.assignment.get(ticker).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads the price and sector CSVs and aligns prices on the union of dates.
pub fn load_prices(
    price_file: impl AsRef<Path>,
    sector_file: impl AsRef<Path>,
) -> Result<(PricePanel, SectorMap)> {
    let price_path = price_file.as_ref();
    let sector_path = sector_file.as_ref();
    let sectors = read_sectors(
        File::open(sector_path).map_err(io_err(sector_path))?,
        &sector_path.display().to_string(),
    )?;
    let panel = read_prices(
        File::open(price_path).map_err(io_err(price_path))?,
        &price_path.display().to_string(),
    )?;
    for ticker in &panel.tickers {
        if sectors.sector_of(ticker).is_none() {
            return Err(Error::Validation(format!("ticker {ticker} has no sector")));
        }
    }
    Ok((panel, sectors))
}

fn check_header(reader: &mut csv::Reader<impl Read>, label: &str, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: label.to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            path: label.to_string(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Parses a `ticker,sector` CSV.
pub fn read_sectors(input: impl Read, label: &str) -> Result<SectorMap> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    check_header(&mut reader, label, &["ticker", "sector"])?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: label.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        if record.len() != 2 {
            return Err(Error::Parse {
                path: label.to_string(),
                line,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let ticker = record[0].trim();
        let sector = record[1].trim();
        if ticker.is_empty() || sector.is_empty() {
            return Err(Error::Parse {
                path: label.to_string(),
                line,
                message: "empty ticker or sector".into(),
            });
        }
        pairs.push((ticker.to_string(), sector.to_string()));
    }
    SectorMap::from_pairs(pairs)
}

/// Parses a `date,ticker,close` CSV into a panel aligned on the union of dates.
pub fn read_prices(input: impl Read, label: &str) -> Result<PricePanel> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    check_header(&mut reader, label, &["date", "ticker", "close"])?;
    let mut obs: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let mut all_dates = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: label.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        let parse_err = |message: String| Error::Parse {
            path: label.to_string(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date `{}`: {e}", &record[0])))?;
        let ticker = record[1].trim();
        if ticker.is_empty() {
            return Err(parse_err("empty ticker".into()));
        }
        let close: f64 = record[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad close `{}`: {e}", &record[2])))?;
        if !close.is_finite() || close <= 0.0 {
            return Err(Error::Validation(format!(
                "{label}:{line}: non-positive price {close} for {ticker}"
            )));
        }
        if obs
            .entry(ticker.to_string())
            .or_default()
            .insert(date, close)
            .is_some()
        {
            return Err(Error::Validation(format!(
                "{label}:{line}: duplicate observation for {ticker} on {date}"
            )));
        }
        all_dates.insert(date);
    }
    if obs.is_empty() {
        return Err(Error::Validation(format!("{label}: no price rows")));
    }
    let dates: Vec<NaiveDate> = all_dates.into_iter().collect();
    let (tickers, closes) = obs
        .into_iter()
        .map(|(ticker, series)| {
            let row = dates.iter().map(|d| series.get(d).copied()).collect();
            (ticker, row)
        })
        .unzip();
    Ok(PricePanel {
        tickers,
        dates,
        closes,
    })
}

impl PricePanel {
    /// Restricts the panel to dates in `[start, end]`.
    pub fn window(&self, start: NaiveDate, end: NaiveDate) -> PricePanel {
        let keep: Vec<usize> = self
            .dates
            .iter()
            .enumerate()
            .filter(|(_, d)| **d >= start && **d <= end)
            .map(|(i, _)| i)
            .collect();
        PricePanel {
            tickers: self.tickers.clone(),
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            closes: self
                .closes
                .iter()
                .map(|row| keep.iter().map(|&i| row[i]).collect())
                .collect(),
        }
    }

    /// Keeps only the listed tickers that are present, in the listed order.
    pub fn select(&self, tickers: &[String]) -> PricePanel {
        let index: HashMap<&str, usize> = self
            .tickers
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let rows: Vec<usize> = tickers
            .iter()
            .filter_map(|t| index.get(t.as_str()).copied())
            .collect();
        PricePanel {
            tickers: rows.iter().map(|&r| self.tickers[r].clone()).collect(),
            dates: self.dates.clone(),
            closes: rows.iter().map(|&r| self.closes[r].clone()).collect(),
        }
    }

    /// Drops tickers with any absent close.
    pub fn complete_rows(&self) -> PricePanel {
        let rows: Vec<usize> = (0..self.tickers.len())
            .filter(|&k| self.closes[k].iter().all(Option::is_some))
            .collect();
        PricePanel {
            tickers: rows.iter().map(|&r| self.tickers[r].clone()).collect(),
            dates: self.dates.clone(),
            closes: rows.iter().map(|&r| self.closes[r].clone()).collect(),
        }
    }
}

/// Keeps tickers observed on every one of the last `min_weeks + 1` dates and
/// truncates the panel to that window.
pub fn filter_history(panel: &PricePanel, min_weeks: usize) -> Result<PricePanel> {
    if min_weeks == 0 {
        return Err(Error::Validation("min_weeks must be at least 1".into()));
    }
    let window = min_weeks + 1;
    if panel.dates.len() < window {
        return Err(Error::InsufficientHistory);
    }
    let start = panel.dates.len() - window;
    let mut tickers = Vec::new();
    let mut closes = Vec::new();
    for (ticker, row) in panel.tickers.iter().zip(&panel.closes) {
        let tail = &row[start..];
        if tail.iter().all(Option::is_some) {
            tickers.push(ticker.clone());
            closes.push(tail.to_vec());
        }
    }
    if tickers.is_empty() {
        return Err(Error::InsufficientHistory);
    }
    Ok(PricePanel {
        tickers,
        dates: panel.dates[start..].to_vec(),
        closes,
    })
}

/// `Y[k][t] = (X[k][t+1] - X[k][t]) / X[k][t]`, rows ordered by sector then ticker.
pub fn compute_weekly_returns(panel: &PricePanel, sectors: &SectorMap) -> Result<WeeklyReturnPanel> {
    if panel.dates.len() < 2 {
        return Err(Error::Validation("panel needs at least two dates".into()));
    }
    let mut rows: Vec<(usize, &str, usize)> = Vec::with_capacity(panel.tickers.len());
    for (k, ticker) in panel.tickers.iter().enumerate() {
        let d = sectors
            .sector_of(ticker)
            .ok_or_else(|| Error::Validation(format!("ticker {ticker} has no sector")))?;
        rows.push((d, ticker.as_str(), k));
    }
    rows.sort();

    let used: BTreeSet<usize> = rows.iter().map(|r| r.0).collect();
    let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let sector_names: Vec<String> = used.iter().map(|&d| sectors.names[d].clone()).collect();

    let mut tickers = Vec::with_capacity(rows.len());
    let mut stock_sector = Vec::with_capacity(rows.len());
    let mut index_sets = vec![Vec::new(); sector_names.len()];
    let mut returns = Vec::with_capacity(rows.len());
    for (row, &(d, ticker, k)) in rows.iter().enumerate() {
        let closes: Vec<f64> = panel.closes[k]
            .iter()
            .map(|c| c.ok_or_else(|| Error::Validation(format!("ticker {ticker} has missing closes"))))
            .collect::<Result<_>>()?;
        returns.push(closes.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect());
        tickers.push(ticker.to_string());
        stock_sector.push(remap[&d]);
        index_sets[remap[&d]].push(row);
    }
    Ok(WeeklyReturnPanel {
        tickers,
        sector_names,
        stock_sector,
        sectors: index_sets,
        dates: panel.dates[1..].to_vec(),
        returns,
    })
}

impl WeeklyReturnPanel {
    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_weeks(&self) -> usize {
        self.returns.first().map_or(0, Vec::len)
    }

    pub fn n_sectors(&self) -> usize {
        self.sector_names.len()
    }

    /// Rows of sector `d`, borrowed.
    pub fn sector_rows(&self, d: usize) -> Vec<&[f64]> {
        self.sectors[d].iter().map(|&k| self.returns[k].as_slice()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.tickers.len();
        if k == 0 || self.returns.len() != k || self.stock_sector.len() != k {
            return Err(Error::Validation("inconsistent panel dimensions".into()));
        }
        let n = self.n_weeks();
        if self.returns.iter().any(|r| r.len() != n) {
            return Err(Error::Validation("ragged return rows".into()));
        }
        if !self.dates.is_empty() && self.dates.len() != n {
            return Err(Error::Validation("date count does not match return columns".into()));
        }
        let mut seen = vec![0usize; k];
        for (d, set) in self.sectors.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Validation(format!("sector {} is empty", self.sector_names[d])));
            }
            for &i in set {
                if i >= k || self.stock_sector[i] != d {
                    return Err(Error::Validation("sector partition mismatch".into()));
                }
                seen[i] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Validation("sector sets do not partition the stocks".into()));
        }
        if self.returns.iter().flatten().any(|&y| !(y > -1.0) || !y.is_finite()) {
            return Err(Error::Validation("weekly changes must be finite and exceed -1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn parses_small_panel() {
        let csv = "date,ticker,close\n2020-01-03,AAA,10\n2020-01-10,AAA,11\n2020-01-17,AAA,12\n\
                   2020-01-03,BBB,5\n2020-01-10,BBB,5.5\n2020-01-17,BBB,6\n";
        let panel = read_prices(csv.as_bytes(), "prices.csv").unwrap();
        assert_eq!(panel.tickers, vec!["AAA", "BBB"]);
        assert_eq!(panel.dates.len(), 3);
        assert_eq!(panel.closes[1][2], Some(6.0));
    }

    #[test]
    fn missing_cells_are_absent() {
        let csv = "date,ticker,close\n2020-01-03,AAA,10\n2020-01-10,AAA,11\n2020-01-10,BBB,5\n";
        let panel = read_prices(csv.as_bytes(), "p").unwrap();
        assert_eq!(panel.closes[1], vec![None, Some(5.0)]);
    }

    #[test]
    fn zero_price_rejected() {
        let csv = "date,ticker,close\n2020-01-03,AAA,0.00\n";
        assert!(matches!(
            read_prices(csv.as_bytes(), "p"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "date,ticker,close\n2020-01-03,AAA,10\n2020-01-10,AAA,abc\n";
        match read_prices(csv.as_bytes(), "p") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let csv = "day,ticker,close\n";
        assert!(matches!(read_prices(csv.as_bytes(), "p"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ticker_without_sector_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prices.csv");
        let s = dir.path().join("sectors.csv");
        std::fs::write(&p, "date,ticker,close\n2020-01-03,AAA,10\n2020-01-03,ZZZ,10\n").unwrap();
        std::fs::write(&s, "ticker,sector\nAAA,Energy\n").unwrap();
        assert!(matches!(load_prices(&p, &s), Err(Error::Validation(_))));
    }

    fn weekly_panel(lengths: &[(&str, usize)], total: usize) -> PricePanel {
        let start = d("2010-01-01");
        let dates: Vec<NaiveDate> = (0..total)
            .map(|i| start + chrono::Duration::weeks(i as i64))
            .collect();
        PricePanel {
            tickers: lengths.iter().map(|(t, _)| t.to_string()).collect(),
            closes: lengths
                .iter()
                .map(|&(_, len)| {
                    (0..total)
                        .map(|i| (i >= total - len).then_some(100.0 + i as f64))
                        .collect()
                })
                .collect(),
            dates,
        }
    }

    #[test]
    fn short_history_dropped() {
        let panel = weekly_panel(&[("SHORT", 100), ("LONG", 300)], 300);
        let out = filter_history(&panel, 260).unwrap();
        assert_eq!(out.tickers, vec!["LONG"]);
        assert_eq!(out.dates.len(), 261);
        assert_eq!(out.closes[0].len(), 261);
        assert_eq!(out.closes[0][260], Some(399.0));
    }

    #[test]
    fn empty_filter_result_is_error() {
        let panel = weekly_panel(&[("SHORT", 100)], 300);
        assert!(matches!(filter_history(&panel, 260), Err(Error::InsufficientHistory)));
    }

    #[test]
    fn interior_gap_drops_ticker() {
        let mut panel = weekly_panel(&[("A", 300), ("B", 300)], 300);
        panel.closes[0][150] = None;
        let out = filter_history(&panel, 260).unwrap();
        assert_eq!(out.tickers, vec!["B"]);
    }

    fn two_sector_map() -> SectorMap {
        SectorMap::from_pairs([("ZZ", "Energy"), ("AA", "Utilities"), ("MM", "Energy")]).unwrap()
    }

    #[test]
    fn returns_follow_ratio_formula() {
        let panel = PricePanel {
            tickers: vec!["AA".into(), "MM".into(), "ZZ".into()],
            dates: vec![d("2020-01-03"), d("2020-01-10"), d("2020-01-17")],
            closes: vec![
                vec![Some(80.0), Some(60.0), Some(90.0)],
                vec![Some(100.0), Some(110.0), Some(110.0)],
                vec![Some(100.0), Some(100.0), Some(100.0)],
            ],
        };
        let r = compute_weekly_returns(&panel, &two_sector_map()).unwrap();
        // Energy first (MM, ZZ), then Utilities (AA).
        assert_eq!(r.tickers, vec!["MM", "ZZ", "AA"]);
        assert_eq!(r.sector_names, vec!["Energy", "Utilities"]);
        assert_eq!(r.sectors, vec![vec![0, 1], vec![2]]);
        assert!((r.returns[0][0] - 0.10).abs() < 1e-15);
        assert_eq!(r.returns[1], vec![0.0, 0.0]);
        assert_eq!(r.returns[2], vec![-0.25, 0.5]);
        assert_eq!(r.dates, vec![d("2020-01-10"), d("2020-01-17")]);
        r.validate().unwrap();
    }

    proptest! {
        #[test]
        fn compounding_reconstructs_last_close(
            closes in proptest::collection::vec(0.01f64..1e4, 2..60)
        ) {
            let n = closes.len();
            let panel = PricePanel {
                tickers: vec!["AA".into()],
                dates: (0..n).map(|i| d("2015-01-02") + chrono::Duration::weeks(i as i64)).collect(),
                closes: vec![closes.iter().copied().map(Some).collect()],
            };
            let map = SectorMap::from_pairs([("AA", "X")]).unwrap();
            let r = compute_weekly_returns(&panel, &map).unwrap();
            let rebuilt = r.returns[0].iter().fold(closes[0], |x, y| x * (1.0 + y));
            // Forming r = p1/p0 - 1 and then 1 + r costs about eps / (1 + r) relative error per week.
            let bound: f64 = r.returns[0].iter().map(|y| 4.0 * f64::EPSILON * (1.0 + 1.0 / (1.0 + y))).sum();
            prop_assert!(((rebuilt - closes[n - 1]) / closes[n - 1]).abs() <= bound);
        }

        #[test]
        fn sectors_partition_stocks(assign in proptest::collection::vec(0usize..4, 1..30)) {
            let pairs: Vec<(String, String)> = assign
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("T{i:03}"), format!("S{s}")))
                .collect();
            let map = SectorMap::from_pairs(pairs.clone()).unwrap();
            let panel = PricePanel {
                tickers: pairs.iter().map(|p| p.0.clone()).collect(),
                dates: vec![d("2020-01-03"), d("2020-01-10")],
                closes: vec![vec![Some(1.0), Some(2.0)]; pairs.len()],
            };
            let r = compute_weekly_returns(&panel, &map).unwrap();
            prop_assert!(r.validate().is_ok());
        }
    }
}
