//! Long-format CSV panels.
//!
//! | file                  | header                           |
//! |-----------------------|----------------------------------|
//! | `target.csv`          | `series_id,period,value`         |
//! | `time_features.csv`   | `series_id,period,feature,value` |
//! | `static_features.csv` | `series_id,feature,value`        |
//! | `future_features.csv` | `series_id,period,feature,value` |
//!
//! Only `target.csv` is required. Series and periods are indexed in order of
//! first appearance in `target.csv`; features in order of first appearance
//! in their own file. A blank value or an absent row becomes `0.0`, and the
//! affected tensor gains a `<name>_missing` indicator column (`target_missing`
//! is added to the time features). Indicator columns exist only for names
//! with at least one missing cell.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::tensor::Tensor;

pub const TARGET_FILE: &str = "target.csv";
pub const TIME_FILE: &str = "time_features.csv";
pub const STATIC_FILE: &str = "static_features.csv";
pub const FUTURE_FILE: &str = "future_features.csv";

const TARGET_HEADER: [&str; 3] = ["series_id", "period", "value"];
const PANEL_HEADER: [&str; 4] = ["series_id", "period", "feature", "value"];
const STATIC_HEADER: [&str; 3] = ["series_id", "feature", "value"];

/// Records of one file with their 1-based line numbers.
struct Rows {
    file: PathBuf,
    records: Vec<(usize, csv::StringRecord)>,
}

impl Rows {
    fn parse_err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Rows> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    let got = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != header {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", header.join(","), got.join(",")),
        ));
    }
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        records.push((line, rec));
    }
    Ok(Rows {
        file: path.to_path_buf(),
        records,
    })
}

fn parse_value(rows: &Rows, line: usize, cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| rows.parse_err(line, format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(rows.parse_err(line, format!("`{cell}` is not finite")));
    }
    Ok(Some(v))
}

/// Ordered set of labels with index lookup.
#[derive(Default)]
struct Index {
    labels: Vec<String>,
    pos: HashMap<String, usize>,
}

impl Index {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.pos.get(label) {
            return i;
        }
        self.labels.push(label.to_string());
        self.pos.insert(label.to_string(), self.labels.len() - 1);
        self.labels.len() - 1
    }

    fn get(&self, label: &str) -> Option<usize> {
        self.pos.get(label).copied()
    }
}

/// Dense `[outer, k]` values with missingness, built from long rows.
struct Dense {
    names: Vec<String>,
    values: Vec<Option<f64>>,
    outer: usize,
}

impl Dense {
    /// Appends indicator columns and returns `(values, names, k)`.
    fn finish(self) -> (Vec<f64>, Vec<String>, usize) {
        let k = self.names.len();
        let missing_cols: Vec<usize> = (0..k)
            .filter(|&f| (0..self.outer).any(|o| self.values[o * k + f].is_none()))
            .collect();
        let k_out = k + missing_cols.len();
        let mut out = Vec::with_capacity(self.outer * k_out);
        for o in 0..self.outer {
            let row = &self.values[o * k..(o + 1) * k];
            out.extend(row.iter().map(|v| v.unwrap_or(0.0)));
            out.extend(missing_cols.iter().map(|&f| if row[f].is_none() { 1.0 } else { 0.0 }));
        }
        let mut names = self.names.clone();
        names.extend(missing_cols.iter().map(|&f| format!("{}_missing", self.names[f])));
        (out, names, k_out)
    }
}

fn long_features(rows: &Rows, series: &Index, periods: &Index, with_period: bool) -> Result<Dense> {
    let mut features = Index::default();
    let mut cells = Vec::with_capacity(rows.records.len());
    for (line, rec) in &rows.records {
        let sid = rec[0].trim();
        let i = series
            .get(sid)
            .ok_or_else(|| rows.parse_err(*line, format!("unknown series `{sid}`")))?;
        let (t, f_col) = if with_period {
            let p = rec[1].trim();
            let t = periods
                .get(p)
                .ok_or_else(|| rows.parse_err(*line, format!("unknown period `{p}`")))?;
            (t, 2)
        } else {
            (0, 1)
        };
        let name = rec[f_col].trim();
        if name.is_empty() {
            return Err(rows.parse_err(*line, "empty feature name"));
        }
        let f = features.intern(name);
        let v = parse_value(rows, *line, &rec[f_col + 1])?;
        cells.push((*line, i, t, f, v));
    }
    let per_series = if with_period { periods.labels.len() } else { 1 };
    let outer = series.labels.len() * per_series;
    let k = features.labels.len();
    let mut values = vec![None; outer * k];
    let mut seen = vec![false; outer * k];
    for (line, i, t, f, v) in cells {
        let at = (i * per_series + t) * k + f;
        if seen[at] {
            return Err(rows.parse_err(line, "duplicate row"));
        }
        seen[at] = true;
        values[at] = v;
    }
    Ok(Dense {
        names: features.labels,
        values,
        outer,
    })
}

/// Loads a panel from the CSV files in `dir`.
pub fn load_panel_csv(dir: &Path) -> Result<PanelDataset> {
    let target_rows = read_rows(&dir.join(TARGET_FILE), &TARGET_HEADER)?;
    let mut series = Index::default();
    let mut periods = Index::default();
    let mut cells = Vec::with_capacity(target_rows.records.len());
    for (line, rec) in &target_rows.records {
        let (sid, p) = (rec[0].trim(), rec[1].trim());
        if sid.is_empty() || p.is_empty() {
            return Err(target_rows.parse_err(*line, "empty series_id or period"));
        }
        let i = series.intern(sid);
        let t = periods.intern(p);
        cells.push((*line, i, t, parse_value(&target_rows, *line, &rec[2])?));
    }
    let (n, t_len) = (series.labels.len(), periods.labels.len());
    if n == 0 {
        return Err(target_rows.parse_err(1, "no data rows"));
    }
    let mut target = vec![None; n * t_len];
    let mut seen = vec![false; n * t_len];
    for (line, i, t, v) in cells {
        if seen[i * t_len + t] {
            return Err(target_rows.parse_err(line, "duplicate row"));
        }
        seen[i * t_len + t] = true;
        target[i * t_len + t] = v;
    }
    let target_missing = target.iter().any(Option::is_none);

    let optional = |name: &str, header: &[&str], with_period: bool| -> Result<Dense> {
        let path = dir.join(name);
        if path.exists() {
            long_features(&read_rows(&path, header)?, &series, &periods, with_period)
        } else {
            Ok(Dense {
                names: Vec::new(),
                values: Vec::new(),
                outer: if with_period { n * t_len } else { n },
            })
        }
    };
    let (mut time, mut time_names, mut d) = optional(TIME_FILE, &PANEL_HEADER, true)?.finish();
    let (statics, static_names, m) = optional(STATIC_FILE, &STATIC_HEADER, false)?.finish();
    let (future, future_names, df) = optional(FUTURE_FILE, &PANEL_HEADER, true)?.finish();

    if target_missing {
        let mut widened = Vec::with_capacity(n * t_len * (d + 1));
        for (o, v) in target.iter().enumerate() {
            widened.extend_from_slice(&time[o * d..(o + 1) * d]);
            widened.push(if v.is_none() { 1.0 } else { 0.0 });
        }
        time = widened;
        time_names.push("target_missing".to_string());
        d += 1;
    }

    let ds = PanelDataset {
        series_ids: series.labels,
        period_index: periods.labels,
        target: Tensor::from_vec(&[n, t_len], target.iter().map(|v| v.unwrap_or(0.0)).collect())?,
        time_features: Tensor::from_vec(&[n, t_len, d], time)?,
        static_features: Tensor::from_vec(&[n, m], statics)?,
        future_features: Tensor::from_vec(&[n, t_len, df], future)?,
        time_feature_names: time_names,
        static_feature_names: static_names,
        future_feature_names: future_names,
    };
    ds.validate()?;
    Ok(ds)
}

fn to_bytes<F>(path: &Path, header: &[&str], mut fill: F) -> Result<Vec<u8>>
where
    F: FnMut(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        w.write_record(header).map_err(wrap)?;
        fill(&mut w).map_err(wrap)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

/// Writes the four CSV files into `dir`, creating it if needed. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_panel_csv(ds: &PanelDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, t_len) = (ds.n_series(), ds.n_periods());

    let path = dir.join(TARGET_FILE);
    let bytes = to_bytes(&path, &TARGET_HEADER, |w| {
        for i in 0..n {
            for t in 0..t_len {
                let v = ds.target.data()[i * t_len + t].to_string();
                w.write_record([ds.series_ids[i].as_str(), ds.period_index[t].as_str(), &v])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&path, &bytes)?;

    for (file, tensor, names) in [
        (TIME_FILE, &ds.time_features, &ds.time_feature_names),
        (FUTURE_FILE, &ds.future_features, &ds.future_feature_names),
    ] {
        let path = dir.join(file);
        let k = names.len();
        let bytes = to_bytes(&path, &PANEL_HEADER, |w| {
            for i in 0..n {
                for t in 0..t_len {
                    for (f, name) in names.iter().enumerate() {
                        let v = tensor.data()[(i * t_len + t) * k + f].to_string();
                        w.write_record([ds.series_ids[i].as_str(), ds.period_index[t].as_str(), name, &v])?;
                    }
                }
            }
            Ok(())
        })?;
        write_atomic(&path, &bytes)?;
    }

    let path = dir.join(STATIC_FILE);
    let m = ds.n_static_features();
    let bytes = to_bytes(&path, &STATIC_HEADER, |w| {
        for i in 0..n {
            for (f, name) in ds.static_feature_names.iter().enumerate() {
                let v = ds.static_features.data()[i * m + f].to_string();
                w.write_record([ds.series_ids[i].as_str(), name, &v])?;
            }
        }
        Ok(())
    })?;
    write_atomic(&path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn two_by_three_panel() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            TARGET_FILE,
            "series_id,period,value\na,1,1\na,2,2\na,3,3\nb,1,4\nb,2,5\nb,3,6\n",
        );
        let ds = load_panel_csv(dir.path()).unwrap();
        assert_eq!((ds.n_series(), ds.n_periods()), (2, 3));
        assert_eq!(ds.target.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.n_time_features(), 0);
    }

    #[test]
    fn blank_target_is_imputed_with_indicator() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TARGET_FILE, "series_id,period,value\na,1,1\na,2,\n");
        let ds = load_panel_csv(dir.path()).unwrap();
        assert_eq!(ds.target.data(), &[1.0, 0.0]);
        assert_eq!(ds.time_feature_names, vec!["target_missing"]);
        assert_eq!(ds.time_features.data(), &[0.0, 1.0]);
    }

    #[test]
    fn absent_feature_row_gets_indicator() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TARGET_FILE, "series_id,period,value\na,1,1\na,2,2\n");
        write(dir.path(), TIME_FILE, "series_id,period,feature,value\na,1,x,0.5\n");
        let ds = load_panel_csv(dir.path()).unwrap();
        assert_eq!(ds.time_feature_names, vec!["x", "x_missing"]);
        assert_eq!(ds.time_features.data(), &[0.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TARGET_FILE, "series_id,period,value\na,1,1\na,2,abc\n");
        match load_panel_csv(dir.path()).unwrap_err() {
            Error::Parse { file, line, .. } => {
                assert!(file.ends_with(TARGET_FILE));
                assert_eq!(line, 3);
            }
            e => panic!("unexpected {e}"),
        }
        write(dir.path(), TARGET_FILE, "series_id,period,value\na,1,1\na,2\n");
        assert!(matches!(load_panel_csv(dir.path()), Err(Error::Parse { line: 3, .. })));
        write(dir.path(), TARGET_FILE, "series_id,period,amount\na,1,1\n");
        assert!(matches!(load_panel_csv(dir.path()), Err(Error::Parse { line: 1, .. })));
        write(dir.path(), TARGET_FILE, "series_id,period,value\na,1,1\n");
        write(dir.path(), STATIC_FILE, "series_id,feature,value\nzz,size,1\n");
        assert!(matches!(load_panel_csv(dir.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn round_trip_generated_panel() {
        let cfg = crate::dataset::SyntheticConfig {
            series: 3,
            periods: 12,
            ..Default::default()
        };
        let ds = crate::dataset::generate_panel(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_panel_csv(&ds, dir.path()).unwrap();
        let back = load_panel_csv(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
