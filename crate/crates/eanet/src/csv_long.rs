//! Long-format CSV series files: one row per `(series_id, t)` with columns
//! `series_id, t, dim_0 … dim_{C−1}, target`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use eanet_core::data::{Targets, TimeSeriesDataset};

use crate::error::{format_err, io_err, Error, Result};
use crate::fmt_f64;

/// How the `target` column is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Ignore,
    Regression,
    /// Integer labels; the class count defaults to the largest label + 1.
    Classes {
        n_classes: Option<usize>,
    },
}

struct Series {
    id: String,
    steps: Vec<(usize, Vec<f64>, u64)>,
    target: String,
    target_line: u64,
}

fn csv_err(origin: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(String::new(), |p| format!(" at line {}", p.line()));
    format_err(format!("{origin}{line}: {e}"))
}

fn check_header(origin: &str, header: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.len();
    let bad = |msg: String| Err(format_err(format!("{origin}: header: {msg}")));
    if n < 4 || cols[0] != "series_id" || cols[1] != "t" || cols[n - 1] != "target" {
        return bad(format!(
            "expected series_id, t, dim_0 … dim_{{C-1}}, target; found {}",
            cols.join(", ")
        ));
    }
    for (k, name) in cols[2..n - 1].iter().enumerate() {
        if *name != format!("dim_{k}") {
            return bad(format!("column {} is `{name}`, expected `dim_{k}`", k + 3));
        }
    }
    Ok(n - 3)
}

/// Parses a long-format file. Rows are grouped by `series_id` in order of
/// first appearance and sorted by `t`; shorter series are zero padded to
/// the longest one and keep their own length. The target is read from the
/// first row of each series.
pub fn read_csv_long<R: Read>(reader: R, kind: TargetKind, origin: &str) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(origin, e))?.clone();
    let c = check_header(origin, &header)?;
    let width = header.len();

    let mut series: Vec<Series> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(origin, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |msg: String| format_err(format!("{origin}: line {line}: {msg}"));
        if record.len() != width {
            return Err(row_err(format!(
                "expected {width} fields ({c} dimensions), found {}",
                record.len()
            )));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(row_err("empty series_id".into()));
        }
        let t: usize = record[1]
            .parse()
            .map_err(|_| row_err(format!("t = `{}` is not a non-negative integer", &record[1])))?;
        let mut dims = Vec::with_capacity(c);
        for k in 0..c {
            let cell = &record[2 + k];
            let v: f64 = cell
                .parse()
                .map_err(|_| row_err(format!("dim_{k} = `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(row_err(format!("dim_{k} = `{cell}` is not finite")));
            }
            dims.push(v);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            series.push(Series {
                id,
                steps: Vec::new(),
                target: record[width - 1].to_string(),
                target_line: line,
            });
            series.len() - 1
        });
        series[slot].steps.push((t, dims, line));
    }
    if series.is_empty() {
        return Err(format_err(format!("{origin}: no data rows")));
    }

    let t_max = series.iter().map(|s| s.steps.len()).max().unwrap_or(0);
    let mut values = Vec::with_capacity(series.len() * t_max * c);
    let mut lengths = Vec::with_capacity(series.len());
    for s in &mut series {
        s.steps.sort_by_key(|step| step.0);
        if let Some(w) = s.steps.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(format_err(format!(
                "{origin}: line {}: duplicate step t = {} in series `{}`",
                w[1].2, w[1].0, s.id
            )));
        }
        for (_, dims, _) in &s.steps {
            values.extend_from_slice(dims);
        }
        values.resize(values.len() + (t_max - s.steps.len()) * c, 0.0);
        lengths.push(s.steps.len());
    }

    let target_err = |s: &Series, what: &str| {
        format_err(format!(
            "{origin}: line {}: target `{}` of series `{}` is not {what}",
            s.target_line, s.target, s.id
        ))
    };
    let targets = match kind {
        TargetKind::Ignore => Targets::None,
        TargetKind::Regression => {
            let mut y = Vec::with_capacity(series.len());
            for s in &series {
                match s.target.parse::<f64>() {
                    Ok(v) if v.is_finite() => y.push(v),
                    _ => return Err(target_err(s, "a finite number")),
                }
            }
            Targets::Regression(y)
        }
        TargetKind::Classes { n_classes } => {
            let mut labels = Vec::with_capacity(series.len());
            for s in &series {
                labels.push(s.target.parse::<usize>().map_err(|_| target_err(s, "a class label"))?);
            }
            let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            Targets::Classes { labels, n_classes }
        }
    };
    let ids = series.into_iter().map(|s| s.id).collect();
    Ok(TimeSeriesDataset::new(t_max, c, values, lengths, ids, targets)?)
}

pub fn load_csv_long(path: &Path, kind: TargetKind) -> Result<TimeSeriesDataset> {
    let file = File::open(path).map_err(io_err(path))?;
    read_csv_long(file, kind, &path.display().to_string())
}

/// Writes the valid steps of every series; values use 17 significant
/// digits so a reload is exact.
pub fn write_csv_long<W: Write>(writer: W, ds: &TimeSeriesDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend((0..ds.c).map(|k| format!("dim_{k}")));
    header.push("target".into());
    w.write_record(&header).map_err(|e| csv_err("output", e))?;
    for i in 0..ds.len() {
        let target = match &ds.targets {
            Targets::None => String::new(),
            Targets::Regression(y) => fmt_f64(y[i]),
            Targets::Classes { labels, .. } => labels[i].to_string(),
        };
        let series = ds.series(i);
        for t in 0..ds.lengths[i] {
            let mut row = vec![ds.ids[i].clone(), t.to_string()];
            row.extend(series[t * ds.c..(t + 1) * ds.c].iter().map(|&v| fmt_f64(v)));
            row.push(target.clone());
            w.write_record(&row).map_err(|e| csv_err("output", e))?;
        }
    }
    w.flush().map_err(io_err("output"))?;
    Ok(())
}

pub fn save_csv_long(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    write_csv_long(file, ds)
}
