//! CSV artifacts: training histories, exported attention maps and metric
//! tables.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use eanet_core::metrics::{AttentionRecord, MetricsTable};
use eanet_core::train::History;

use crate::error::{format_err, io_err, Result};
use crate::fmt_f64;

fn csv_err(origin: &str) -> impl Fn(csv::Error) -> crate::Error + '_ {
    move |e| {
        let line = e.position().map_or(String::new(), |p| format!(" at line {}", p.line()));
        format_err(format!("{origin}{line}: {e}"))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_err(path))
}

/// One row per epoch: `epoch, train_loss, valid_<metric>` (empty when
/// there was no validation set).
pub fn write_history<W: Write>(writer: W, history: &History, metric: &str) -> Result<()> {
    let e = csv_err("history");
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", &format!("valid_{metric}")])
        .map_err(&e)?;
    for r in &history.records {
        let valid = r.valid_metric.map(fmt_f64).unwrap_or_default();
        w.write_record([r.epoch.to_string(), fmt_f64(r.train_loss), valid])
            .map_err(&e)?;
    }
    w.flush().map_err(io_err("history"))?;
    Ok(())
}

pub fn save_history(path: &Path, history: &History, metric: &str) -> Result<()> {
    write_history(File::create(path).map_err(io_err(path))?, history, metric)
}

pub fn write_attention<W: Write>(writer: W, records: &[AttentionRecord]) -> Result<()> {
    let e = csv_err("attention");
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["layer", "head", "row", "col", "logit", "probability"])
        .map_err(&e)?;
    for r in records {
        w.write_record([
            r.layer.to_string(),
            r.head.to_string(),
            r.row.to_string(),
            r.col.to_string(),
            fmt_f64(r.logit),
            fmt_f64(r.probability),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(io_err("attention"))?;
    Ok(())
}

pub fn save_attention(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    write_attention(File::create(path).map_err(io_err(path))?, records)
}

pub fn read_attention<R: Read>(reader: R, origin: &str) -> Result<Vec<AttentionRecord>> {
    let e = csv_err(origin);
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(&e)?.iter().map(String::from).collect();
    if header != ["layer", "head", "row", "col", "logit", "probability"] {
        return Err(format_err(format!("{origin}: unexpected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(&e)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |col: &str| format_err(format!("{origin}: line {line}: bad {col}"));
        let int = |i: usize, col: &str| rec[i].parse::<usize>().map_err(|_| bad(col));
        let real = |i: usize, col: &str| rec[i].parse::<f64>().map_err(|_| bad(col));
        out.push(AttentionRecord {
            layer: int(0, "layer")?,
            head: int(1, "head")?,
            row: int(2, "row")?,
            col: int(3, "col")?,
            logit: real(4, "logit")?,
            probability: real(5, "probability")?,
        });
    }
    Ok(out)
}

pub fn load_attention(path: &Path) -> Result<Vec<AttentionRecord>> {
    read_attention(open(path)?, &path.display().to_string())
}

/// Header row `<label>, model…`; then one row per dataset with its name in
/// the first column.
pub fn read_metrics_table<R: Read>(reader: R, origin: &str, lower_is_better: bool) -> Result<MetricsTable> {
    let e = csv_err(origin);
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(&e)?.clone();
    if header.len() < 2 {
        return Err(format_err(format!(
            "{origin}: needs a header with at least one model column"
        )));
    }
    let cols: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(&e)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(format_err(format!(
                "{origin}: line {line}: {} cells, expected {}",
                rec.len(),
                header.len()
            )));
        }
        rows.push(rec[0].to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                format_err(format!(
                    "{origin}: line {line}: `{cell}` in column {} is not a number",
                    cols[j]
                ))
            })?;
            values.push(v);
        }
    }
    MetricsTable::new(rows, cols, values, lower_is_better).map_err(|err| format_err(format!("{origin}: {err}")))
}

pub fn load_metrics_table(path: &Path, lower_is_better: bool) -> Result<MetricsTable> {
    read_metrics_table(open(path)?, &path.display().to_string(), lower_is_better)
}

pub fn write_metrics_table<W: Write>(writer: W, table: &MetricsTable, label: &str) -> Result<()> {
    let e = csv_err("metrics");
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![label.to_string()];
    header.extend(table.cols.iter().cloned());
    w.write_record(&header).map_err(&e)?;
    for (i, name) in table.rows.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(table.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(&e)?;
    }
    w.flush().map_err(io_err("metrics"))?;
    Ok(())
}
