//! Output writers: CSV with round-trip-exact numbers, pretty JSON, and 8-bit
//! binary graymaps.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::info_estimators::SampleReport;
use crate::numeric::format_float;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// `id,total,std_error`, one row per sample.
pub fn write_reports_csv(path: &Path, samples: &[SampleReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["id", "total", "std_error"])?;
    for s in samples {
        w.write_record([
            s.id.clone(),
            format_float(s.report.total),
            format_float(s.report.std_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header row plus one row of strings per record.
pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `id,d0,d1,...`
pub fn write_vectors_csv(path: &Path, prefix: &str, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|j| format!("{prefix}{j}")));
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(id, v)| {
            std::iter::once(id.clone())
                .chain(v.iter().map(|x| format_float(*x)))
                .collect()
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Binary PGM (`P5`), row-major, min-max scaled to `0..=255`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, values)?)?;
    Ok(())
}

pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    check_dim("image", width * height, values.len())?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("heatmap contains non-finite values".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(values.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}
