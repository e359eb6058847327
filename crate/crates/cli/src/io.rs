//! Sample files (header-less CSV, one row per sample) and result output.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use dfil_core::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn read_samples(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |message: String| CliError::Samples {
            path: path.to_path_buf(),
            row,
            message,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let values = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(bad(format!("expected {} values, found {}", width.unwrap_or(0), values.len())));
        }
        out.push(Tensor::vector(values).map_err(|e| bad(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::Samples {
            path: path.to_path_buf(),
            row: 0,
            message: "no samples".into(),
        });
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Tensor]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for s in samples {
        writer.write_record(s.data().iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Writes `rows` as CSV with a header taken from the row fields.
pub fn write_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink(out)?);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| CliError::io(out.unwrap_or(Path::new("<stdout>")), e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| CliError::io(out.unwrap_or(Path::new("<stdout>")), e))
}
