//! Dataset file formats.
//!
//! CSV: header row with feature columns `f0..f{d-1}`, optional `t`
//! (integer timepoint) and `w` (weight) columns.
//!
//! Binary: one JSON header line (n, d, column roles, endianness) followed by
//! a little-endian f64 row-major payload; timepoints and weights, when
//! present, are appended per row after the features.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Binary,
}

/// Pick a format from the file extension: `.csv` is CSV, everything else
/// is the binary container.
pub fn format_for_path(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Format::Csv,
        _ => Format::Binary,
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        Format::Csv => load_csv(path),
        Format::Binary => load_binary(path),
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset, format: Format) -> Result<()> {
    let path = path.as_ref();
    match format {
        Format::Csv => save_csv(path, ds),
        Format::Binary => save_binary(path, ds),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?
        .clone();
    let mut feature_cols = Vec::new();
    let mut t_col = None;
    let mut w_col = None;
    for (i, h) in headers.iter().enumerate() {
        match h {
            "t" => t_col = Some(i),
            "w" => w_col = Some(i),
            _ if h.starts_with('f') && h[1..].parse::<usize>().is_ok() => {
                feature_cols.push((h[1..].parse::<usize>().unwrap(), i))
            }
            other => {
                return Err(Error::Data {
                    location: format!("{} header", path.display()),
                    reason: format!("unknown column `{other}` (expected f0..f{{d-1}}, t, w)"),
                })
            }
        }
    }
    feature_cols.sort_unstable();
    for (rank, (idx, _)) in feature_cols.iter().enumerate() {
        if *idx != rank {
            return Err(Error::Data {
                location: format!("{} header", path.display()),
                reason: format!("feature columns must be f0..f{{d-1}} without gaps, missing f{rank}"),
            });
        }
    }
    let d = feature_cols.len();
    if d == 0 {
        return Err(Error::Data {
            location: path.display().to_string(),
            reason: "no feature columns".into(),
        });
    }
    let mut points = Vec::new();
    let mut timepoints = Vec::new();
    let mut weights = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data {
            location: format!("{} row {row_idx}", path.display()),
            reason: e.to_string(),
        })?;
        for &(_, col) in &feature_cols {
            let cell = record.get(col).ok_or_else(|| Error::Data {
                location: format!("{} row {row_idx}", path.display()),
                reason: "short row".into(),
            })?;
            let v: f64 = cell.trim().parse().map_err(|_| Error::Data {
                location: format!("{} row {row_idx}", path.display()),
                reason: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    location: format!("{} row {row_idx}", path.display()),
                    reason: "non-finite value".into(),
                });
            }
            points.push(v);
        }
        if let Some(col) = t_col {
            let cell = record.get(col).unwrap_or("");
            let v: i64 = cell.trim().parse().map_err(|_| Error::Data {
                location: format!("{} row {row_idx}", path.display()),
                reason: format!("bad timepoint `{cell}`"),
            })?;
            timepoints.push(v);
        }
        if let Some(col) = w_col {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Data {
                location: format!("{} row {row_idx}", path.display()),
                reason: format!("bad weight `{cell}`"),
            })?;
            weights.push(v);
        }
    }
    let n = points.len() / d;
    let mut ds = Dataset::from_rows(points, n, d)?;
    if t_col.is_some() {
        ds.timepoint = Some(timepoints);
    }
    if w_col.is_some() {
        ds.set_weights(weights)?;
    }
    Ok(ds)
}

fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    if ds.timepoint.is_some() {
        header.push("t".into());
    }
    if ds.weight.is_some() {
        header.push("w".into());
    }
    writer.write_record(&header).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    for i in 0..ds.n() {
        let mut record: Vec<String> = ds.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(t) = &ds.timepoint {
            record.push(t[i].to_string());
        }
        if let Some(w) = &ds.weight {
            record.push(format!("{}", w[i]));
        }
        writer.write_record(&record).map_err(|e| Error::Data {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BinaryHeader {
    format: String,
    n: usize,
    d: usize,
    has_timepoint: bool,
    has_weight: bool,
    endianness: String,
}

const BINARY_FORMAT: &str = "eggflow-dataset";

fn save_binary(path: &Path, ds: &Dataset) -> Result<()> {
    let header = BinaryHeader {
        format: BINARY_FORMAT.into(),
        n: ds.n(),
        d: ds.dim(),
        has_timepoint: ds.timepoint.is_some(),
        has_weight: ds.weight.is_some(),
        endianness: "little".into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for i in 0..ds.n() {
        for v in ds.row(i) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(t) = &ds.timepoint {
            bytes.extend_from_slice(&(t[i] as f64).to_le_bytes());
        }
        if let Some(w) = &ds.weight {
            bytes.extend_from_slice(&w[i].to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn load_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Data {
        location: path.display().to_string(),
        reason: "missing header line".into(),
    })?;
    let header: BinaryHeader = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: format!("bad header: {e}"),
    })?;
    if header.format != BINARY_FORMAT {
        return Err(Error::Data {
            location: path.display().to_string(),
            reason: format!("unknown format `{}`", header.format),
        });
    }
    if header.endianness != "little" {
        return Err(Error::Data {
            location: path.display().to_string(),
            reason: format!("unsupported endianness `{}`", header.endianness),
        });
    }
    let row_width = header.d + usize::from(header.has_timepoint) + usize::from(header.has_weight);
    let body = &bytes[newline + 1..];
    if body.len() != header.n * row_width * 8 {
        return Err(Error::Data {
            location: path.display().to_string(),
            reason: format!(
                "payload is {} bytes, header declares {}",
                body.len(),
                header.n * row_width * 8
            ),
        });
    }
    let mut points = Vec::with_capacity(header.n * header.d);
    let mut timepoints = Vec::new();
    let mut weights = Vec::new();
    for row in 0..header.n {
        let start = row * row_width * 8;
        for c in 0..header.d {
            let off = start + c * 8;
            points.push(f64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
        }
        let mut off = start + header.d * 8;
        if header.has_timepoint {
            let v = f64::from_le_bytes(body[off..off + 8].try_into().unwrap());
            timepoints.push(v as i64);
            off += 8;
        }
        if header.has_weight {
            weights.push(f64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
        }
    }
    let mut ds = Dataset::from_rows(points, header.n, header.d)?;
    if header.has_timepoint {
        ds.timepoint = Some(timepoints);
    }
    if header.has_weight {
        ds.set_weights(weights)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_timepoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "f0,f1,t\n0.5,1.5,0\n-1.0,2.0,1\n0.25,0.125,1\n").unwrap();
        let ds = load_dataset(&path, Format::Csv).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.timepoint, Some(vec![0, 1, 1]));
        assert_eq!(ds.row(1), &[-1.0, 2.0]);
    }

    #[test]
    fn csv_nan_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1\n1.0,2.0\nNaN,0.0\n").unwrap();
        let err = load_dataset(&path, Format::Csv).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn binary_round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        let mut ds = Dataset::from_rows(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3, 2).unwrap();
        ds.timepoint = Some(vec![5, 6, 7]);
        ds.set_weights(vec![0.2, 0.3, 0.5]).unwrap();
        save_dataset(&path, &ds, Format::Binary).unwrap();
        let loaded = load_dataset(&path, Format::Binary).unwrap();
        assert_eq!(ds, loaded);
    }
}
