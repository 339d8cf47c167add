use std::collections::HashMap;
use std::path::Path;

use super::Dataset;
use crate::error::{param, Error, Result};
use crate::model::Batch;
use crate::numerics::Matrix;

const STD_FLOOR: f64 = 1e-12;

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            row,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a headered CSV. Every column but `label_column` must be numeric and
/// is standardized to zero mean and unit variance (constant columns become
/// zeros). Labels are mapped to `0..n` in order of first appearance.
///
/// `row` in parse errors counts the header as line 1.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let Some(label_idx) = headers.iter().position(|h| h == label_column) else {
        return param(format!(
            "label column {label_column:?} not found; columns are {:?}",
            headers.iter().collect::<Vec<_>>()
        ));
    };
    let d = headers.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let row = r + 2;
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                let next = label_ids.len();
                labels.push(*label_ids.entry(cell.to_string()).or_insert(next));
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric feature value {cell:?} in column {:?}", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite feature value {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    let n = labels.len();
    if n == 0 {
        return param("CSV has no data rows");
    }
    let mut features = Matrix::new(n, d, values)?;
    for j in 0..d {
        let col = features.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            let z = if std > STD_FLOOR { (col[i] - mean) / std } else { 0.0 };
            features.set(i, j, z);
        }
    }
    Ok(Dataset {
        batch: Batch::new(features, labels)?,
        groups: vec![0; n],
        n_classes: label_ids.len(),
    })
}

/// Writes features as `x0..x{d-1}` plus a trailing `label` column.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    let d = data.batch.features.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(csv_error)?;
    for i in 0..data.batch.len() {
        let mut rec: Vec<String> = data.batch.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.batch.labels[i].to_string());
        writer.write_record(&rec).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}
