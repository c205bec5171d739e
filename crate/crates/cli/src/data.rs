//! Measurement CSV reader. Expected layout matches the simulator's output:
//! a header row with `t`, `y1..ym`, optionally `u1..up` and truth columns
//! `x1..xd`; comma-separated, `.` decimal point.

use std::path::Path;

use kfgrad::filter::FilterModel;
use kfgrad::Mat64;

use crate::CliError;

pub struct DataSet {
    pub ys: Vec<Mat64>,
    pub inputs: Option<Vec<Mat64>>,
    pub truths: Option<Vec<Mat64>>,
}

fn column_block(headers: &[String], prefix: &str) -> Vec<usize> {
    let mut cols = Vec::new();
    for i in 1.. {
        match headers.iter().position(|h| h == &format!("{prefix}{i}")) {
            Some(idx) => cols.push(idx),
            None => break,
        }
    }
    cols
}

pub fn read_data(path: &Path, model: &FilterModel<f64>) -> Result<DataSet, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::io(format!("cannot read data file {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();

    let y_cols = column_block(&headers, "y");
    let u_cols = column_block(&headers, "u");
    let x_cols = column_block(&headers, "x");
    let m = model.meas_dim();
    if y_cols.len() < m {
        return Err(CliError::usage(format!(
            "data file has {} measurement columns, model needs {m}",
            y_cols.len()
        )));
    }

    let mut ys = Vec::new();
    let mut inputs = Vec::new();
    let mut truths = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let parse = |col: usize| -> Result<f64, CliError> {
            record
                .get(col)
                .ok_or_else(|| CliError::usage(format!("row {row_idx}: missing column {col}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| CliError::usage(format!("row {row_idx}: {e}")))
        };
        let take = |cols: &[usize]| -> Result<Mat64, CliError> {
            let vals = cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>, _>>()?;
            Mat64::vec(&vals).map_err(|e| CliError::usage(format!("row {row_idx}: {e}")))
        };
        ys.push(take(&y_cols[..m])?);
        if !u_cols.is_empty() {
            inputs.push(take(&u_cols)?);
        }
        if !x_cols.is_empty() {
            truths.push(take(&x_cols)?);
        }
    }
    if ys.is_empty() {
        return Err(CliError::usage(format!("{}: no data rows", path.display())));
    }
    Ok(DataSet {
        ys,
        inputs: if inputs.is_empty() { None } else { Some(inputs) },
        truths: if truths.is_empty() { None } else { Some(truths) },
    })
}
