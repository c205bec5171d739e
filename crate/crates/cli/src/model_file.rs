//! JSON model description: dimensions are inferred from `p0`/`x0`, matrices
//! are nested row-major arrays, and parameters may be given either once
//! (`f`, `q`, ...) or per step (`f_steps`, `q_steps`, ...). The file may
//! also carry a path to the measurement CSV, resolved relative to the model
//! file itself unless overridden on the command line.

use std::path::{Path, PathBuf};

use kfgrad::filter::{FilterModel, MatSeq};
use kfgrad::Mat64;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub f: Option<Vec<Vec<f64>>>,
    pub f_steps: Option<Vec<Vec<Vec<f64>>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub b_steps: Option<Vec<Vec<Vec<f64>>>>,
    pub h: Option<Vec<Vec<f64>>>,
    pub h_steps: Option<Vec<Vec<Vec<f64>>>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub q_steps: Option<Vec<Vec<Vec<f64>>>>,
    pub r: Option<Vec<Vec<f64>>>,
    pub r_steps: Option<Vec<Vec<Vec<f64>>>>,
    pub p0: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    /// Path to the measurement CSV (may be overridden by `--data`).
    pub data: Option<String>,
}

fn mat(rows: &[Vec<f64>], name: &str) -> Result<Mat64, CliError> {
    Mat64::from_rows(rows).map_err(|e| CliError::usage(format!("model field '{name}': {e}")))
}

fn seq(
    name: &str,
    single: &Option<Vec<Vec<f64>>>,
    steps: &Option<Vec<Vec<Vec<f64>>>>,
    required: bool,
) -> Result<Option<MatSeq<f64>>, CliError> {
    match (single, steps) {
        (Some(_), Some(_)) => Err(CliError::usage(format!(
            "model gives both '{name}' and '{name}_steps'"
        ))),
        (Some(m), None) => Ok(Some(MatSeq::Static(mat(m, name)?))),
        (None, Some(v)) => {
            let mats = v
                .iter()
                .map(|m| mat(m, name))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Some(MatSeq::PerStep(mats)))
        }
        (None, None) if required => {
            Err(CliError::usage(format!("model is missing '{name}'")))
        }
        (None, None) => Ok(None),
    }
}

pub struct LoadedModel {
    pub model: FilterModel<f64>,
    /// Measurement CSV path from the file, resolved against its directory.
    pub data_path: Option<PathBuf>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read model file {}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("model file {}: {e}", path.display())))?;

    let model = FilterModel {
        f: seq("f", &file.f, &file.f_steps, true)?.unwrap(),
        b: seq("b", &file.b, &file.b_steps, false)?,
        h: seq("h", &file.h, &file.h_steps, true)?.unwrap(),
        q: seq("q", &file.q, &file.q_steps, true)?.unwrap(),
        r: seq("r", &file.r, &file.r_steps, true)?.unwrap(),
        p0: mat(&file.p0, "p0")?,
        x0: Mat64::vec(&file.x0).map_err(|e| CliError::usage(format!("model field 'x0': {e}")))?,
        u: None,
    };
    // Structural validation up front; per-step lengths are checked again
    // once the measurement count is known.
    model
        .validate(0)
        .map_err(|e| CliError::usage(format!("model file {}: {e}", path.display())))?;

    let data_path = file.data.as_ref().map(|rel| {
        let p = PathBuf::from(rel);
        if p.is_absolute() {
            p
        } else {
            path.parent().unwrap_or(Path::new(".")).join(p)
        }
    });
    Ok(LoadedModel { model, data_path })
}
