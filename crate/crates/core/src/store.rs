//! On-disk formats for learners: a JSON header next to a raw little-endian
//! `f64` parameter file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, Parameters, WeakLearner};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerHeader {
    pub version: u32,
    pub id: String,
    pub spec: NetworkSpec,
    pub macs: u64,
    pub param_count: u64,
    pub eval_accuracy: f64,
    /// Parameter file, relative to the header.
    pub params_file: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the header path.
pub fn save_learner(learner: &WeakLearner, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_name = format!("{stem}.bin");
    let bytes: Vec<u8> = learner
        .params
        .flatten()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let bin_path = dir.join(&bin_name);
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    let header = LearnerHeader {
        version: FORMAT_VERSION,
        id: learner.id.clone(),
        spec: learner.spec.clone(),
        macs: learner.macs,
        param_count: learner.param_count(),
        eval_accuracy: learner.eval_accuracy,
        params_file: bin_name,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &header)?;
    Ok(path)
}

pub fn load_learner(header_path: &Path) -> Result<WeakLearner> {
    let header: LearnerHeader = read_json(header_path)?;
    let fail = |message: String| Error::Load {
        path: header_path.to_path_buf(),
        message,
    };
    if header.version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported learner format version {}",
            header.version
        )));
    }
    header.spec.validate()?;
    let bin_path = header_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&header.params_file);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(fail(format!(
            "{} is not a whole number of f64 values",
            bin_path.display()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = Parameters::from_flat(&header.spec, &values).map_err(|e| fail(e.to_string()))?;
    let mut learner = WeakLearner::new(header.id, header.spec, params)?;
    if learner.macs != header.macs {
        return Err(fail(format!(
            "header says {} MACs, spec has {}",
            header.macs, learner.macs
        )));
    }
    learner.eval_accuracy = header.eval_accuracy;
    Ok(learner)
}
