//! JSON persistence of fitted models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FittedCde, FittedCde2d};
use crate::error::{CdeError, Result};

pub const FORMAT_NAME: &str = "flexcde-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "response", rename_all = "snake_case")]
pub enum SavedModel {
    Univariate { model: FittedCde },
    Bivariate { model: FittedCde2d },
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    /// Free-form provenance line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
    #[serde(flatten)]
    body: SavedModel,
}

pub fn to_json(model: &SavedModel) -> Result<String> {
    to_json_with_comment(model, None)
}

pub fn to_json_with_comment(model: &SavedModel, comment: Option<&str>) -> Result<String> {
    let doc = Document {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        comment: comment.map(str::to_string),
        body: model.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| CdeError::Serde(e.to_string()))
}

pub fn from_json(text: &str) -> Result<SavedModel> {
    let head: serde_json::Value = serde_json::from_str(text).map_err(|e| CdeError::Serde(e.to_string()))?;
    match head.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT_NAME) => {}
        other => return Err(CdeError::Serde(format!("not a model document (format {other:?})"))),
    }
    match head.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => return Err(CdeError::Serde(format!("unsupported model version {other:?}"))),
    }
    let doc: Document = serde_json::from_str(text).map_err(|e| CdeError::Serde(e.to_string()))?;
    Ok(doc.body)
}

pub fn save(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    save_with_comment(model, path, None)
}

pub fn save_with_comment(model: &SavedModel, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json_with_comment(model, comment)?).map_err(|e| CdeError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CdeError::io(path, e))?;
    from_json(&text)
}
