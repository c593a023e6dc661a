use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StatError;

/// One row of a scores file: `case_id,model,score,label,stratum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: String,
    pub model: String,
    pub score: f64,
    pub label: u8,
    #[serde(default)]
    pub stratum: String,
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<(), StatError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| StatError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| StatError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| StatError::Io(e.to_string()))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>, StatError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| StatError::Io(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(|e| StatError::Io(format!("{}: {e}", path.display())))?;
    if let Some(bad) = rows.iter().find(|r| r.label > 1) {
        return Err(StatError::Io(format!("case {} has non-binary label {}", bad.case_id, bad.label)));
    }
    Ok(rows)
}
