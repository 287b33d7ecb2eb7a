//! Versioned JSON container for trained stages.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "shapeseq-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    /// Stage tag, checked on load so one stage's file is not read as another.
    pub stage: String,
    /// Pipeline configuration the model was trained under, echoed verbatim.
    pub config: serde_json::Value,
    pub model: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    stage: String,
}

pub fn save<T: Serialize>(path: &Path, stage: &str, config: serde_json::Value, model: &T) -> Result<()> {
    let ck = Checkpoint {
        format: FORMAT.to_string(),
        version: VERSION,
        stage: stage.to_string(),
        config,
        model,
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint ({e})", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: unknown format {}", path.display(), header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {VERSION})",
            path.display(),
            header.version
        )));
    }
    if header.stage != stage {
        return Err(Error::Checkpoint(format!(
            "{}: holds stage {}, expected {stage}",
            path.display(),
            header.stage
        )));
    }
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/ck.json");
        let model = vec![0.1f64, 1.0 / 3.0, -2.5e-17];
        save(&p, "A", serde_json::json!({"seed": 3}), &model).unwrap();
        let ck: Checkpoint<Vec<f64>> = load(&p, "A").unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.config["seed"], 3);
        assert!(matches!(load::<Vec<f64>>(&p, "B"), Err(Error::Checkpoint(_))));
        std::fs::write(&p, "{\"format\":\"x\",\"version\":1,\"stage\":\"A\"}").unwrap();
        assert!(load::<Vec<f64>>(&p, "A").is_err());
    }
}
