//! On-disk layout, one directory per project:
//!
//! ```text
//! <root>/<project>/project.json      current state, rewritten atomically
//! <root>/<project>/changes.jsonl     append-only change log
//! <root>/<project>/runs/<run>.json   finished run records
//! <root>/<project>/runs/<run>.log.jsonl
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::ServiceError;
use crate::run::RunRecord;
use crate::state::{ChangeLogEntry, ProjectState};

const PROJECT_FILE: &str = "project.json";
const CHANGES_FILE: &str = "changes.jsonl";
const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub fn valid_project_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// The serialized form of a state. Map fields are ordered, so equal states
/// produce equal bytes.
pub fn canonical_json(state: &ProjectState) -> Result<String, ServiceError> {
    let mut out = serde_json::to_string_pretty(state)?;
    out.push('\n');
    Ok(out)
}

/// Writes `contents` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ServiceError> {
    let dir = path
        .parent()
        .ok_or_else(|| ServiceError::Storage(format!("{} has no parent", path.display())))?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.project_dir(id).join(PROJECT_FILE).is_file()
    }

    pub fn project_ids(&self) -> Result<Vec<String>, ServiceError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if valid_project_id(&name) && entry.path().join(PROJECT_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Writes a new project directory. The directory appears complete or not
    /// at all.
    pub fn create(&self, state: &ProjectState, first: &ChangeLogEntry) -> Result<(), ServiceError> {
        if !valid_project_id(&state.project_id) {
            return Err(ServiceError::InvalidProjectId(state.project_id.clone()));
        }
        let target = self.project_dir(&state.project_id);
        if target.exists() {
            return Err(ServiceError::ProjectExists(state.project_id.clone()));
        }
        let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(&self.root)?;
        fs::create_dir(staging.path().join(RUNS_DIR))?;
        fs::write(staging.path().join(PROJECT_FILE), canonical_json(state)?)?;
        fs::write(staging.path().join(CHANGES_FILE), format!("{}\n", serde_json::to_string(first)?))?;
        let staged = staging.keep();
        fs::rename(&staged, &target).map_err(|e| {
            let _ = fs::remove_dir_all(&staged);
            ServiceError::Storage(e.to_string())
        })?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<ProjectState, ServiceError> {
        let path = self.project_dir(id).join(PROJECT_FILE);
        let raw = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServiceError::UnknownProject(id.to_string()),
            _ => ServiceError::Storage(e.to_string()),
        })?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, state: &ProjectState) -> Result<(), ServiceError> {
        let path = self.project_dir(&state.project_id).join(PROJECT_FILE);
        write_atomic(&path, canonical_json(state)?.as_bytes())
    }

    pub fn append_change(&self, id: &str, entry: &ChangeLogEntry) -> Result<(), ServiceError> {
        let path = self.project_dir(id).join(CHANGES_FILE);
        // drop a torn tail left by an interrupted append
        let raw = fs::read(&path)?;
        if raw.last().is_some_and(|&b| b != b'\n') {
            let keep = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
        }
        let mut file = OpenOptions::new().append(true).open(path)?;
        file.write_all(format!("{}\n", serde_json::to_string(entry)?).as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    /// The change log. A torn final line (no trailing newline) is ignored.
    pub fn changes(&self, id: &str) -> Result<Vec<ChangeLogEntry>, ServiceError> {
        let raw = fs::read_to_string(self.project_dir(id).join(CHANGES_FILE))?;
        let complete = match raw.rfind('\n') {
            Some(i) => &raw[..=i],
            None => "",
        };
        complete
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(ServiceError::from))
            .collect()
    }

    pub fn save_run(&self, id: &str, record: &RunRecord) -> Result<(), ServiceError> {
        let dir = self.project_dir(id).join(RUNS_DIR);
        fs::create_dir_all(&dir)?;
        let mut body = serde_json::to_string_pretty(record)?;
        body.push('\n');
        write_atomic(&dir.join(format!("{}.json", record.run_id)), body.as_bytes())
    }

    pub fn save_run_log(&self, id: &str, run_id: &str, jsonl: &str) -> Result<(), ServiceError> {
        let dir = self.project_dir(id).join(RUNS_DIR);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(format!("{run_id}.log.jsonl")), jsonl.as_bytes())
    }

    pub fn run_log_path(&self, id: &str, run_id: &str) -> PathBuf {
        self.project_dir(id).join(RUNS_DIR).join(format!("{run_id}.log.jsonl"))
    }

    pub fn load_runs(&self, id: &str) -> Result<Vec<RunRecord>, ServiceError> {
        let dir = self.project_dir(id).join(RUNS_DIR);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut runs = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            if name.ends_with(".json") && !name.ends_with(".log.jsonl") {
                runs.push(serde_json::from_str::<RunRecord>(&fs::read_to_string(&path)?)?);
            }
        }
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(runs)
    }
}
