//! JSON documents in a directory, one file per dataset and per session.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use veto_core::data::DatasetDoc;
use veto_core::Dataset;

use crate::session::{Session, SessionDocument, DOCUMENT_VERSION};

/// Ids become file names, so they are restricted to a safe alphabet.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Debug, Clone)]
pub struct Store {
    root: Option<PathBuf>,
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn json_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

impl Store {
    /// Nothing is written to disk.
    pub fn memory() -> Self {
        Store { root: None }
    }

    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Store { root: Some(root) })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn save_dataset(&self, dataset_ref: &str, data: &Dataset) -> io::Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let bytes = serde_json::to_vec(&DatasetDoc::from(data))?;
        write_atomic(&root.join("datasets").join(format!("{dataset_ref}.json")), &bytes)
    }

    pub fn save_session(&self, session: &Session) -> io::Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let doc = SessionDocument {
            version: DOCUMENT_VERSION,
            session: session.clone(),
        };
        let bytes = serde_json::to_vec(&doc)?;
        write_atomic(&root.join("sessions").join(format!("{}.json", session.session_id)), &bytes)
    }

    pub fn load_datasets(&self) -> io::Result<Vec<(String, Dataset)>> {
        let Some(root) = &self.root else { return Ok(Vec::new()) };
        json_files(&root.join("datasets"))?
            .into_iter()
            .map(|path| {
                let doc: DatasetDoc = serde_json::from_slice(&fs::read(&path)?).map_err(|e| invalid(&path, e))?;
                let data = Dataset::try_from(doc).map_err(|e| invalid(&path, e))?;
                let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((id, data))
            })
            .collect()
    }

    pub fn load_sessions(&self) -> io::Result<Vec<Session>> {
        let Some(root) = &self.root else { return Ok(Vec::new()) };
        json_files(&root.join("sessions"))?
            .into_iter()
            .map(|path| {
                let doc: SessionDocument = serde_json::from_slice(&fs::read(&path)?).map_err(|e| invalid(&path, e))?;
                if doc.version != DOCUMENT_VERSION {
                    return Err(invalid(&path, format!("unsupported version {}", doc.version)));
                }
                Ok(doc.session)
            })
            .collect()
    }
}
