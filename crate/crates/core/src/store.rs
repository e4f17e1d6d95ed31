//! Append-only, line-delimited record store rooted at a run directory.
//!
//! Layout:
//!
//! ```text
//! <run_dir>/tasks.jsonl
//! <run_dir>/trajectories.jsonl
//! <run_dir>/verdicts.jsonl
//! <run_dir>/manifests.jsonl
//! <run_dir>/rows.jsonl
//! <run_dir>/episodes.jsonl
//! <run_dir>/images/<task_id>/<step_index>.<ext>
//! ```
//!
//! Each record kind has its own file with a single writer (guarded by a
//! mutex). A line is written with one `write_all` call, so concurrent
//! readers always observe a prefix of complete lines plus at most one torn
//! trailing line, which is ignored.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    InvariantError, RunManifest, RunRow, Task, Trajectory, VerdictRecord, SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid record: {0}")]
    Invariant(#[from] InvariantError),
    #[error("duplicate {kind} id `{id}`")]
    Duplicate { kind: RecordKind, id: String },
    #[error("{kind} `{id}` not found")]
    NotFound { kind: RecordKind, id: String },
    #[error("{}:{line}: {message}", file.display())]
    Decode { file: PathBuf, line: usize, message: String },
    #[error("unsupported schema version {found} at {}:{line}", file.display())]
    SchemaVersion { file: PathBuf, line: usize, found: u32 },
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Task,
    Trajectory,
    Verdict,
    Manifest,
}

impl RecordKind {
    const ALL: [RecordKind; 4] =
        [RecordKind::Task, RecordKind::Trajectory, RecordKind::Verdict, RecordKind::Manifest];

    fn file_name(self) -> &'static str {
        match self {
            RecordKind::Task => "tasks.jsonl",
            RecordKind::Trajectory => "trajectories.jsonl",
            RecordKind::Verdict => "verdicts.jsonl",
            RecordKind::Manifest => "manifests.jsonl",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecordKind::Task => "task",
            RecordKind::Trajectory => "trajectory",
            RecordKind::Verdict => "verdict",
            RecordKind::Manifest => "manifest",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Record {
    Task(Task),
    Trajectory(Trajectory),
    Verdict(VerdictRecord),
    Manifest(RunManifest),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Task(_) => RecordKind::Task,
            Record::Trajectory(_) => RecordKind::Trajectory,
            Record::Verdict(_) => RecordKind::Verdict,
            Record::Manifest(_) => RecordKind::Manifest,
        }
    }

    /// Trajectories are keyed by their task id; verdicts by `task:variant`.
    pub fn id(&self) -> String {
        match self {
            Record::Task(t) => t.id.clone(),
            Record::Trajectory(t) => t.task_id.clone(),
            Record::Verdict(v) => v.id(),
            Record::Manifest(m) => m.run_id.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        match self {
            Record::Task(t) => t.validate(),
            Record::Trajectory(t) => t.validate_shape(),
            Record::Verdict(v) => {
                if v.task_id.is_empty() || v.variant.is_empty() {
                    return Err(InvariantError::Empty("verdict key"));
                }
                Ok(())
            }
            Record::Manifest(m) => {
                if m.run_id.is_empty() {
                    return Err(InvariantError::Empty("run id"));
                }
                Ok(())
            }
        }
    }
}

/// The on-disk line shape: `{"schema_version":1,"id":..,"kind":..,"body":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    id: String,
    #[serde(flatten)]
    record: Record,
}

/// Encodes a record to its canonical line (without the trailing newline).
pub fn encode_record(record: &Record) -> String {
    let env = Envelope { schema_version: SCHEMA_VERSION, id: record.id(), record: record.clone() };
    serde_json::to_string(&env).expect("record types always serialize")
}

pub fn decode_record(line: &str) -> Result<Record, String> {
    let env: Envelope = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(format!("unsupported schema version {}", env.schema_version));
    }
    Ok(env.record)
}

/// Resolves image references against a run directory.
#[derive(Debug, Clone)]
pub struct ImageRoot {
    root: PathBuf,
}

impl ImageRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_remote(uri: &str) -> bool {
        uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:")
    }

    /// Local path for a reference, or `None` for remote locators.
    pub fn local_path(&self, image: &crate::model::ImageRef) -> Option<PathBuf> {
        if Self::is_remote(&image.uri) {
            return None;
        }
        let p = Path::new(&image.uri);
        Some(if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) })
    }

    pub fn is_resolvable(&self, image: &crate::model::ImageRef) -> bool {
        match self.local_path(image) {
            None => true,
            Some(p) => p.is_file(),
        }
    }
}

pub struct Store {
    root: PathBuf,
    writers: [Mutex<Option<File>>; 4],
    aux: Mutex<HashMap<&'static str, File>>,
    index: RwLock<HashMap<(RecordKind, String), Record>>,
}

impl Store {
    /// Opens (creating if needed) a store and indexes every existing record.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut index = HashMap::new();
        for kind in RecordKind::ALL {
            let path = root.join(kind.file_name());
            for (line_no, line) in read_complete_lines(&path)? {
                let record = decode_record(&line).map_err(|message| {
                    if message.starts_with("unsupported schema version") {
                        let found = message.rsplit(' ').next().and_then(|v| v.parse().ok()).unwrap_or(0);
                        StoreError::SchemaVersion { file: path.clone(), line: line_no, found }
                    } else {
                        StoreError::Decode { file: path.clone(), line: line_no, message }
                    }
                })?;
                if record.kind() != kind {
                    return Err(StoreError::Decode {
                        file: path.clone(),
                        line: line_no,
                        message: format!("{} record in {} file", record.kind(), kind),
                    });
                }
                index.insert((kind, record.id()), record);
            }
        }
        Ok(Self {
            root,
            writers: Default::default(),
            aux: Mutex::new(HashMap::new()),
            index: RwLock::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn images(&self) -> ImageRoot {
        ImageRoot::new(&self.root)
    }

    /// Validates and appends a record, returning its id.
    pub fn write(&self, record: Record) -> Result<String, StoreError> {
        record.validate()?;
        let kind = record.kind();
        let id = record.id();
        let mut index = self.index.write().expect("store index poisoned");
        if index.contains_key(&(kind, id.clone())) {
            return Err(StoreError::Duplicate { kind, id });
        }
        let mut line = encode_record(&record);
        line.push('\n');
        let path = self.root.join(kind.file_name());
        {
            let mut slot = self.writers[kind.slot()].lock().expect("writer poisoned");
            if slot.is_none() {
                *slot = Some(open_append(&path)?);
            }
            let file = slot.as_mut().expect("writer opened above");
            file.write_all(line.as_bytes()).map_err(io_err(&path))?;
            file.flush().map_err(io_err(&path))?;
        }
        index.insert((kind, id.clone()), record);
        Ok(id)
    }

    pub fn read(&self, kind: RecordKind, id: &str) -> Result<Record, StoreError> {
        self.index
            .read()
            .expect("store index poisoned")
            .get(&(kind, id.to_string()))
            .cloned()
            .ok_or_else(|| StoreError::NotFound { kind, id: id.to_string() })
    }

    pub fn contains(&self, kind: RecordKind, id: &str) -> bool {
        self.index.read().expect("store index poisoned").contains_key(&(kind, id.to_string()))
    }

    pub fn read_task(&self, id: &str) -> Result<Task, StoreError> {
        match self.read(RecordKind::Task, id)? {
            Record::Task(t) => Ok(t),
            _ => unreachable!("index keyed by kind"),
        }
    }

    pub fn read_trajectory(&self, task_id: &str) -> Result<Trajectory, StoreError> {
        match self.read(RecordKind::Trajectory, task_id)? {
            Record::Trajectory(t) => Ok(t),
            _ => unreachable!("index keyed by kind"),
        }
    }

    pub fn read_verdict(&self, task_id: &str, variant: &str) -> Result<VerdictRecord, StoreError> {
        match self.read(RecordKind::Verdict, &format!("{task_id}:{variant}"))? {
            Record::Verdict(v) => Ok(v),
            _ => unreachable!("index keyed by kind"),
        }
    }

    /// Manifest header merged with the rows appended to `rows.jsonl`.
    pub fn read_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let mut manifest = match self.read(RecordKind::Manifest, run_id)? {
            Record::Manifest(m) => m,
            _ => unreachable!("index keyed by kind"),
        };
        manifest.rows.extend(self.read_rows()?);
        Ok(manifest)
    }

    pub fn manifests(&self) -> Vec<RunManifest> {
        self.list(RecordKind::Manifest)
            .into_iter()
            .filter_map(|r| match r {
                Record::Manifest(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    /// All records of a kind, sorted by id.
    pub fn list(&self, kind: RecordKind) -> Vec<Record> {
        let index = self.index.read().expect("store index poisoned");
        let mut out: Vec<(String, Record)> = index
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|((_, id), r)| (id.clone(), r.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.into_iter().map(|(_, r)| r).collect()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.list(RecordKind::Task)
            .into_iter()
            .filter_map(|r| match r {
                Record::Task(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.list(RecordKind::Trajectory)
            .into_iter()
            .filter_map(|r| match r {
                Record::Trajectory(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    pub fn append_row(&self, row: &RunRow) -> Result<(), StoreError> {
        self.append_aux("rows.jsonl", row)
    }

    pub fn read_rows(&self) -> Result<Vec<RunRow>, StoreError> {
        self.read_aux("rows.jsonl")
    }

    /// Appends an arbitrary serializable line to an auxiliary log file.
    pub fn append_aux<T: Serialize>(&self, file: &'static str, value: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(value).expect("row types always serialize");
        line.push('\n');
        let path = self.root.join(file);
        let mut files = self.aux.lock().expect("aux writers poisoned");
        if !files.contains_key(file) {
            files.insert(file, open_append(&path)?);
        }
        let f = files.get_mut(file).expect("inserted above");
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))
    }

    pub fn read_aux<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>, StoreError> {
        let path = self.root.join(file);
        read_complete_lines(&path)?
            .into_iter()
            .map(|(line_no, line)| {
                serde_json::from_str(&line).map_err(|e| StoreError::Decode {
                    file: path.clone(),
                    line: line_no,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Writes image bytes under `images/<task_id>/<step_index>.<ext>`.
    pub fn put_image(
        &self,
        task_id: &str,
        step_index: u32,
        media_type: &str,
        bytes: &[u8],
    ) -> Result<crate::model::ImageRef, StoreError> {
        let ext = match media_type {
            "image/jpeg" => "jpg",
            "image/gif" => "gif",
            "image/webp" => "webp",
            _ => "png",
        };
        let rel = format!("images/{task_id}/{step_index}.{ext}");
        let path = self.root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(crate::model::ImageRef::new(rel, media_type))
    }
}

fn open_append(path: &Path) -> Result<File, StoreError> {
    OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))
}

/// Complete (newline-terminated) lines with 1-based line numbers.
fn read_complete_lines(path: &Path) -> Result<Vec<(usize, String)>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::Io { path: path.to_path_buf(), source: e }),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            // torn trailing write
            break;
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        out.push((line_no, line.to_string()));
    }
    Ok(out)
}
