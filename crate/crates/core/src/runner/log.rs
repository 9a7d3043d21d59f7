//! Append-only JSONL run log.
//!
//! The first line is a header object (`{"log_header": {...}}`); every other
//! line is one [`RawResponse`]. A crash can leave a partial final line; the
//! loader ignores it and the writer truncates it before appending.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CellKey, RawResponse, RunnerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub tool_version: String,
    /// Sampling parameters are left at each backend's default.
    pub sampling: String,
    pub context_window_tokens: u32,
    pub max_response_tokens: u32,
    pub created_utc: i64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    log_header: LogHeader,
}

/// A fully loaded run log.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub header: Option<LogHeader>,
    pub rows: Vec<RawResponse>,
}

impl RunLog {
    /// Loads `path`; a missing file is an empty log.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(RunnerError::io(path, e)),
        };
        let mut log = RunLog::default();
        let mut seen = HashSet::new();
        let mut lines = BufReader::new(file).lines().enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let line = line.map_err(|e| RunnerError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let is_last = lines.peek().is_none();
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                log.header.get_or_insert(h.log_header);
                continue;
            }
            match serde_json::from_str::<RawResponse>(&line) {
                Ok(row) => {
                    if seen.insert(row.key()) {
                        log.rows.push(row);
                    } else {
                        log::warn!("{}:{}: duplicate cell {:?} ignored", path.display(), idx + 1, row.key());
                    }
                }
                Err(e) if is_last => {
                    log::warn!("{}:{}: ignoring truncated final line ({e})", path.display(), idx + 1);
                }
                Err(e) => {
                    return Err(RunnerError::MalformedLog {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(log)
    }

    pub fn keys(&self) -> HashSet<CellKey> {
        self.rows.iter().map(RawResponse::key).collect()
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Single appender to a run log.
pub struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    /// Opens `path` for appending, writing `header` if the file is new or
    /// empty and dropping any partial final line.
    pub fn open(path: &Path, header: &LogHeader) -> Result<Self, RunnerError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| RunnerError::io(path, e))?;
        let len = file.metadata().map_err(|e| RunnerError::io(path, e))?.len();
        if len > 0 {
            let mut contents = Vec::with_capacity(len as usize);
            file.seek(SeekFrom::Start(0)).map_err(|e| RunnerError::io(path, e))?;
            file.read_to_end(&mut contents).map_err(|e| RunnerError::io(path, e))?;
            if contents.last() != Some(&b'\n') {
                let keep = contents.iter().rposition(|b| *b == b'\n').map(|p| p + 1).unwrap_or(0);
                file.set_len(keep as u64).map_err(|e| RunnerError::io(path, e))?;
            }
        }
        let mut writer = Self {
            file,
            path: path.to_path_buf(),
        };
        if writer.file.metadata().map_err(|e| RunnerError::io(path, e))?.len() == 0 {
            let line = serde_json::to_string(&HeaderLine {
                log_header: header.clone(),
            })
            .expect("header serializes");
            writer.write_line(&line)?;
        }
        Ok(writer)
    }

    fn write_line(&mut self, line: &str) -> Result<(), RunnerError> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf).map_err(|e| RunnerError::io(&self.path, e))?;
        self.file.flush().map_err(|e| RunnerError::io(&self.path, e))
    }

    /// Appends one row with a single write.
    pub fn append(&mut self, row: &RawResponse) -> Result<(), RunnerError> {
        let line = serde_json::to_string(row).expect("row serializes");
        self.write_line(&line)
    }
}
