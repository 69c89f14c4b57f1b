//! JSON-lines difference and alarm logs. Both share one schema.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::comparator::{ComparisonOutcome, ContextKind, DifferenceToken, Verdict};
use crate::message::RequestSummary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedToken {
    pub main_token: String,
    pub shadow_token: String,
    pub context_kind: ContextKind,
    pub locator: String,
}

impl From<&DifferenceToken> for LoggedToken {
    fn from(t: &DifferenceToken) -> Self {
        LoggedToken {
            main_token: t.main_token.clone(),
            shadow_token: t.shadow_token.clone(),
            context_kind: t.context.kind,
            locator: t.context.locator.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// RFC 3339, UTC.
    pub time: String,
    pub pair_key: String,
    pub request_summary: RequestSummary,
    pub verdict: Verdict,
    pub unexpected: Vec<LoggedToken>,
    /// Names of the rules that matched, one per expected difference.
    pub expected: Vec<String>,
}

impl LogEntry {
    pub fn from_outcome(outcome: &ComparisonOutcome, request_summary: &RequestSummary, at: SystemTime) -> Self {
        LogEntry {
            time: humantime::format_rfc3339_millis(at).to_string(),
            pair_key: outcome.pair_key.to_string(),
            request_summary: request_summary.clone(),
            verdict: outcome.verdict,
            unexpected: outcome.unexpected.iter().map(LoggedToken::from).collect(),
            expected: outcome.expected.iter().map(|(_, rule)| rule.clone()).collect(),
        }
    }
}

/// Append-only JSON-lines writer. Each entry is written and flushed under
/// one lock, so lines never interleave.
pub struct LogWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl LogWriter {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(LogWriter {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LogEntry) -> io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock();
        f.write_all(&line)?;
        f.flush()
    }
}

/// Reads every entry of a log file. Blank lines are skipped; a malformed line
/// is an error naming its line number.
pub fn read_log(path: impl AsRef<Path>) -> io::Result<Vec<LogEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(entry);
    }
    Ok(out)
}
