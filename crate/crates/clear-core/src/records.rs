//! Newline-delimited record files (`*.ndrec`).
//!
//! A non-empty stream starts with a one-line header `{"format_version":1,
//! "kind":"<kind>"}` followed by one JSON record per line, keys in the fixed
//! order given in `docs/FORMAT.md`. Encoding an empty list yields an empty
//! stream. Decoding validates every record's invariants and rejects
//! duplicates, reporting the 1-based line number of the first problem.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_guidance, validate_rewarded, validate_sft, validate_task, GuidanceRecord,
    RewardedTrajectory, SftExample, TaskInstance, Violation,
};

pub const FORMAT_VERSION: u32 = 1;

/// A type that can live in an ndrec file.
pub trait Record: Serialize + DeserializeOwned {
    /// Kind tag written into the stream header.
    const KIND: &'static str;

    /// Invariant check applied on decode (and debug-checked on encode).
    fn violations(&self) -> Vec<Violation> {
        Vec::new()
    }

    /// Key used to reject duplicates within one stream, if any.
    fn dedupe_key(&self) -> Option<String> {
        None
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
}

impl Record for TaskInstance {
    const KIND: &'static str = "task_instance";
    fn violations(&self) -> Vec<Violation> {
        validate_task(self)
    }
    fn dedupe_key(&self) -> Option<String> {
        Some(self.task_id.clone())
    }
}

impl Record for RewardedTrajectory {
    const KIND: &'static str = "rewarded_trajectory";
    fn violations(&self) -> Vec<Violation> {
        validate_rewarded(self)
    }
    fn dedupe_key(&self) -> Option<String> {
        Some(format!(
            "{}/{}",
            self.trajectory.task_id, self.trajectory.run_id
        ))
    }
}

impl Record for GuidanceRecord {
    const KIND: &'static str = "guidance_record";
    fn violations(&self) -> Vec<Violation> {
        validate_guidance(self)
    }
}

impl Record for SftExample {
    const KIND: &'static str = "sft_example";
    fn violations(&self) -> Vec<Violation> {
        validate_sft(self)
    }
}

/// Serialize records to the newline-delimited byte stream.
pub fn encode_records<R: Record>(items: &[R]) -> Result<Vec<u8>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: R::KIND.to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for item in items {
        debug_assert!(item.violations().is_empty(), "encoding invalid record");
        let line = serde_json::to_vec(item)
            .map_err(|e| Error::Validation(format!("cannot encode {}: {e}", R::KIND)))?;
        out.extend_from_slice(&line);
        out.push(b'\n');
    }
    Ok(out)
}

/// Parse a byte stream produced by [`encode_records`].
pub fn decode_records<R: Record>(bytes: &[u8]) -> Result<Vec<R>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        line: 0,
        reason: format!("stream is not UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate();
    let header_line = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, line)) => line,
    };
    let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Decode {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Decode {
            line: 1,
            reason: format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                header.format_version
            ),
        });
    }
    if header.kind != R::KIND {
        return Err(Error::Decode {
            line: 1,
            reason: format!(
                "kind mismatch: stream is {:?}, expected {:?}",
                header.kind,
                R::KIND
            ),
        });
    }

    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: R = serde_json::from_str(line).map_err(|e| Error::Decode {
            line: line_no,
            reason: e.to_string(),
        })?;
        let violations = item.violations();
        if let Some(v) = violations.first() {
            return Err(Error::Decode {
                line: line_no,
                reason: format!("{}: {}", v.field, v.rule),
            });
        }
        if let Some(key) = item.dedupe_key() {
            if !seen.insert(key.clone()) {
                return Err(Error::Decode {
                    line: line_no,
                    reason: format!("duplicate record key {key}"),
                });
            }
        }
        items.push(item);
    }
    Ok(items)
}

pub fn write_records<R: Record>(path: impl AsRef<Path>, items: &[R]) -> Result<()> {
    let bytes = encode_records(items)?;
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_records<R: Record>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let bytes = fs::read(path.as_ref())?;
    decode_records(&bytes)
}
