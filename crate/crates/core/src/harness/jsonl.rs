// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSONL persistence: one record per line, keys sorted, shortest round-trip
//! floats.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{FixlabError, Result};
use crate::stats::TrialRecord;

/// Canonical single-line encoding of a record (no trailing newline).
pub fn record_line(r: &TrialRecord) -> Result<String> {
    // Value's map is ordered, so keys come out sorted
    Ok(serde_json::to_string(&serde_json::to_value(r)?)?)
}

/// Read every complete record. A final line without its newline (an
/// interrupted append) is ignored; any other malformed line is an error.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FixlabError::io(path, e))?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| FixlabError::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            break;
        }
        let text = line.trim_end();
        if text.is_empty() {
            continue;
        }
        let r: TrialRecord = serde_json::from_str(text)
            .map_err(|e| FixlabError::Harness(format!("{}:{lineno}: {e}", path.display())))?;
        out.push(r);
    }
    Ok(out)
}

/// Records from `path`, or none if it does not exist.
pub fn read_existing(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    if path.as_ref().exists() {
        read_records(path)
    } else {
        Ok(Vec::new())
    }
}

/// Append-only writer that flushes after every batch.
pub struct JsonlAppender {
    file: File,
}

impl JsonlAppender {
    /// Open for appending, dropping any partial trailing line first.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FixlabError::io(dir, e))?;
        }
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| FixlabError::io(path, e))?;
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep != bytes.len() {
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| FixlabError::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| FixlabError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| FixlabError::io(path, e))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, records: &[TrialRecord]) -> Result<()> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&record_line(r)?);
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Rewrite `path` sorted by record key with duplicates removed (first
/// occurrence wins), via a temporary file and rename.
pub fn finalize(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let mut by_key: BTreeMap<String, TrialRecord> = BTreeMap::new();
    for r in read_records(path)? {
        by_key.entry(r.key()).or_insert(r);
    }
    let records: Vec<TrialRecord> = by_key.into_values().collect();
    write_records(path, &records)?;
    Ok(records)
}

/// Write records verbatim (in the given order) atomically.
pub fn write_records(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("jsonl.tmp");
    let mut buf = String::new();
    for r in records {
        buf.push_str(&record_line(r)?);
        buf.push('\n');
    }
    std::fs::write(&tmp, buf).map_err(|e| FixlabError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FixlabError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::record::sample;

    #[test]
    fn keys_sorted_and_floats_shortest() {
        let line = record_line(&sample(3, 0.1)).unwrap();
        assert!(line.starts_with("{\"accuracy_bit\":0,\"condition\":\"gp\""));
        assert!(line.contains("\"p_target\":0.1,"));
        assert!(line.contains("\"p_foils\":[0.9]"));
    }

    #[test]
    fn partial_line_is_dropped_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut a = JsonlAppender::open(&p).unwrap();
        a.append(&[sample(2, 0.2), sample(1, 0.7)]).unwrap();
        drop(a);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"accuracy_bit\":1,\"cond").unwrap();
        assert_eq!(read_records(&p).unwrap().len(), 2);
        let mut a = JsonlAppender::open(&p).unwrap();
        a.append(&[sample(2, 0.2)]).unwrap();
        let recs = finalize(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].seed, 1);
    }
}
