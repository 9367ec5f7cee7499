use std::fs;
use std::io::Write;
use std::path::Path;

use super::prompt::TaskSample;
use crate::error::{Error, Result};

/// Reads a UTF-8 corpus, one document per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l.as_ref());
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads task samples from JSON Lines; blank lines are skipped.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: TaskSample = serde_json::from_str(line)
            .map_err(|e| Error::Contract(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_tasks(path: &Path, samples: &[TaskSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
