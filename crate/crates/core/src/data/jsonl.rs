// SPDX-License-Identifier: Apache-2.0

//! One datum per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::LatentDatum;
use crate::error::{LitError, Result};

pub fn save_jsonl(path: &Path, datums: &[LatentDatum]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for d in datums {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads datums, reporting the 1-based line of the first bad record.
/// Syntax errors (including a truncated line) are parse errors; well-formed
/// JSON that does not fit the schema is a schema error.
pub fn load_jsonl(path: &Path) -> Result<Vec<LatentDatum>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LitError::MissingArtifact {
            path: path.to_path_buf(),
            hint: "latentqa gen-data".into(),
        },
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| LitError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let datum = serde_json::from_value(value).map_err(|e| LitError::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(datum);
    }
    Ok(out)
}
