//! File formats: canonical structured text, CSV, plain graymaps, and SVG charts.

mod pgm;
mod svg;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use pgm::{parse_pgm, write_pgm};
pub use svg::bar_chart_svg;

/// Version of every structured-text document this crate writes.
pub const FORMAT_VERSION: u32 = 1;

/// Canonical JSON: struct fields in declaration order, two-space indent,
/// reals in shortest round-trip form, trailing newline.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: "<memory>".into(),
        detail: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical form.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(to_canonical_json(value)?.as_bytes()))
}

/// Versioned envelope around a document body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document<T> {
    pub format: String,
    pub version: u32,
    pub content: T,
}

impl<T> Document<T> {
    pub fn new(format: &str, content: T) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            content,
        }
    }
}

pub fn write_document<T: Serialize>(path: &Path, format: &str, content: &T) -> Result<()> {
    let text = to_canonical_json(&Document::new(format, content))?;
    write_text(path, &text)
}

pub fn read_document<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text, format).map_err(|detail| Error::Format {
        path: path.display().to_string(),
        detail,
    })
}

pub fn parse_document<T: DeserializeOwned>(text: &str, format: &str) -> std::result::Result<T, String> {
    let doc: Document<T> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.format != format {
        return Err(format!("expected format `{format}`, found `{}`", doc.format));
    }
    if doc.version != FORMAT_VERSION {
        return Err(format!("unsupported version {} (expected {FORMAT_VERSION})", doc.version));
    }
    Ok(doc.content)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shortest round-trip decimal for CSV cells.
pub fn fmt_real(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

/// Builds CSV text from a header and rows that are already formatted.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
