//! File emission: atomic writes, CSV tables and the columnar binary format.
//!
//! All files are written to a temporary sibling and renamed into place, so a
//! crash never leaves a half-written artifact. CSV uses `.` decimals and the
//! shortest round-trip float formatting, which is byte-stable across runs.

use fastdiff_core::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Write bytes atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp-{}",
        std::process::id()
    ));
    let io = |e: std::io::Error| Error::Config(format!("writing {}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// Render a CSV table with a header row.
pub fn csv_table(columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Shortest round-trip formatting of a float (locale-free).
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Optional value formatting; empty cell when absent.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Write a numeric table as raw little-endian f64 rows plus a JSON sidecar
/// naming the columns.
pub fn write_binary_table(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(rows.len() * columns.len() * 8);
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)?;
    let meta = serde_json::json!({
        "columns": columns,
        "rows": rows.len(),
        "dtype": "f64-le",
        "layout": "row-major",
    });
    let meta_path = sidecar(path, "meta.json");
    atomic_write(&meta_path, serde_json::to_string_pretty(&meta).unwrap().as_bytes())
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_name().unwrap().to_os_string();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}
