use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{csv_err, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> dnsd::Error + '_ {
    move |source| dnsd::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn read_string(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn create_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path).map_err(io_err(path))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| dnsd::Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    write_atomic(path, (text + "\n").as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    Ok(serde_json::from_str(&text).map_err(|source| dnsd::Error::Json {
        context: path.display().to_string(),
        source,
    })?)
}

/// Render a header and rows as CSV text.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err("csv header"))?;
    for row in rows {
        w.write_record(row).map_err(csv_err("csv row"))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv_err("csv buffer")(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, csv_text(header, rows)?.as_bytes())
}
