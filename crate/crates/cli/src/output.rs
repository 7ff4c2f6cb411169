//! CSV and JSON writers.
//!
//! CSVs carry a one-line header and LF line endings. Floats are written with
//! Rust's shortest round-trip formatting, so values read back exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Write `columns` (all the same length) under `header`.
pub fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<(), CliError> {
    debug_assert_eq!(header.len(), columns.len());
    let rows = columns.first().map_or(0, |c| c.len());
    debug_assert!(columns.iter().all(|c| c.len() == rows));
    write_rows(path, header, (0..rows).map(|k| columns.iter().map(|c| c[k]).collect()))
}

pub fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = || -> std::io::Result<()> {
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for row in rows {
            line.clear();
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Fields every summary carries.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub experiment: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

pub fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_columns(&p, &["a", "b"], &[&[1.0, 0.1 + 0.2], &[-2.5, 6.25e-12]]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "a,b\n1,-2.5\n0.30000000000000004,0.00000000000625\n");
        let back: f64 = text.lines().nth(2).unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 0.1 + 0.2);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.csv");
        let err = write_columns(&p, &["a"], &[&[1.0]]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
