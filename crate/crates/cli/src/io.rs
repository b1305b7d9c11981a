//! JSON and CSV plumbing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Parses a JSON file, naming the offending path on schema errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { String::new() } else { format!(" at `{at}`") };
        CliError::Usage(format!("{}{at}: {}", path.display(), e.inner()))
    })
}

/// Pretty JSON with a trailing newline, to `out` or standard output.
pub fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    write_text(&text, out)
}

pub fn write_text(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

/// Comma-separated rows of numbers. A first row with any non-numeric field
/// is taken as a header and skipped.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(CliError::Usage(format!("{}: line {}: {e}", path.display(), i + 1)));
            }
        }
    }
    if let Some(first) = rows.first() {
        let width = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != width) {
            return Err(CliError::Usage(format!(
                "{}: row {} has {} columns, expected {width}",
                path.display(),
                bad + 1,
                rows[bad].len()
            )));
        }
    }
    Ok(rows)
}

pub fn write_csv(header: &[String], rows: &[Vec<f64>], out: Option<&Path>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let usage = |e: csv::Error| CliError::Usage(e.to_string());
    w.write_record(header).map_err(usage)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(usage)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(&String::from_utf8_lossy(&bytes), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "x,y\n1,2\n3, 4\n").unwrap();
        assert_eq!(read_csv(&p).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        fs::write(&p, "1,2\n3,4\n").unwrap();
        assert_eq!(read_csv(&p).unwrap().len(), 2);
        fs::write(&p, "1,2\nx,4\n").unwrap();
        assert!(read_csv(&p).is_err());
    }
}
