//! Artifact writers. Every file starts with a header of `#` lines holding
//! the tool version, the resolved config and the run parameters, so that an
//! artifact alone is enough to rerun it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use aoi_nest::model::SystemConfig;
use serde::Serialize;

use crate::config::ConfigFile;
use crate::CliError;

pub fn header(cfg: &SystemConfig, run: &impl Serialize) -> Result<String, CliError> {
    Ok(format!(
        "# aoi-nest {}\n# config: {}\n# run: {}\n",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(&ConfigFile::from_config(cfg))?,
        serde_json::to_string(run)?
    ))
}

/// CSV file with a reproducibility header.
pub fn csv_file(path: &Path, header: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
    w.write_all(header.as_bytes())?;
    Ok(csv::Writer::from_writer(w))
}

/// CSV to a file, or to stdout without a path.
pub fn csv_sink(path: Option<&Path>, header: &str) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    let mut w: Box<dyn Write> = match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(std::io::stdout().lock()),
    };
    w.write_all(header.as_bytes())?;
    Ok(csv::Writer::from_writer(w))
}

/// JSON document with the config and run parameters embedded as fields.
pub fn write_json(path: Option<&Path>, cfg: &SystemConfig, run: &impl Serialize, body: &impl Serialize) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "aoi_nest_version": env!("CARGO_PKG_VERSION"),
        "config": ConfigFile::from_config(cfg),
        "run": run,
        "result": body,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Empty string for a missing value.
pub fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
