use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NetworkParams, TrainConfig};
use crate::{Error, Result};

const MAGIC: &str = "GFDT-PARAMS 1";

/// Sidecar record written next to a parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub train: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes a text header (magic, spec echo, parameter count, seed) followed
/// by the parameters as little-endian `f64`, plus a `<path>.json` sidecar.
pub fn save_params(path: &Path, spec_json: &str, seed: u64, params: &NetworkParams, meta: &TrainMetadata) -> Result<()> {
    if spec_json.contains('\n') {
        return Err(Error::Format("spec echo must be a single line".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "spec {spec_json}")?;
    writeln!(w, "count {}", params.len())?;
    writeln!(w, "seed {seed}")?;
    writeln!(w, "end")?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    serde_json::to_writer_pretty(File::create(sidecar(path))?, meta)?;
    Ok(())
}

/// Reads a parameter file; returns `(spec echo, seed, parameters)`.
pub fn load_params(path: &Path) -> Result<(String, u64, NetworkParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next(&mut r)? != MAGIC {
        return Err(Error::Format("bad parameter file magic".into()));
    }
    let field = |s: String, key: &str| -> Result<String> {
        s.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::Format(format!("expected `{key}` header line")))
    };
    let spec = field(next(&mut r)?, "spec")?;
    let count: usize = field(next(&mut r)?, "count")?
        .parse()
        .map_err(|_| Error::Format("bad parameter count".into()))?;
    let seed: u64 = field(next(&mut r)?, "seed")?
        .parse()
        .map_err(|_| Error::Format("bad seed".into()))?;
    if next(&mut r)? != "end" {
        return Err(Error::Format("missing header terminator".into()));
    }
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!("expected {count} parameters, found {} bytes", bytes.len())));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((spec, seed, NetworkParams::new(values)))
}

pub fn load_metadata(path: &Path) -> Result<TrainMetadata> {
    Ok(serde_json::from_reader(File::open(sidecar(path))?)?)
}
