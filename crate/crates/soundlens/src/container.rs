//! Flat binary tensor container.
//!
//! Record layout, all little-endian: 8-byte magic `MMDTENS0`, `u32` rank,
//! one `u64` extent per dimension, then the `f64` payload in row-major
//! order. A file may hold several records back to back; named parameter
//! sets pair such a file with a JSON sidecar listing the record names in
//! order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMDTENS0";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(read_err)?;
    if &magic != MAGIC {
        return Err(Error::format(
            "<tensor container>",
            format!("bad magic {magic:?}"),
        ));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(read_err)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf8).map_err(read_err)?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf8).map_err(read_err)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Tensor::new(shape, data)
}

fn read_err(e: std::io::Error) -> Error {
    Error::io("<tensor container>", e)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).map_err(|e| Error::io(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&mut BufReader::new(f))
}

/// Sidecar schema for a named set: record names in file order plus free-form
/// metadata (training step, config snapshot, optimizer state pointers).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSetSidecar {
    pub names: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Write `params` to `<path>` (records, name-sorted) and `<path>.json`
/// (sidecar). Sorting makes saves byte-stable regardless of insertion order.
pub fn save_param_set(
    path: &Path,
    params: &BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let mut names = Vec::with_capacity(params.len());
    for (name, t) in params {
        write_tensor(&mut w, t).map_err(|e| Error::io(path.display().to_string(), e))?;
        names.push(name.clone());
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    let sidecar = ParamSetSidecar { names, metadata };
    let sidecar_path = sidecar_path_for(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&sidecar_path, json + "\n")
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok(())
}

pub fn load_param_set(path: &Path) -> Result<(BTreeMap<String, Tensor>, ParamSetSidecar)> {
    let sidecar_path = sidecar_path_for(path);
    let sidecar_text = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    let sidecar: ParamSetSidecar = serde_json::from_str(&sidecar_text)?;

    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(f);
    let mut params = BTreeMap::new();
    for name in &sidecar.names {
        let t = read_tensor(&mut r)?;
        params.insert(name.clone(), t);
    }
    Ok((params, sidecar))
}

fn sidecar_path_for(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}
