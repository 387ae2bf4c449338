//! Checkpoint format: `RLCK` magic, a little-endian u32 JSON header length,
//! a JSON header carrying the network config and a manifest of tensor names
//! and shapes, then the flat little-endian f32 weight payload in manifest
//! order. Weights are always stored as f32 regardless of the compute type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relit_core::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

use crate::param::{Init, ParamStore};
use crate::real::Real;
use crate::unet::{Denoiser, UNetConfig};

const MAGIC: &[u8; 4] = b"RLCK";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    manifest: Vec<ManifestEntry>,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    cfg: &UNetConfig,
    store: &ParamStore<T>,
) -> Result<()> {
    let manifest = store
        .entries()
        .iter()
        .map(|e| ManifestEntry { name: e.name.clone(), shape: e.shape.clone() })
        .collect();
    let header = Header { config: cfg.clone(), manifest };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in store.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(UNetConfig, ParamStore<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Data(format!(
            "{} is not a checkpoint (bad magic {magic:?})",
            path.display()
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never sampled: Zeros init
    for e in &header.manifest {
        store.register(&e.name, &e.shape, Init::Zeros, &mut rng);
    }
    let mut payload = vec![0u8; store.len() * 4];
    r.read_exact(&mut payload).map_err(|_| {
        CoreError::Data(format!("{}: truncated weight payload", path.display()))
    })?;
    for (i, v) in store.data_mut().iter_mut().enumerate() {
        *v = f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CoreError::Data(format!(
            "{}: trailing bytes after weight payload",
            path.display()
        )));
    }
    Ok((header.config, store))
}

/// Rebuild a model from a checkpoint in compute type `T`. The store is built
/// fresh from the saved config (so block wiring matches) and every tensor is
/// overwritten by name from the payload.
pub fn load_model<T: Real>(path: &Path) -> Result<(Denoiser, ParamStore<T>)> {
    let (cfg, saved) = load_checkpoint(path)?;
    let (model, mut store) = Denoiser::build::<T>(cfg)?;
    store.load_from(&saved.cast::<T>())?;
    Ok((model, store))
}
