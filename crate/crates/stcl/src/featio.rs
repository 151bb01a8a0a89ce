//! Feature-grid export and import. Each layer is an STNT matrix
//! `(sites, channels)` plus a coordinate sidecar: `u32` count, then
//! `count × (u32 x, u32 y)`, little-endian. A small key-value file ties the
//! layers of a grid together.

use std::path::{Path, PathBuf};

use stcl_core::features::{FeatureGrid, Group, LayerGrid};

use crate::error::{read_file, write_file, Error, Result};
use crate::kv::KvMap;
use crate::stnt::{self, Cursor};

pub fn encode_coords(coords: &[(u32, u32)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * coords.len());
    out.extend_from_slice(&(coords.len() as u32).to_le_bytes());
    for &(x, y) in coords {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

pub fn decode_coords(bytes: &[u8]) -> std::result::Result<Vec<(u32, u32)>, String> {
    let mut c = Cursor::new(bytes);
    let n = c.u32()? as usize;
    if c.remaining() != 8 * n {
        return Err(format!("coordinate table of {} entries has {} bytes", n, c.remaining()));
    }
    (0..n).map(|_| Ok((c.u32()?, c.u32()?))).collect()
}

/// Sidecar path next to a layer tensor file.
pub fn coords_path(tensor_path: &Path) -> PathBuf {
    let mut s = tensor_path.as_os_str().to_owned();
    s.push(".coords");
    PathBuf::from(s)
}

pub fn write_layer(path: &Path, layer: &LayerGrid) -> Result<()> {
    stnt::write_tensor(path, &layer.vectors)?;
    write_file(&coords_path(path), &encode_coords(&layer.coords))
}

pub fn read_layer(path: &Path) -> Result<LayerGrid> {
    let vectors = stnt::read_tensor(path)?;
    if vectors.rank() != 2 {
        return Err(Error::format(path, format!("feature matrix must be rank 2, got {:?}", vectors.shape())));
    }
    let cpath = coords_path(path);
    let coords = decode_coords(&read_file(&cpath)?).map_err(|e| Error::format(&cpath, e))?;
    LayerGrid::new(coords, vectors).map_err(|e| Error::format(path, e.to_string()))
}

fn layer_path(base: &Path, i: usize) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".l{}.stnt", i));
    PathBuf::from(s)
}

/// Writes `base` (key-value index) and one tensor + sidecar per layer.
pub fn export_features(base: &Path, grid: &FeatureGrid) -> Result<()> {
    let mut kv = KvMap::new();
    kv.set("format", "stcl-features");
    kv.set("group", grid.group.as_str());
    kv.set("source_height", grid.source_size.0);
    kv.set("source_width", grid.source_size.1);
    kv.set("layers", grid.layers.len());
    for (i, layer) in grid.layers.iter().enumerate() {
        let p = layer_path(base, i);
        write_layer(&p, layer)?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        kv.set(&format!("layer.{}", i), name);
    }
    kv.write(base)
}

pub fn import_features(base: &Path) -> Result<FeatureGrid> {
    let kv = KvMap::read(base)?;
    if kv.get("format") != Some("stcl-features") {
        return Err(Error::format(base, "not a feature index"));
    }
    let group = Group::parse(kv.require("group")?).ok_or_else(|| Error::format(base, "unknown group"))?;
    let n: usize = kv.parse_required("layers")?;
    let dir = base.parent().unwrap_or(Path::new(""));
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        layers.push(read_layer(&dir.join(kv.require(&format!("layer.{}", i))?))?);
    }
    Ok(FeatureGrid {
        group,
        source_size: (kv.parse_required("source_height")?, kv.parse_required("source_width")?),
        layers,
    })
}
