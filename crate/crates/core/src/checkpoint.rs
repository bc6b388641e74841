//! Parameter archives: `CSGRUCK1`, the manifest length as u64 LE, a JSON
//! manifest, then every parameter as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, ModSet};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CSGRUCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub cell: CellKind,
    pub mods: ModSet,
    pub architecture: NetworkSpec,
    pub entries: Vec<Entry>,
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in net.params().fields() {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION,
        cell: net.spec().cell,
        mods: net.spec().mods,
        architecture: net.spec().clone(),
        entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a checkpoint archive".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Data("truncated checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", manifest.version)));
    }
    Ok((manifest, &bytes[16 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let (manifest, payload) = read_manifest(bytes)?;
    if manifest.cell != manifest.architecture.cell || manifest.mods != manifest.architecture.mods {
        return Err(Error::Data("checkpoint manifest contradicts its architecture".into()));
    }
    let mut net = Network::init(
        manifest.architecture.clone(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    let mut fields = net.params_mut().fields_mut();
    if fields.len() != manifest.entries.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, architecture needs {}",
            manifest.entries.len(),
            fields.len()
        )));
    }
    for ((name, slot), entry) in fields.iter_mut().zip(&manifest.entries) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint entry {} {:?} does not match parameter {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.len();
        let raw = payload
            .get(entry.offset..entry.offset + 8 * n)
            .ok_or_else(|| Error::Data(format!("payload of {} is truncated", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        **slot = Tensor::new(entry.shape.clone(), values)?;
    }
    drop(fields);
    Ok(net)
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
