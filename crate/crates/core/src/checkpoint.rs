//! Named-parameter archive.
//!
//! Layout: `PVCK`, u32 version, u32 length + JSON header (model config and
//! exact OIM settings), u32 entry count, then per entry a u32 name length,
//! the UTF-8 name and one `PVT1` tensor. Integers are little-endian;
//! entries are sorted by name.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PersonVladNet};
use crate::nn::ParamStore;
use crate::oim::OimState;
use crate::tensor::{read_pvt, write_pvt, Tensor};

const MAGIC: &[u8; 4] = b"PVCK";
const VERSION: u32 = 1;

const OIM_TABLE: &str = "oim.table";
const OIM_QUEUE: &str = "oim.queue";
const OIM_TAU: &str = "oim.tau";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OimSettings {
    tau: f64,
    momentum: f64,
    capacity: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    oim: Option<OimSettings>,
}

fn oim_entries(state: &OimState) -> Vec<(String, Tensor<f32>)> {
    let mut out = vec![
        (OIM_TABLE.to_string(), state.table().clone()),
        (OIM_TAU.to_string(), Tensor::from_vec(vec![state.tau() as f32])),
    ];
    if state.queue_len() > 0 {
        let flat: Vec<f32> = state.queue().flatten().copied().collect();
        let q = Tensor::new(&[state.queue_len(), state.dim()], flat).expect("queue rows share the table width");
        out.push((OIM_QUEUE.to_string(), q));
    }
    out
}

pub fn write_checkpoint(mut w: impl Write, net: &PersonVladNet<f32>, oim: Option<&OimState>) -> Result<()> {
    let io = |e| Error::format("checkpoint", format!("write failed: {e}"));
    let header = Header {
        model: net.config().clone(),
        oim: oim.map(|s| OimSettings {
            tau: s.tau(),
            momentum: s.momentum(),
            capacity: s.capacity(),
        }),
    };
    let config = serde_json::to_vec(&header)?;
    let mut entries: Vec<(String, Tensor<f32>)> = net.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    if let Some(state) = oim {
        entries.extend(oim_entries(state));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&config).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_pvt(&mut w, t).map_err(io)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: u32, what: &str) -> Result<Vec<u8>> {
    if len > 1 << 24 {
        return Err(Error::format("checkpoint", format!("implausible {what} length {len}")));
    }
    let mut b = vec![0u8; len as usize];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated {what}: {e}")))?;
    Ok(b)
}

/// Model and, when stored, the OIM state.
pub fn read_checkpoint(mut r: impl Read) -> Result<(PersonVladNet<f32>, Option<OimState>)> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(format!("missing header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)?;
    let header: Header = serde_json::from_slice(&read_bytes(&mut r, len, "header")?)
        .map_err(|e| bad(format!("header: {e}")))?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    let mut oim = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        let name = String::from_utf8(read_bytes(&mut r, len, "name")?).map_err(|e| bad(e.to_string()))?;
        let t = read_pvt(&mut r)?;
        if name.starts_with("oim.") {
            oim.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    let net = PersonVladNet::from_parts(header.model, params)?;
    let state = match (oim.remove(OIM_TABLE), header.oim) {
        (None, None) => None,
        (Some(table), Some(settings)) => {
            let queue = oim
                .get(OIM_QUEUE)
                .map(|q| q.data().chunks(q.shape()[1]).map(<[f32]>::to_vec).collect())
                .unwrap_or_default();
            if table.rank() != 2 || table.shape()[1] != net.descriptor_dim() {
                return Err(bad(format!(
                    "OIM table {:?} does not match descriptor length {}",
                    table.shape(),
                    net.descriptor_dim()
                )));
            }
            Some(OimState::from_parts(
                table,
                queue,
                settings.capacity,
                settings.tau,
                settings.momentum,
            )?)
        }
        _ => return Err(bad("OIM table and settings must appear together".into())),
    };
    Ok((net, state))
}

pub fn save_checkpoint(path: &Path, net: &PersonVladNet<f32>, oim: Option<&OimState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net, oim)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(PersonVladNet<f32>, Option<OimState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes[..])
}
