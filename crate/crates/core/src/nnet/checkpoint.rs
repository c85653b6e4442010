//! Binary parameter container.
//!
//! Layout (little endian): magic `TMPOCKPT`, `u32` version, `u32` header
//! length, JSON header, then each entry's raw `f64` data in header order. A
//! tabular entry stores its rows sorted by key as `u64 key, out × f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, Net, Tabular};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TMPOCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Net<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn single(name: &str, net: Net<F>) -> Self {
        Self { meta: BTreeMap::new(), entries: vec![(name.to_string(), net)] }
    }

    pub fn get(&self, name: &str) -> Result<&Net<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, net)| net).ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Net<F>> {
        let pos = self.entries.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))?;
        Ok(self.entries.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header { meta: self.meta.clone(), entries: self.entries.iter().map(|(n, net)| EntryHeader::of(n, net)).collect() };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, net) in &self.entries {
            match net {
                Net::Tabular(t) => {
                    for (k, row) in &t.rows {
                        out.extend_from_slice(&k.to_le_bytes());
                        push_f64s(&mut out, row);
                    }
                }
                Net::Mlp(m) => {
                    for block in m.slices() {
                        push_f64s(&mut out, block);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        if r.len() < hlen {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let mut entries = Vec::new();
        for e in header.entries {
            let net = match e.backend.as_str() {
                "tabular" => {
                    let mut t = Tabular::zeros(e.vocab, e.window, e.out);
                    for _ in 0..e.rows {
                        let key = read_u64(&mut r)?;
                        t.rows.insert(key, read_f64s(&mut r, e.out)?);
                    }
                    Net::Tabular(t)
                }
                "mlp" => {
                    let mut m = Mlp::zeros(e.vocab, e.window, e.dim, e.hidden, e.out);
                    for block in m.slices_mut() {
                        let vals = read_f64s(&mut r, block.len())?;
                        block.copy_from_slice(&vals);
                    }
                    Net::Mlp(m)
                }
                other => return Err(Error::Format(format!("unknown backend `{other}`"))),
            };
            entries.push((e.name, net));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
        }
        Ok(Self { meta: header.meta, entries })
    }
}

pub fn write_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    backend: String,
    vocab: usize,
    window: usize,
    dim: usize,
    hidden: usize,
    out: usize,
    rows: usize,
}

impl EntryHeader {
    fn of<F: Scalar>(name: &str, net: &Net<F>) -> Self {
        match net {
            Net::Tabular(t) => Self {
                name: name.into(),
                backend: "tabular".into(),
                vocab: t.vocab,
                window: t.window,
                dim: 0,
                hidden: 0,
                out: t.out,
                rows: t.rows.len(),
            },
            Net::Mlp(m) => {
                Self { name: name.into(), backend: "mlp".into(), vocab: m.vocab, window: m.window, dim: m.dim, hidden: m.hidden, out: m.out, rows: 0 }
            }
        }
    }
}

fn push_f64s<F: Scalar>(out: &mut Vec<u8>, xs: &[F]) {
    for &x in xs {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<F: Scalar>(r: &mut &[u8], n: usize) -> Result<Vec<F>> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint data".into()))?;
            Ok(F::of(f64::from_le_bytes(b)))
        })
        .collect()
}
