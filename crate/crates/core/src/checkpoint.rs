//! Single-file parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 1    | format version (`1`)                     |
//! | 1      | 4    | magic `AVTC`                             |
//! | 5      | 4    | manifest length `M` in bytes (u32)       |
//! | 9      | M    | UTF-8 manifest, one record per line      |
//! | 9 + M  | rest | concatenated f32 payload                 |
//!
//! Manifest records are tab-separated:
//! `meta <key> <value>` or `tensor <name> <d0,d1,..> <0|1 trainable> <payload byte offset>`.
//! Tensor payloads are contiguous and in manifest order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kv::KvMap;
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const VERSION: u8 = 1;
pub const MAGIC: &[u8; 4] = b"AVTC";
const HEADER: usize = 9;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: KvMap,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry { name: p.name.clone(), value: p.value.clone(), trainable: p.trainable })
            .collect();
        Self { meta: KvMap::new(), entries }
    }

    /// Adds the optimizer moments as frozen entries named after their
    /// parameter, and the update count as metadata.
    pub fn add_optimizer(&mut self, store: &ParamStore, opt: &AdamW) {
        self.meta.set("optimizer_steps", opt.steps());
        for (i, st) in opt.export_state().into_iter().enumerate() {
            let Some((m, v)) = st else { continue };
            let name = &store.iter().nth(i).expect("state follows the store").1.name;
            self.entries.push(Entry { name: format!("{MOMENT_M}{name}"), value: m, trainable: false });
            self.entries.push(Entry { name: format!("{MOMENT_V}{name}"), value: v, trainable: false });
        }
    }

    /// Restores optimizer moments saved by [`Checkpoint::add_optimizer`].
    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
        let steps: u64 = self.meta.get("optimizer_steps")?.unwrap_or(0);
        let mut state = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let m = self.get(&format!("{MOMENT_M}{}", p.name));
            let v = self.get(&format!("{MOMENT_V}{}", p.name));
            state.push(match (m, v) {
                (Some(m), Some(v)) if m.value.shape() == p.value.shape() && v.value.shape() == p.value.shape() => {
                    Some((m.value.clone(), v.value.clone()))
                }
                (None, None) => None,
                _ => bail!(Format, "optimizer moments for `{}` are incomplete or misshapen", p.name),
            });
        }
        opt.import_state(steps, state);
        Ok(())
    }

    /// The same checkpoint with the optimizer moments dropped.
    pub fn without_optimizer(mut self) -> Self {
        self.entries.retain(|e| !e.name.starts_with(MOMENT_M) && !e.name.starts_with(MOMENT_V));
        self.meta.remove("optimizer_steps");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Model parameters only, optimizer moments excluded.
    pub fn parameters(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| !e.name.starts_with(MOMENT_M) && !e.name.starts_with(MOMENT_V))
    }

    /// A store holding the parameter entries with their trainable flags.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in self.parameters() {
            store.add(&e.name, e.value.clone(), e.trainable)?;
        }
        Ok(store)
    }

    /// Copies every parameter of `store` from the checkpoint. Missing names
    /// and shape mismatches are format errors; flags are left untouched.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter_mut() {
            let Some(e) = self.get(&p.name) else {
                bail!(Format, "checkpoint lacks `{}`", p.name);
            };
            if e.value.shape() != p.value.shape() {
                bail!(Format, "`{}` is {:?} in the checkpoint but {:?} in the model", p.name, e.value.shape(), p.value.shape());
            }
            p.value = e.value.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for k in self.meta.keys() {
            let v = self.meta.get_str(k).unwrap_or_default();
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor\t{}\t{}\t{}\t{}\n", e.name, dims.join(","), e.trainable as u8, offset));
            offset += 4 * e.value.numel();
        }
        let mut out = Vec::with_capacity(HEADER + manifest.len() + offset);
        out.push(VERSION);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            bail!(Format, "checkpoint is {} bytes, shorter than its header", bytes.len());
        }
        if bytes[0] != VERSION {
            bail!(Format, "unsupported checkpoint version {}", bytes[0]);
        }
        if &bytes[1..5] != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let m = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let Some(manifest) = bytes.get(HEADER..HEADER + m) else {
            bail!(Format, "manifest length {} exceeds file size", m);
        };
        let Ok(manifest) = core::str::from_utf8(manifest) else {
            bail!(Format, "manifest is not UTF-8");
        };
        let payload = &bytes[HEADER + m..];
        let mut ck = Checkpoint::default();
        let mut expected = 0usize;
        for (n, line) in manifest.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["meta", k, v] => ck.meta.set(k, v),
                ["tensor", name, dims, flag, off] => {
                    let shape: Vec<usize> = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',').map(|d| d.parse().map_err(|_| bad(n, "dimension"))).collect::<Result<_>>()?
                    };
                    let off: usize = off.parse().map_err(|_| bad(n, "offset"))?;
                    if off != expected {
                        bail!(Format, "manifest line {}: offset {} but {} expected", n + 1, off, expected);
                    }
                    let len = shape.iter().product::<usize>() * 4;
                    let Some(raw) = payload.get(off..off + len) else {
                        bail!(Format, "payload truncated at `{}`", name);
                    };
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    let trainable = match *flag {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(n, "trainable flag")),
                    };
                    ck.entries.push(Entry { name: name.to_string(), value: Tensor::new(&shape, data)?, trainable });
                    expected += len;
                }
                _ => bail!(Format, "manifest line {} is malformed", n + 1),
            }
        }
        if expected != payload.len() {
            bail!(Format, "payload has {} bytes, manifest describes {}", payload.len(), expected);
        }
        Ok(ck)
    }
}

fn bad(line: usize, what: &str) -> crate::Error {
    crate::Error::Format(format!("manifest line {}: bad {}", line + 1, what))
}
