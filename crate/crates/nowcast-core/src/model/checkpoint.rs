//! Checkpoint container: one file holding named little-endian float32
//! parameter arrays, the backbone config, region count, seed, and any FiLM
//! adapter sets keyed by (region, year).
//!
//! Layout: 8-byte magic, u32 container version, u64 JSON header length, the
//! JSON header, then the raw parameter payload in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, FiLMAdapterSet, FilmPair};
use crate::error::CoreError;
use crate::training::TrainConfig;
use crate::Result;

pub const MAGIC: &[u8; 8] = b"NWCCKPT1";
pub const VERSION: u32 = 1;

/// A trained model state: backbone plus adapter sets and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub adapters: BTreeMap<(u32, i32), FiLMAdapterSet>,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub best_val_csi: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterEntry {
    region_id: u32,
    year: i32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: BackboneConfig,
    num_regions: usize,
    seed: u64,
    epoch: usize,
    best_val_csi: Option<f64>,
    train_config: TrainConfig,
    adapters: Vec<AdapterEntry>,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(backbone: Backbone, train_config: TrainConfig) -> Self {
        Checkpoint {
            backbone,
            adapters: BTreeMap::new(),
            train_config,
            epoch: 0,
            best_val_csi: None,
        }
    }

    /// FNV-1a digest over every backbone parameter bit pattern; adapter
    /// parameters are excluded so frozen-backbone stages can assert equality.
    pub fn backbone_digest(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        self.backbone.visit_params(&mut |_, view| {
            for v in view.iter() {
                for byte in v.to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x100_0000_01b3);
                }
            }
        });
        hash
    }

    /// Atomic save (temp file + rename); an existing file is replaced.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, data: &mut dyn Iterator<Item = f32>,
                        payload: &mut Vec<u8>| {
            let mut len = 0usize;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
                len += 1;
            }
            entries.push(ParamEntry {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };

        self.backbone.visit_params(&mut |name, view| {
            push(
                name.to_string(),
                view.shape().to_vec(),
                &mut view.iter().copied(),
                &mut payload,
            );
        });
        let mut adapter_entries = Vec::new();
        for ((region_id, year), set) in &self.adapters {
            adapter_entries.push(AdapterEntry {
                region_id: *region_id,
                year: *year,
            });
            for (l, pair) in set.levels.iter().enumerate() {
                push(
                    format!("adapter.r{region_id}.y{year}.level{l}.gamma"),
                    vec![pair.gamma.len()],
                    &mut pair.gamma.iter().copied(),
                    &mut payload,
                );
                push(
                    format!("adapter.r{region_id}.y{year}.level{l}.beta"),
                    vec![pair.beta.len()],
                    &mut pair.beta.iter().copied(),
                    &mut payload,
                );
            }
        }

        let header = Header {
            format_version: VERSION,
            config: self.backbone.config.clone(),
            num_regions: self.backbone.num_regions,
            seed: self.backbone.seed,
            epoch: self.epoch,
            best_val_csi: self.best_val_csi,
            train_config: self.train_config.clone(),
            adapters: adapter_entries,
            params: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| CoreError::format(format!("checkpoint header serialization: {e}")))?;

        let parent = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)
            .map_err(|e| CoreError::io(parent.display().to_string(), e))?;
        tmp.write_all(MAGIC)
            .and_then(|_| tmp.write_all(&VERSION.to_le_bytes()))
            .and_then(|_| tmp.write_all(&(header_json.len() as u64).to_le_bytes()))
            .and_then(|_| tmp.write_all(&header_json))
            .and_then(|_| tmp.write_all(&payload))
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        tmp.persist(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let name = path.display();
        if bytes.len() < 20 {
            return Err(CoreError::format(format!("{name}: truncated checkpoint header")));
        }
        if &bytes[0..8] != MAGIC {
            return Err(CoreError::format(format!("{name}: bad checkpoint magic")));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::format(format!(
                "{name}: unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(CoreError::format(format!("{name}: truncated header json")));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| CoreError::format(format!("{name}: header json: {e}")))?;
        let payload = &bytes[20 + header_len..];

        let mut arrays: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
        for entry in &header.params {
            let start = entry.offset * 4;
            let end = start + entry.len * 4;
            if end > payload.len() {
                return Err(CoreError::format(format!(
                    "{name}: parameter {} extends past payload",
                    entry.name
                )));
            }
            let expected: usize = entry.shape.iter().product();
            if expected != entry.len {
                return Err(CoreError::format(format!(
                    "{name}: parameter {} shape {:?} disagrees with length {}",
                    entry.name, entry.shape, entry.len
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| CoreError::format(format!("{name}: parameter {}: {e}", entry.name)))?;
            arrays.insert(entry.name.clone(), arr);
        }

        let mut backbone = Backbone::build(&header.config, header.num_regions, header.seed)?;
        let mut missing = Vec::new();
        backbone.visit_params_mut(&mut |pname, mut view| {
            match arrays.remove(pname) {
                Some(arr) if arr.shape() == view.shape() => view.assign(&arr),
                Some(arr) => missing.push(format!(
                    "{pname}: checkpoint shape {:?} vs model shape {:?}",
                    arr.shape(),
                    view.shape()
                )),
                None => missing.push(format!("{pname}: absent from checkpoint")),
            };
        });
        if let Some(problem) = missing.first() {
            return Err(CoreError::format(format!("{name}: {problem}")));
        }

        let mut adapters = BTreeMap::new();
        for entry in &header.adapters {
            let (r, y) = (entry.region_id, entry.year);
            let mut levels = Vec::with_capacity(header.config.levels);
            for l in 0..header.config.levels {
                let gname = format!("adapter.r{r}.y{y}.level{l}.gamma");
                let bname = format!("adapter.r{r}.y{y}.level{l}.beta");
                let gamma = arrays
                    .remove(&gname)
                    .ok_or_else(|| CoreError::format(format!("{name}: {gname}: absent")))?;
                let beta = arrays
                    .remove(&bname)
                    .ok_or_else(|| CoreError::format(format!("{name}: {bname}: absent")))?;
                let want = header.config.channels_at(l);
                if gamma.len() != want || beta.len() != want {
                    return Err(CoreError::format(format!(
                        "{name}: adapter ({r}, {y}) level {l} has {} channels, expected {want}",
                        gamma.len()
                    )));
                }
                levels.push(FilmPair {
                    gamma: Array1::from_iter(gamma.iter().copied()),
                    beta: Array1::from_iter(beta.iter().copied()),
                });
            }
            adapters.insert(
                (r, y),
                FiLMAdapterSet {
                    region_id: r,
                    year: y,
                    levels,
                },
            );
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(CoreError::format(format!(
                "{name}: unexpected parameter {extra} in checkpoint"
            )));
        }

        Ok(Checkpoint {
            backbone,
            adapters,
            train_config: header.train_config,
            epoch: header.epoch,
            best_val_csi: header.best_val_csi,
        })
    }
}
