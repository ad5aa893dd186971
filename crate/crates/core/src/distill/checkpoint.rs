//! Single-file checkpoint container.
//!
//! Layout: magic (8 bytes), format version (u32 LE), header length (u64 LE),
//! JSON header, then every block's values as f64 LE in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::diffusion::ScheduleSpec;
use crate::distill::config::TrainConfig;
use crate::distill::conditioning::SpeakerTable;
use crate::error::{Error, Result};
use crate::io::{put_values, take_values};
use crate::nn::VarStore;
use crate::optim::Adam;
use crate::rng::RngState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VCDCKPT\0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIndex {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// `teacher` or the distillation mode name.
    pub kind: String,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub t_prime: usize,
    pub step: u64,
    pub rng: RngState,
    pub normalizer: Option<Normalizer>,
    pub speakers: SpeakerTable,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub blocks: Vec<BlockIndex>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        config: &TrainConfig,
        step: u64,
        rng: RngState,
        normalizer: Option<Normalizer>,
        speakers: SpeakerTable,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                kind: kind.to_string(),
                config: config.clone(),
                schedule: config.schedule(),
                t_prime: config.t_prime,
                step,
                rng,
                normalizer,
                speakers,
                optimizer_steps: BTreeMap::new(),
                blocks: Vec::new(),
            },
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, value: ArrayD<f64>) {
        self.header.blocks.push(BlockIndex {
            name,
            shape: value.shape().to_vec(),
        });
        self.values.push(value);
    }

    /// Adds every block of `vs` under `prefix.`.
    pub fn push_store(&mut self, prefix: &str, vs: &VarStore) {
        for (name, t) in vs.iter() {
            self.push(format!("{prefix}.{name}"), t.value().clone());
        }
    }

    pub fn push_optimizer(&mut self, prefix: &str, opt: &Adam, vs: &VarStore) {
        self.header
            .optimizer_steps
            .insert(prefix.to_string(), opt.steps_taken());
        for (name, v) in opt.state_blocks(vs) {
            self.push(format!("{prefix}.{name}"), v.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.header
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| &self.values[i])
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.header.blocks.iter().any(|b| b.name.starts_with(&p))
    }

    /// Loads every `prefix.*` block into `vs`; names and shapes must match.
    pub fn load_store(&self, prefix: &str, vs: &mut VarStore) -> Result<()> {
        let p = format!("{prefix}.");
        let blocks = self
            .header
            .blocks
            .iter()
            .zip(&self.values)
            .filter_map(|(b, v)| b.name.strip_prefix(&p).map(|n| (n, v)));
        vs.load_blocks(blocks)
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut Adam, vs: &VarStore) -> Result<()> {
        let step = *self
            .header
            .optimizer_steps
            .get(prefix)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {prefix}")))?;
        opt.load_state(vs, step, |name| self.get(&format!("{prefix}.{name}")).cloned())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            put_values(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(format!("corrupt file: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file {version}, supported {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
        let mut values = Vec::with_capacity(header.blocks.len());
        let mut pos = header_end;
        for b in &header.blocks {
            let n = 8 * b.shape.iter().product::<usize>();
            let end = pos + n;
            if end > bytes.len() {
                return Err(corrupt("truncated payload"));
            }
            values.push(take_values(&bytes[pos..end], &b.shape)?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
