use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, AdamState, ParamStore};

const MAGIC: &[u8; 8] = b"FLXMVCKP";
const FORMAT_VERSION: u32 = 1;

/// Schedule parameters, enough to rebuild the betas exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn of(s: &NoiseSchedule) -> Self {
        Self {
            timesteps: s.len(),
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        crate::diffusion::make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Completed optimizer steps.
    pub step: u64,
    pub config: TrainConfig,
    pub schedule: ScheduleSpec,
    pub vocab_hash: String,
    pub train_ids: Vec<String>,
    pub adam: Adam,
    pub adam_step: u64,
    pub tensors: Vec<TensorInfo>,
}

/// Model parameters and optimizer moments at a step boundary.
///
/// On disk: 8-byte magic, `u32` format version, `u64` header length, the
/// JSON header, then little-endian `f32` parameters, first moments and second
/// moments, each in header tensor order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam_state: AdamState<f32>,
}

impl Checkpoint {
    pub fn new(
        step: u64,
        config: TrainConfig,
        schedule: &NoiseSchedule,
        vocab_hash: String,
        train_ids: Vec<String>,
        params: ParamStore<f32>,
        adam_state: AdamState<f32>,
    ) -> Self {
        let tensors = params
            .ids()
            .map(|id| TensorInfo {
                name: params.name(id).to_string(),
                shape: params.shape(id).to_vec(),
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            step,
            adam: Adam::with_lr(config.lr),
            config,
            schedule: ScheduleSpec::of(schedule),
            vocab_hash,
            train_ids,
            adam_step: adam_state.step,
            tensors,
        };
        Self {
            header,
            params,
            adam_state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.params.num_scalars();
        let mut out = Vec::with_capacity(20 + header.len() + 12 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let ids: Vec<_> = self.params.ids().collect();
        for &id in &ids {
            self.params
                .value(id)
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for moments in [&self.adam_state.m, &self.adam_state.v] {
            for &id in &ids {
                moments[id.0]
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(out)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&self.to_bytes()?).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).at(path)?;
        Self::from_bytes(&data).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if data.len() < 20 || &data[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
        let body = data.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut params = Denoiser::<f32>::new(header.config.model.clone(), 0)?.params;
        let ids: Vec<_> = params.ids().collect();
        if ids.len() != header.tensors.len() {
            return Err(bad("tensor list does not match the model configuration"));
        }
        for (&id, info) in ids.iter().zip(&header.tensors) {
            if params.name(id) != info.name || params.shape(id) != info.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not match the model configuration",
                    info.name
                )));
            }
        }
        let n = params.num_scalars();
        let floats = &body[hlen..];
        if floats.len() != 12 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} data bytes, found {}",
                12 * n,
                floats.len()
            )));
        }
        let mut chunks = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for &id in &ids {
            params
                .value_mut(id)
                .iter_mut()
                .for_each(|v| *v = chunks.next().expect("sized"));
        }
        let mut adam_state = AdamState::new(&params);
        adam_state.step = header.adam_step;
        for moments in [&mut adam_state.m, &mut adam_state.v] {
            for &id in &ids {
                moments[id.0]
                    .iter_mut()
                    .for_each(|v| *v = chunks.next().expect("sized"));
            }
        }
        Ok(Self {
            header,
            params,
            adam_state,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header.schedule.build()
    }

    pub fn denoiser(&self) -> Result<Denoiser<f32>> {
        let mut d = Denoiser::new(self.header.config.model.clone(), 0)?;
        d.params = self.params.clone();
        Ok(d)
    }
}
