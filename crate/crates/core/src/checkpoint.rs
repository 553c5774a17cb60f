//! Binary checkpoint container: parameters, optimizer moments, step counter
//! and the run configuration text, behind a magic tag and format version.
//!
//! Layout (little endian): magic, `u32` version, `u64` step, config text,
//! `u32` parameter count, then per parameter its name, rank, dims and `f32`
//! values, then a `u8` flag followed by the Adam step and both moment lists
//! when optimizer state is present.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use camodiff_nn::{Adam, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CAMODIFF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &RunConfig) -> Self {
        let (m, v) = state.optimizer.moments();
        Self {
            step: state.step,
            config: config.clone(),
            params: state.model.params.clone(),
            optimizer: Some(OptimizerState { step: state.optimizer.step_count(), m: m.to_vec(), v: v.to_vec() }),
        }
    }

    /// Parameters only, no optimizer state.
    pub fn from_model(model: &Model<f32>, config: &RunConfig, step: u64) -> Self {
        Self { step, config: config.clone(), params: model.params.clone(), optimizer: None }
    }

    /// Rebuilds the network described by the stored config and loads the
    /// stored parameters into it, checking names and shapes.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::new(self.config.model.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the configured network has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (id, p) in self.params.iter() {
            let target = model.params.find(&p.name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", p.name)))?;
            if target.index() != id.index() || model.params.get(target).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("tensor {} does not match the configured network", p.name)));
            }
            *model.params.get_mut(target) = p.value.clone();
        }
        Ok(model)
    }

    /// Training state for resuming under `config`; the noise schedule must
    /// match the one the checkpoint was trained with.
    pub fn into_state(self, config: &TrainConfig) -> Result<TrainState> {
        let own = &self.config.train;
        if (own.diffusion_steps, own.beta_start, own.beta_end) != (config.diffusion_steps, config.beta_start, config.beta_end) {
            return Err(Error::Checkpoint("checkpoint schedule differs from the run configuration".into()));
        }
        let model = self.to_model()?;
        let optimizer = match self.optimizer {
            Some(o) => Adam::from_state(config.adam(), o.step, o.m, o.v),
            None => Adam::new(&model.params, config.adam()),
        };
        Ok(TrainState { model, optimizer, step: self.step })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut b, self.config.to_text().as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            put_bytes(&mut b, p.name.as_bytes());
            put_tensor(&mut b, &p.value);
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.extend_from_slice(&o.step.to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut b, t);
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")));
        }
        let step = r.u64()?;
        let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = RunConfig::from_text(&text)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            params.add(name, r.tensor()?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let ostep = r.u64()?;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step: ostep, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self { step, config, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u64).to_le_bytes());
    b.extend_from_slice(s);
}

fn put_tensor(b: &mut Vec<u8>, t: &Tensor<f32>) {
    b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?)
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor rank {rank} is implausible")));
        }
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Tensor::from_vec(&dims, data))
    }
}
