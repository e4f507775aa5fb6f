//! Offline dataset persistence, normalization, and batch sampling.
//!
//! A dataset is the sole training input: a flat store of transitions
//! (s, a, r, s′, a′, done) with a header and state-normalization stats.
//! On-disk layout (little-endian): magic `BPRD`, version `u32` = 1,
//! `state_dim u32`, `action_dim u32`, `count u64`, `reward_scale f32`,
//! env tag (`u8` length + UTF-8), then `count` records of `f32`
//! (s, a, r, s′, a′, done as 0/1), then the state mean and std vectors
//! as `f32`. Values are held as `f32` in memory too, so a save/load
//! round-trip is bit-exact; batches are widened to `f64` for training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{BprError, Result};

pub const MAGIC: &[u8; 4] = b"BPRD";
pub const VERSION: u32 = 1;

/// One logged interaction. `a_next` is the next action actually taken;
/// terminal transitions carry a zero vector there and `done = true`, and
/// consumers must gate on `done`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub next_action: Vec<f32>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub reward_scale: f32,
    pub env_tag: String,
    states: Array2<f32>,
    actions: Array2<f32>,
    rewards: Vec<f32>,
    next_states: Array2<f32>,
    next_actions: Array2<f32>,
    dones: Vec<bool>,
    /// Map from raw environment states to this dataset's state space:
    /// normalized = (raw − mean) / std. Identity until `normalize_states`.
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
}

/// A uniformly sampled minibatch, widened to `f64`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub next_actions: Array2<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }
}

impl OfflineDataset {
    pub fn from_transitions(
        state_dim: usize,
        action_dim: usize,
        env_tag: &str,
        transitions: &[Transition],
    ) -> Result<Self> {
        let n = transitions.len();
        let mut states = Array2::zeros((n, state_dim));
        let mut actions = Array2::zeros((n, action_dim));
        let mut next_states = Array2::zeros((n, state_dim));
        let mut next_actions = Array2::zeros((n, action_dim));
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim
                || t.next_state.len() != state_dim
                || t.action.len() != action_dim
                || t.next_action.len() != action_dim
            {
                return Err(BprError::Dataset(format!(
                    "transition {i} dims do not match header ({state_dim}, {action_dim})"
                )));
            }
            if !t.reward.is_finite() {
                return Err(BprError::Dataset(format!("non-finite reward at {i}")));
            }
            for (j, &v) in t.state.iter().enumerate() {
                states[(i, j)] = v;
            }
            for (j, &v) in t.action.iter().enumerate() {
                actions[(i, j)] = v;
            }
            for (j, &v) in t.next_state.iter().enumerate() {
                next_states[(i, j)] = v;
            }
            for (j, &v) in t.next_action.iter().enumerate() {
                next_actions[(i, j)] = v;
            }
            rewards.push(t.reward);
            dones.push(t.done);
        }
        Ok(OfflineDataset {
            state_dim,
            action_dim,
            reward_scale: 1.0,
            env_tag: env_tag.to_string(),
            states,
            actions,
            rewards,
            next_states,
            next_actions,
            dones,
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.states.row(i).to_vec(),
            action: self.actions.row(i).to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states.row(i).to_vec(),
            next_action: self.next_actions.row(i).to_vec(),
            done: self.dones[i],
        }
    }

    /// All dataset states widened to f64 (n × state_dim).
    pub fn states_f64(&self) -> Array2<f64> {
        self.states.mapv(|v| v as f64)
    }

    pub fn actions_f64(&self) -> Array2<f64> {
        self.actions.mapv(|v| v as f64)
    }

    /// Uniform-with-replacement minibatch, deterministic under the seed.
    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(BprError::Dataset("cannot sample from empty dataset".into()));
        }
        if size == 0 {
            return Err(BprError::Dataset("batch size must be >= 1".into()));
        }
        let n = self.len();
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
        self.gather(&idx)
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let b = idx.len();
        let mut batch = Batch {
            states: Array2::zeros((b, self.state_dim)),
            actions: Array2::zeros((b, self.action_dim)),
            rewards: Array1::zeros(b),
            next_states: Array2::zeros((b, self.state_dim)),
            next_actions: Array2::zeros((b, self.action_dim)),
            dones: Vec::with_capacity(b),
        };
        for (row, &i) in idx.iter().enumerate() {
            for j in 0..self.state_dim {
                batch.states[(row, j)] = self.states[(i, j)] as f64;
                batch.next_states[(row, j)] = self.next_states[(i, j)] as f64;
            }
            for j in 0..self.action_dim {
                batch.actions[(row, j)] = self.actions[(i, j)] as f64;
                batch.next_actions[(row, j)] = self.next_actions[(i, j)] as f64;
            }
            batch.rewards[row] = self.rewards[i] as f64;
            batch.dones.push(self.dones[i]);
        }
        Ok(batch)
    }

    /// Standardize states (and next states) to zero mean / unit variance
    /// with an epsilon floor on the std. The persisted stats always map
    /// raw environment states to the dataset's current state space, so
    /// repeated calls compose correctly.
    pub fn normalize_states(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.len() < 2 {
            return Err(BprError::Dataset("normalize_states needs count >= 2".into()));
        }
        let n = self.len() as f64;
        let mut local_mean = vec![0.0f64; self.state_dim];
        let mut local_std = vec![0.0f64; self.state_dim];
        for j in 0..self.state_dim {
            let col = self.states.column(j);
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = col
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let std = var.sqrt().max(1e-6);
            local_mean[j] = mean;
            local_std[j] = std;
        }
        for j in 0..self.state_dim {
            let (m, s) = (local_mean[j] as f32, local_std[j] as f32);
            for i in 0..self.len() {
                self.states[(i, j)] = (self.states[(i, j)] - m) / s;
                self.next_states[(i, j)] = (self.next_states[(i, j)] - m) / s;
            }
            // raw → old space → new space: ((raw − M)/S − m)/s
            let composed_mean = self.state_mean[j] as f64 + self.state_std[j] as f64 * local_mean[j];
            let composed_std = self.state_std[j] as f64 * local_std[j];
            self.state_mean[j] = composed_mean as f32;
            self.state_std[j] = composed_std as f32;
        }
        Ok((local_mean, local_std))
    }

    /// Multiply rewards by `factor`; the header records the product of all
    /// applied factors.
    pub fn scale_rewards(&mut self, factor: f32) -> Result<()> {
        if !(factor > 0.0) {
            return Err(BprError::Domain(format!("reward scale factor must be > 0, got {factor}")));
        }
        for r in &mut self.rewards {
            *r *= factor;
        }
        self.reward_scale *= factor;
        Ok(())
    }

    /// Map a raw environment state into the dataset's state space.
    pub fn normalize_raw_state(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.state_mean[j] as f64) / self.state_std[j] as f64)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.state_dim as u32)?;
        w.write_u32::<LittleEndian>(self.action_dim as u32)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_f32::<LittleEndian>(self.reward_scale)?;
        let tag = self.env_tag.as_bytes();
        assert!(tag.len() <= u8::MAX as usize, "env tag too long");
        w.write_u8(tag.len() as u8)?;
        w.write_all(tag)?;
        for i in 0..self.len() {
            for j in 0..self.state_dim {
                w.write_f32::<LittleEndian>(self.states[(i, j)])?;
            }
            for j in 0..self.action_dim {
                w.write_f32::<LittleEndian>(self.actions[(i, j)])?;
            }
            w.write_f32::<LittleEndian>(self.rewards[i])?;
            for j in 0..self.state_dim {
                w.write_f32::<LittleEndian>(self.next_states[(i, j)])?;
            }
            for j in 0..self.action_dim {
                w.write_f32::<LittleEndian>(self.next_actions[(i, j)])?;
            }
            w.write_f32::<LittleEndian>(if self.dones[i] { 1.0 } else { 0.0 })?;
        }
        for &m in &self.state_mean {
            w.write_f32::<LittleEndian>(m)?;
        }
        for &s in &self.state_std {
            w.write_f32::<LittleEndian>(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let total = file.metadata()?.len();
        let mut r = Cursored {
            inner: BufReader::new(file),
            offset: 0,
            total,
        };
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic)?;
        if &magic != MAGIC {
            return Err(BprError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(BprError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let reward_scale = r.f32()?;
        let tag_len = r.u8()? as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact_at(&mut tag)?;
        let env_tag = String::from_utf8(tag).map_err(|e| BprError::Format {
            offset: r.offset,
            message: format!("env tag not UTF-8: {e}"),
        })?;

        let record = 2 * state_dim + 2 * action_dim + 2;
        let expected = r.offset + (count * record + 2 * state_dim) as u64 * 4;
        if expected != total {
            return Err(BprError::Format {
                offset: r.offset,
                message: format!("expected file length {expected}, actual {total}"),
            });
        }

        let mut ds = OfflineDataset {
            state_dim,
            action_dim,
            reward_scale,
            env_tag,
            states: Array2::zeros((count, state_dim)),
            actions: Array2::zeros((count, action_dim)),
            rewards: vec![0.0; count],
            next_states: Array2::zeros((count, state_dim)),
            next_actions: Array2::zeros((count, action_dim)),
            dones: vec![false; count],
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
        };
        for i in 0..count {
            for j in 0..state_dim {
                ds.states[(i, j)] = r.f32()?;
            }
            for j in 0..action_dim {
                ds.actions[(i, j)] = r.f32()?;
            }
            ds.rewards[i] = r.f32()?;
            for j in 0..state_dim {
                ds.next_states[(i, j)] = r.f32()?;
            }
            for j in 0..action_dim {
                ds.next_actions[(i, j)] = r.f32()?;
            }
            ds.dones[i] = r.f32()? != 0.0;
        }
        for j in 0..state_dim {
            ds.state_mean[j] = r.f32()?;
        }
        for j in 0..state_dim {
            ds.state_std[j] = r.f32()?;
        }
        Ok(ds)
    }
}

struct Cursored<R> {
    inner: R,
    offset: u64,
    total: u64,
}

impl<R: Read> Cursored<R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let need = buf.len() as u64;
        if self.offset + need > self.total {
            return Err(BprError::Format {
                offset: self.offset,
                message: format!(
                    "truncated: need {} bytes at offset {}, file has {}",
                    need, self.offset, self.total
                ),
            });
        }
        self.inner.read_exact(buf)?;
        self.offset += need;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}
