//! Self-describing policy/value checkpoints.
//!
//! # Byte layout (all integers and floats little-endian)
//!
//! ```text
//! offset size  field
//! 0      4     magic bytes "VPPC"
//! 4      4     format version, u32 (currently 1)
//! 8      8     training seed, u64
//! 16     32    SHA-256 of the resolved config the run used
//! 48     1     observation layout tag (0 VA, 1 TA, 2 PI, 3 All)
//! 49     7     zero padding
//! 56     8     actor Lipschitz bound, f64
//! 64     4     tensor count, u32
//! ```
//!
//! Followed by that many tensor records:
//!
//! ```text
//! 4            name length, u32
//! <len>        tensor name, UTF-8 (e.g. "actor.l1.w")
//! 4            rank, u32
//! 8 * rank     dimensions, u64 each, row-major
//! 4 * prod     values, f32
//! ```
//!
//! Weights are stored in f32 (the training precision), so a save/load
//! round trip reproduces forward passes bit-for-bit. Optimizer moments
//! are deliberately not persisted: a checkpoint captures the policy, not
//! the optimizer trajectory, and resumed training restarts Adam.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::policy::{Actor, Critic};
use super::LearnerError;
use crate::env::ObsLayout;

const MAGIC: &[u8; 4] = b"VPPC";
const VERSION: u32 = 1;

/// A trained policy/value pair plus its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub layout: ObsLayout,
    pub actor: Actor<f32>,
    pub critic: Critic<f32>,
}

/// SHA-256 of the resolved configuration text.
pub fn config_hash_of(text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().into()
}

fn layout_tag(layout: ObsLayout) -> u8 {
    match layout {
        ObsLayout::VA => 0,
        ObsLayout::TA => 1,
        ObsLayout::PI => 2,
        ObsLayout::All => 3,
    }
}

fn layout_from_tag(tag: u8) -> Result<ObsLayout, LearnerError> {
    Ok(match tag {
        0 => ObsLayout::VA,
        1 => ObsLayout::TA,
        2 => ObsLayout::PI,
        3 => ObsLayout::All,
        other => {
            return Err(LearnerError::BadCheckpoint(format!(
                "unknown observation layout tag {other}"
            )))
        }
    })
}

struct TensorRecord {
    name: String,
    dims: Vec<u64>,
    data: Vec<f32>,
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    dims: &[u64],
    data: &[f32],
) -> Result<(), LearnerError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], LearnerError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, LearnerError> {
    Ok(u32::from_le_bytes(read_exact_array::<4, _>(r)?))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<TensorRecord, LearnerError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 256 {
        return Err(LearnerError::BadCheckpoint(format!(
            "tensor name length {name_len} is implausible"
        )));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| LearnerError::BadCheckpoint("tensor name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 4 {
        return Err(LearnerError::BadCheckpoint(format!(
            "tensor {name} has rank {rank}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u64::from_le_bytes(read_exact_array::<8, _>(r)?));
    }
    let count = dims.iter().product::<u64>() as usize;
    if count > 64 << 20 {
        return Err(LearnerError::BadCheckpoint(format!(
            "tensor {name} claims {count} elements"
        )));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f32::from_le_bytes(read_exact_array::<4, _>(r)?));
    }
    Ok(TensorRecord { name, dims, data })
}

fn arr2_tensor(name: &str, a: &Array2<f32>) -> (String, Vec<u64>, Vec<f32>) {
    (
        name.to_string(),
        vec![a.nrows() as u64, a.ncols() as u64],
        a.iter().copied().collect(),
    )
}

fn arr1_tensor(name: &str, a: &Array1<f32>) -> (String, Vec<u64>, Vec<f32>) {
    (name.to_string(), vec![a.len() as u64], a.to_vec())
}

impl Checkpoint {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), LearnerError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&[layout_tag(self.layout)])?;
        w.write_all(&[0u8; 7])?;
        w.write_all(&self.actor.lipschitz.to_le_bytes())?;

        let mut tensors: Vec<(String, Vec<u64>, Vec<f32>)> = vec![
            arr2_tensor("actor.l1.w", &self.actor.l1.w),
            arr1_tensor("actor.l1.b", &self.actor.l1.b),
            arr2_tensor("actor.l2.w", &self.actor.l2.w),
            arr1_tensor("actor.l2.b", &self.actor.l2.b),
            arr2_tensor("actor.head.w", &self.actor.head.w),
            arr1_tensor("actor.head.b", &self.actor.head.b),
            arr1_tensor("actor.log_std", &self.actor.log_std),
            arr2_tensor("critic.lstm.w_ih", &self.critic.lstm.w_ih),
            arr2_tensor("critic.lstm.w_hh", &self.critic.lstm.w_hh),
            arr1_tensor("critic.lstm.b", &self.critic.lstm.b),
            arr2_tensor("critic.f1.w", &self.critic.f1.w),
            arr1_tensor("critic.f1.b", &self.critic.f1.b),
            arr2_tensor("critic.f2.w", &self.critic.f2.w),
            arr1_tensor("critic.f2.b", &self.critic.f2.b),
            arr2_tensor("critic.out.w", &self.critic.out.w),
            arr1_tensor("critic.out.b", &self.critic.out.b),
        ];
        for (i, st) in self.actor.spectral.iter().enumerate() {
            tensors.push(arr1_tensor(&format!("actor.spectral_v.{i}"), &st.v));
        }
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, dims, data) in &tensors {
            write_tensor(&mut w, name, dims, data)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, LearnerError> {
        let mut r = BufReader::new(File::open(path)?);
        let magic = read_exact_array::<4, _>(&mut r)?;
        if &magic != MAGIC {
            return Err(LearnerError::BadCheckpoint(
                "missing VPPC magic bytes".into(),
            ));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(LearnerError::BadCheckpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let seed = u64::from_le_bytes(read_exact_array::<8, _>(&mut r)?);
        let config_hash = read_exact_array::<32, _>(&mut r)?;
        let tag = read_exact_array::<1, _>(&mut r)?[0];
        let layout = layout_from_tag(tag)?;
        let _pad = read_exact_array::<7, _>(&mut r)?;
        let lipschitz = f64::from_le_bytes(read_exact_array::<8, _>(&mut r)?);
        let count = read_u32(&mut r)? as usize;
        let mut records = std::collections::HashMap::new();
        for _ in 0..count {
            let t = read_tensor(&mut r)?;
            records.insert(t.name.clone(), t);
        }

        let take2 = |records: &std::collections::HashMap<String, TensorRecord>,
                     name: &str|
         -> Result<Array2<f32>, LearnerError> {
            let t = records
                .get(name)
                .ok_or_else(|| LearnerError::BadCheckpoint(format!("missing tensor {name}")))?;
            if t.dims.len() != 2 {
                return Err(LearnerError::BadCheckpoint(format!(
                    "tensor {name} should be rank 2"
                )));
            }
            Array2::from_shape_vec((t.dims[0] as usize, t.dims[1] as usize), t.data.clone())
                .map_err(|e| LearnerError::BadCheckpoint(format!("tensor {name}: {e}")))
        };
        let take1 = |records: &std::collections::HashMap<String, TensorRecord>,
                     name: &str|
         -> Result<Array1<f32>, LearnerError> {
            let t = records
                .get(name)
                .ok_or_else(|| LearnerError::BadCheckpoint(format!("missing tensor {name}")))?;
            if t.dims.len() != 1 {
                return Err(LearnerError::BadCheckpoint(format!(
                    "tensor {name} should be rank 1"
                )));
            }
            Ok(Array1::from_vec(t.data.clone()))
        };

        let l1w = take2(&records, "actor.l1.w")?;
        let l2w = take2(&records, "actor.l2.w")?;
        let headw = take2(&records, "actor.head.w")?;
        let (h1, obs_dim) = (l1w.nrows(), l1w.ncols());
        let (h2, act_dim) = (l2w.nrows(), headw.nrows());
        if l2w.ncols() != h1 || headw.ncols() != h2 {
            return Err(LearnerError::BadCheckpoint(
                "actor layer shapes do not compose".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut actor: Actor<f32> = Actor::new(obs_dim, h1, h2, act_dim, lipschitz, &mut rng);
        actor.l1.w = l1w;
        actor.l1.b = take1(&records, "actor.l1.b")?;
        actor.l2.w = l2w;
        actor.l2.b = take1(&records, "actor.l2.b")?;
        actor.head.w = headw;
        actor.head.b = take1(&records, "actor.head.b")?;
        actor.log_std = take1(&records, "actor.log_std")?;
        for i in 0..3 {
            let v = take1(&records, &format!("actor.spectral_v.{i}"))?;
            if v.len() == actor.spectral[i].v.len() {
                actor.spectral[i].v = v;
            } else {
                return Err(LearnerError::BadCheckpoint(format!(
                    "spectral vector {i} has wrong length"
                )));
            }
        }

        let w_ih = take2(&records, "critic.lstm.w_ih")?;
        let w_hh = take2(&records, "critic.lstm.w_hh")?;
        let hidden = w_hh.ncols();
        if w_ih.nrows() != 4 * hidden || w_hh.nrows() != 4 * hidden || w_ih.ncols() != obs_dim {
            return Err(LearnerError::BadCheckpoint(
                "critic LSTM shapes do not compose".into(),
            ));
        }
        let f1w = take2(&records, "critic.f1.w")?;
        let mlp_hidden = f1w.nrows();
        let mut critic: Critic<f32> = Critic::new(obs_dim, hidden, mlp_hidden, &mut rng);
        critic.lstm.w_ih = w_ih;
        critic.lstm.w_hh = w_hh;
        critic.lstm.b = take1(&records, "critic.lstm.b")?;
        critic.f1.w = f1w;
        critic.f1.b = take1(&records, "critic.f1.b")?;
        critic.f2.w = take2(&records, "critic.f2.w")?;
        critic.f2.b = take1(&records, "critic.f2.b")?;
        critic.out.w = take2(&records, "critic.out.w")?;
        critic.out.b = take1(&records, "critic.out.b")?;

        if layout.dim() != obs_dim {
            return Err(LearnerError::BadCheckpoint(format!(
                "layout {layout} implies obs dim {}, tensors say {obs_dim}",
                layout.dim()
            )));
        }

        Ok(Self {
            seed,
            config_hash,
            layout,
            actor,
            critic,
        })
    }
}
