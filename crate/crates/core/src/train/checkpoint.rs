//! Checkpoint container: a flat list of named arrays in a little-endian
//! binary format with a trailing FNV-1a checksum. Training state maps onto
//! it with name prefixes (student/, teacher/, opt/, ...).

use std::path::Path;

use crate::distill::CenterState;
use crate::error::{Error, Result};
use crate::masking::RecLossEma;
use crate::tensor::array::Array;
use crate::tensor::params::ParamSet;
use crate::tensor::scalar::{Dtype, Scalar};
use crate::train::{OptimizerState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"OUSCKPT1";

/// A stored array in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredArray {
    R32(Array<f32>),
    R64(Array<f64>),
}

impl StoredArray {
    fn dtype(&self) -> Dtype {
        match self {
            StoredArray::R32(_) => Dtype::Real32,
            StoredArray::R64(_) => Dtype::Real64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredArray::R32(a) => a.shape(),
            StoredArray::R64(a) => a.shape(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            StoredArray::R32(a) => a.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            StoredArray::R64(a) => a.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn typed<E: Scalar>(&self) -> Result<Array<E>> {
        match (self, E::DTYPE) {
            (StoredArray::R32(a), Dtype::Real32) => {
                Array::new(a.shape().to_vec(), a.data().iter().map(|&v| E::c(v as f64)).collect())
            }
            (StoredArray::R64(a), Dtype::Real64) => {
                Array::new(a.shape().to_vec(), a.data().iter().map(|&v| E::c(v)).collect())
            }
            _ => Err(Error::format("checkpoint dtype does not match run dtype")),
        }
    }

    pub fn from_typed<E: Scalar>(a: &Array<E>) -> Self {
        match E::DTYPE {
            Dtype::Real32 => StoredArray::R32(Array::new(
                a.shape().to_vec(),
                a.data().iter().map(|v| v.f64() as f32).collect(),
            )
            .expect("same shape")),
            Dtype::Real64 => StoredArray::R64(Array::new(
                a.shape().to_vec(),
                a.data().iter().map(|v| v.f64()).collect(),
            )
            .expect("same shape")),
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        match self {
            StoredArray::R32(a) => a.data().iter().map(|&v| v as f64).collect(),
            StoredArray::R64(a) => a.data().to_vec(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serialize entries in the given order.
pub fn encode_entries(entries: &[(String, StoredArray)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::format("too many checkpoint entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, arr) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::format(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(arr.dtype().tag());
        let ndim = u8::try_from(arr.shape().len())
            .map_err(|_| Error::format("too many dimensions"))?;
        out.push(ndim);
        for &d in arr.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("dimension too large"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&arr.payload());
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, StoredArray)>> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::format("checkpoint too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored_sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(body) != stored_sum {
        return Err(Error::format("checkpoint checksum mismatch"));
    }

    let mut pos = 8usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::format("truncated checkpoint entry"));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("non-UTF8 entry name"))?;
        let dtype = Dtype::from_tag(take(&mut pos, 1)?[0])
            .ok_or_else(|| Error::format("unknown dtype tag"))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            Dtype::Real32 => 4,
            Dtype::Real64 => 8,
        };
        let raw = take(&mut pos, numel * width)?;
        let arr = match dtype {
            Dtype::Real32 => StoredArray::R32(Array::new(
                shape,
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                    .collect(),
            )?),
            Dtype::Real64 => StoredArray::R64(Array::new(
                shape,
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect(),
            )?),
        };
        entries.push((name, arr));
    }
    if pos != body.len() {
        return Err(Error::format("trailing bytes after checkpoint entries"));
    }
    Ok(entries)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_file(path: &Path, entries: &[(String, StoredArray)]) -> Result<()> {
    let bytes = encode_entries(entries)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, StoredArray)>> {
    decode_entries(&std::fs::read(path)?)
}

fn scalar_entry(v: f64) -> StoredArray {
    StoredArray::R64(Array::from_vec(vec![v]))
}

fn string_entry(s: &str) -> StoredArray {
    StoredArray::R64(Array::from_vec(s.bytes().map(|b| b as f64).collect()))
}

fn entry_to_string(arr: &StoredArray) -> Result<String> {
    let bytes: Vec<u8> = arr
        .as_f64_vec()
        .iter()
        .map(|&v| {
            if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::format("invalid text entry"))
            }
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|_| Error::format("invalid UTF-8 text entry"))
}

/// Full training state -> entry list, in a deterministic order.
pub fn state_to_entries<E: Scalar>(state: &TrainState<E>) -> Result<Vec<(String, StoredArray)>> {
    let mut entries = Vec::new();
    entries.push(("config/toml".into(), string_entry(&state.cfg.to_toml()?)));
    entries.push(("meta/next_epoch".into(), scalar_entry(state.next_epoch as f64)));
    entries.push(("meta/global_step".into(), scalar_entry(state.global_step as f64)));
    entries.push(("meta/opt_step".into(), scalar_entry(state.opt.step as f64)));
    entries.push((
        "center/values".into(),
        StoredArray::R64(Array::from_vec(state.center.center.clone())),
    ));
    entries.push((
        "center_pat/values".into(),
        StoredArray::R64(Array::from_vec(state.center_pat.center.clone())),
    ));

    let mut names: Vec<&str> = state.student.names().collect();
    names.sort_unstable();
    for name in &names {
        entries.push((
            format!("student/{name}"),
            StoredArray::from_typed(state.student.get(name)?),
        ));
        entries.push((
            format!("teacher/{name}"),
            StoredArray::from_typed(state.teacher.get(name)?),
        ));
        if let Some(m) = state.opt.m.get(*name) {
            entries.push((format!("opt/m/{name}"), StoredArray::from_typed(m)));
        }
        if let Some(v) = state.opt.v.get(*name) {
            entries.push((format!("opt/v/{name}"), StoredArray::from_typed(v)));
        }
    }

    for (id, vals) in state.rec_ema.export() {
        entries.push((
            format!("recema/{id}"),
            StoredArray::R64(Array::from_vec(vals)),
        ));
    }
    Ok(entries)
}

pub fn entries_to_state<E: Scalar>(entries: &[(String, StoredArray)]) -> Result<TrainState<E>> {
    let lookup = |key: &str| -> Result<&StoredArray> {
        entries
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::format(format!("checkpoint missing entry {key}")))
    };
    let cfg = TrainConfig::from_toml(&entry_to_string(lookup("config/toml")?)?)?;
    let next_epoch = lookup("meta/next_epoch")?.as_f64_vec()[0] as usize;
    let global_step = lookup("meta/global_step")?.as_f64_vec()[0] as u64;
    let opt_step = lookup("meta/opt_step")?.as_f64_vec()[0] as u64;

    let mut student = ParamSet::<E>::new(true);
    let mut teacher = ParamSet::<E>::new(false);
    let mut opt = OptimizerState::<E>::new();
    opt.step = opt_step;
    let mut rec_entries: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, arr) in entries {
        if let Some(p) = name.strip_prefix("student/") {
            student.insert(p, arr.typed::<E>()?)?;
        } else if let Some(p) = name.strip_prefix("teacher/") {
            teacher.insert(p, arr.typed::<E>()?)?;
        } else if let Some(p) = name.strip_prefix("opt/m/") {
            opt.m.insert(p.to_string(), arr.typed::<E>()?);
        } else if let Some(p) = name.strip_prefix("opt/v/") {
            opt.v.insert(p.to_string(), arr.typed::<E>()?);
        } else if let Some(p) = name.strip_prefix("recema/") {
            rec_entries.push((p.to_string(), arr.as_f64_vec()));
        }
    }
    if student.is_empty() || teacher.is_empty() {
        return Err(Error::format("checkpoint holds no model parameters"));
    }
    student.zero_grads();

    let restore_center = |key: &str| -> Result<CenterState> {
        let mut c = CenterState::new(cfg.head.prototypes, cfg.center_decay)?;
        let vals = lookup(key)?.as_f64_vec();
        if vals.len() != c.center.len() {
            return Err(Error::format("center size does not match head config"));
        }
        c.center = vals;
        Ok(c)
    };
    let center = restore_center("center/values")?;
    let center_pat = restore_center("center_pat/values")?;
    let rec_ema = RecLossEma::import(cfg.rec_ema_decay, rec_entries)?;

    Ok(TrainState {
        cfg,
        student,
        teacher,
        opt,
        center,
        center_pat,
        rec_ema,
        next_epoch,
        global_step,
    })
}

pub fn save_state<E: Scalar>(path: &Path, state: &TrainState<E>) -> Result<()> {
    write_file(path, &state_to_entries(state)?)
}

pub fn load_state<E: Scalar>(path: &Path) -> Result<TrainState<E>> {
    entries_to_state(&read_file(path)?)
}
