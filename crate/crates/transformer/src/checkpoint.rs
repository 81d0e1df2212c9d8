//! "RQTM" model checkpoints.
//!
//! Layout, little-endian: magic `RQTM`, u32 version, the config as u32
//! `n_spatial, n_depth, n_e, heads, t, d, k, n_z, code_tables`, f64
//! `dropout`, u32 `condition_classes` (0 for none), u8 condition mode
//! (0 replace, 1 prepend), then u32 tensor count and per tensor u32 rank,
//! u32 dims and f64 values, in parameter registration order.

use crate::config::{ConditionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::RqTransformer;
use rq_autodiff::Tensor;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"RQTM";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl RqTransformer {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = self.config();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            c.n_spatial,
            c.n_depth,
            c.n_e,
            c.heads,
            c.t,
            c.d,
            c.k,
            c.n_z,
            c.code_tables,
        ] {
            put_u32(w, v)?;
        }
        w.write_all(&c.dropout.to_le_bytes())?;
        put_u32(w, c.condition_classes.unwrap_or(0))?;
        w.write_all(&[match c.condition_mode {
            ConditionMode::Replace => 0,
            ConditionMode::Prepend => 1,
        }])?;
        let tensors = self.params().tensors();
        put_u32(w, tensors.len())?;
        for t in tensors {
            put_u32(w, t.shape().len())?;
            for &d in t.shape() {
                put_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an RQTM checkpoint".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported RQTM version {version}")));
        }
        let mut f = [0; 9];
        for v in &mut f {
            *v = get_u32(r)?;
        }
        let dropout = get_f64(r)?;
        let classes = get_u32(r)?;
        let mut mode = [0; 1];
        r.read_exact(&mut mode)?;
        let config = ModelConfig {
            n_spatial: f[0],
            n_depth: f[1],
            n_e: f[2],
            heads: f[3],
            t: f[4],
            d: f[5],
            k: f[6],
            n_z: f[7],
            code_tables: f[8],
            dropout,
            condition_classes: (classes > 0).then_some(classes),
            condition_mode: match mode[0] {
                0 => ConditionMode::Replace,
                1 => ConditionMode::Prepend,
                m => return Err(Error::Format(format!("unknown condition mode {m}"))),
            },
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let count = get_u32(r)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = get_u32(r)?;
            if rank > 8 {
                return Err(Error::Format(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![
                0u8;
                n.checked_mul(8)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?
            ];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let table = tensors
            .first()
            .ok_or_else(|| Error::Format("checkpoint holds no tensors".into()))?
            .data()
            .to_vec();
        let mut model = RqTransformer::new(config, table, 0).map_err(|e| Error::Format(e.to_string()))?;
        let expected = model.params().tensors();
        if expected.len() != tensors.len() || expected.iter().zip(&tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Format("tensor layout does not match the config".into()));
        }
        model.params_mut().replace_tensors(tensors);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let model = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(model)
    }
}
