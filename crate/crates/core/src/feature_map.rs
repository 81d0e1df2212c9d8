//! Feature maps, code stack maps and position-wise quantization.

use crate::error::{Error, Result};
use crate::io::{self, checked_len};
use crate::par::Execution;
use crate::rng;
use crate::rq::{rq_encode, rq_encode_stochastic, CodebookStack, RqResult};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"RQCM";
const MAX_CODES: usize = 1 << 28;

/// `H × W × n_z` feature map, row-major with the channel axis minor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    /// `T = H·W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Vector at raster position `t = h·W + w`.
    pub fn at(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// `H × W × D` integer codes in raster order, depth minor:
/// `codes[(h·W + w)·D + d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeStackMap {
    pub height: u32,
    pub width: u32,
    pub depth: u32,
    pub codebook_size: u32,
    pub codebook_id: [u8; 32],
    codes: Vec<u32>,
}

impl CodeStackMap {
    pub fn new(
        height: u32,
        width: u32,
        depth: u32,
        codebook_size: u32,
        codebook_id: [u8; 32],
        codes: Vec<u32>,
    ) -> Result<Self> {
        let expected = height as usize * width as usize * depth as usize;
        if codes.len() != expected {
            return Err(Error::Shape(format!(
                "code map {height}x{width}x{depth} needs {expected} codes, got {}",
                codes.len()
            )));
        }
        if depth == 0 || codebook_size == 0 {
            return Err(Error::Parameter("code map needs D >= 1 and K >= 1".into()));
        }
        if let Some(&bad) = codes.iter().find(|c| **c >= codebook_size) {
            return Err(Error::Index {
                index: bad as usize,
                bound: codebook_size as usize,
            });
        }
        Ok(Self {
            height,
            width,
            depth,
            codebook_size,
            codebook_id,
            codes,
        })
    }

    /// `T = H·W`.
    pub fn positions(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn depth(&self) -> usize {
        self.depth as usize
    }

    pub fn code(&self, t: usize, d: usize) -> usize {
        self.codes[t * self.depth as usize + d] as usize
    }

    /// Row `S_t` of the raster-ordered `T × D` view.
    pub fn stack(&self, t: usize) -> Vec<usize> {
        let d = self.depth as usize;
        self.codes[t * d..(t + 1) * d].iter().map(|c| *c as usize).collect()
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn set_code(&mut self, t: usize, d: usize, k: usize) -> Result<()> {
        if k >= self.codebook_size as usize {
            return Err(Error::Index {
                index: k,
                bound: self.codebook_size as usize,
            });
        }
        self.codes[t * self.depth as usize + d] = k as u32;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        io::write_u32(w, 1)?;
        for v in [self.height, self.width, self.depth, self.codebook_size] {
            io::write_u32(w, v)?;
        }
        w.write_all(&self.codebook_id)?;
        for c in &self.codes {
            io::write_u32(w, *c)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, MAGIC)?;
        io::expect_version(r, "RQCM")?;
        let height = io::read_u32(r)?;
        let width = io::read_u32(r)?;
        let depth = io::read_u32(r)?;
        let codebook_size = io::read_u32(r)?;
        let codebook_id: [u8; 32] = io::read_array(r)?;
        let n = checked_len(&[height, width, depth], MAX_CODES)?;
        let codes = (0..n).map(|_| io::read_u32(r)).collect::<Result<Vec<_>>>()?;
        Self::new(height, width, depth, codebook_size, codebook_id, codes)
            .map_err(|e| Error::Format(format!("invalid RQCM contents: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingMode {
    Deterministic,
    /// Codes drawn from `Q_τ`; position `t` uses the stream `(seed, t)`.
    Stochastic {
        tau: f64,
        seed: u64,
    },
}

/// Output of [`quantize_feature_map`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMap {
    pub codes: CodeStackMap,
    /// `Ẑ^(1) … Ẑ^(D)`.
    pub partial_sums: Vec<FeatureMap>,
    /// `R_0 … R_D`, where `R_0` is the input map.
    pub residuals: Vec<FeatureMap>,
}

impl QuantizedMap {
    /// `Ẑ = Ẑ^(D)`.
    pub fn quantized(&self) -> &FeatureMap {
        self.partial_sums.last().expect("depth >= 1")
    }

    pub fn depth(&self) -> usize {
        self.partial_sums.len()
    }
}

/// Position-wise residual quantization of a feature map.
pub fn quantize_feature_map<C: CodebookStack + ?Sized>(
    z: &FeatureMap,
    stack: &C,
    depth: usize,
    mode: SamplingMode,
    exec: Execution,
) -> Result<QuantizedMap> {
    if z.dim != stack.dim() {
        return Err(Error::Dimension {
            expected: stack.dim(),
            actual: z.dim,
        });
    }
    let results: Vec<RqResult> = exec.try_map_range(z.positions(), |t| match mode {
        SamplingMode::Deterministic => rq_encode(z.at(t), stack, depth),
        SamplingMode::Stochastic { tau, seed } => {
            let mut r = rng::stream(seed, &[t as u64]);
            rq_encode_stochastic(z.at(t), stack, depth, tau, &mut r)
        }
    })?;
    assemble(z, stack, depth, results)
}

fn assemble<C: CodebookStack + ?Sized>(
    z: &FeatureMap,
    stack: &C,
    depth: usize,
    results: Vec<RqResult>,
) -> Result<QuantizedMap> {
    let (h, w, n) = (z.height, z.width, z.dim);
    let mut codes = Vec::with_capacity(z.positions() * depth);
    let mut partial_sums = vec![FeatureMap::zeros(h, w, n); depth];
    let mut residuals = vec![FeatureMap::zeros(h, w, n); depth + 1];
    for (t, r) in results.iter().enumerate() {
        codes.extend(r.codes.iter().map(|c| *c as u32));
        for d in 0..depth {
            partial_sums[d].at_mut(t).copy_from_slice(&r.partial_sums[d]);
        }
        for d in 0..=depth {
            residuals[d].at_mut(t).copy_from_slice(&r.residuals[d]);
        }
    }
    let codes = CodeStackMap::new(
        h as u32,
        w as u32,
        depth as u32,
        stack.codes_per_depth() as u32,
        stack.stack_hash(),
        codes,
    )?;
    Ok(QuantizedMap {
        codes,
        partial_sums,
        residuals,
    })
}

/// `Σ_d ||Z − Ẑ^(d)||²` averaged over spatial positions.
pub fn commitment_loss(z: &FeatureMap, partial_sums: &[FeatureMap]) -> Result<f64> {
    if partial_sums.is_empty() {
        return Err(Error::Parameter("commitment loss needs D >= 1".into()));
    }
    let mut total = 0.0;
    for p in partial_sums {
        if p.data.len() != z.data.len() {
            return Err(Error::Shape(format!(
                "partial sum map has {} values, feature map {}",
                p.data.len(),
                z.data.len()
            )));
        }
        total += rq_autodiff::kernels::squared_distance(&z.data, &p.data);
    }
    Ok(total / z.positions() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;

    #[test]
    fn commitment_loss_hand_cases() {
        let cb = Codebook::from_embeddings(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.0]).unwrap();
        let z = FeatureMap::new(1, 1, 2, vec![1.5, 0.0]).unwrap();
        let q = quantize_feature_map(&z, &cb, 2, SamplingMode::Deterministic, Execution::Sequential).unwrap();
        assert_eq!(commitment_loss(&z, &q.partial_sums).unwrap(), 0.25);

        let z = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let q = quantize_feature_map(&z, &cb, 1, SamplingMode::Deterministic, Execution::Sequential).unwrap();
        assert_eq!(commitment_loss(&z, &q.partial_sums).unwrap(), 0.0);
    }

    #[test]
    fn code_map_rejects_out_of_range_codes() {
        assert!(matches!(
            CodeStackMap::new(1, 1, 2, 4, [0; 32], vec![1, 4]),
            Err(Error::Index { index: 4, bound: 4 })
        ));
    }

    #[test]
    fn code_map_layout_is_depth_minor() {
        let m = CodeStackMap::new(2, 2, 3, 16, [7; 32], (0..12).collect()).unwrap();
        assert_eq!(m.code(1, 0), 3);
        assert_eq!(m.stack(3), vec![9, 10, 11]);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"RQCM");
        assert_eq!(bytes.len(), 4 + 4 * 5 + 32 + 12 * 4);
        assert_eq!(CodeStackMap::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = CodeStackMap::new(1, 1, 1, 2, [0; 32], vec![1]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(CodeStackMap::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
