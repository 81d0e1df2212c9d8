//! Patch transforms standing in for the encoder and decoder.
//!
//! Each non-overlapping `f × f × 3` patch is flattened as
//! `(py·f + px)·3 + c` and mapped linearly to `n_z` coefficients. The
//! orthonormal mode uses a separable 2-D DCT-II basis per channel with rows
//! ordered by zigzag frequency (channel minor); the trainable mode starts
//! from that basis (or a random matrix) and learns both maps.

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::image::Image;
use crate::io;
use crate::par::Execution;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rq_autodiff::kernels;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"RQPC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    Orthonormal,
    TrainableLinear,
}

impl CodecMode {
    fn tag(self) -> u8 {
        match self {
            CodecMode::Orthonormal => 0,
            CodecMode::TrainableLinear => 1,
        }
    }
}

/// Starting point for a trainable codec.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecInit {
    /// Truncated orthonormal basis.
    Orthonormal,
    /// Independent normal entries with the given standard deviation.
    Random { std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    pub factor: usize,
    pub n_z: usize,
    pub mode: CodecMode,
}

impl CodecConfig {
    pub fn patch_len(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.n_z == 0 {
            return Err(Error::Parameter("codec needs f >= 1 and n_z >= 1".into()));
        }
        if self.n_z > self.patch_len() {
            return Err(Error::Parameter(format!(
                "n_z={} exceeds 3·f² = {}",
                self.n_z,
                self.patch_len()
            )));
        }
        Ok(())
    }
}

/// Zigzag scan of an `f × f` frequency grid as `(row, col)` pairs.
pub fn zigzag_order(f: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(f * f);
    for s in 0..(2 * f).saturating_sub(1) {
        let lo = s.saturating_sub(f - 1);
        let hi = s.min(f - 1);
        if s % 2 == 1 {
            out.extend((lo..=hi).map(|r| (r, s - r)));
        } else {
            out.extend((lo..=hi).rev().map(|r| (r, s - r)));
        }
    }
    out
}

/// `P × P` orthonormal basis (`P = 3f²`), one basis vector per row.
pub fn orthonormal_basis(f: usize) -> Vec<f64> {
    let p = 3 * f * f;
    let alpha = |u: usize| {
        if u == 0 {
            (1.0 / f as f64).sqrt()
        } else {
            (2.0 / f as f64).sqrt()
        }
    };
    let cosine = |u: usize, x: usize| (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * f) as f64).cos();
    let mut basis = vec![0.0; p * p];
    for (z, (u, v)) in zigzag_order(f).into_iter().enumerate() {
        for c in 0..3 {
            let row = &mut basis[(z * 3 + c) * p..(z * 3 + c + 1) * p];
            for py in 0..f {
                for px in 0..f {
                    row[(py * f + px) * 3 + c] = alpha(u) * alpha(v) * cosine(u, py) * cosine(v, px);
                }
            }
        }
    }
    basis
}

/// Linear patch encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodec {
    config: CodecConfig,
    /// `P × n_z`.
    encoder: Vec<f64>,
    /// `n_z × P`.
    decoder: Vec<f64>,
}

impl PatchCodec {
    pub fn orthonormal(factor: usize, n_z: usize) -> Result<Self> {
        Self::from_basis(CodecConfig {
            factor,
            n_z,
            mode: CodecMode::Orthonormal,
        })
    }

    fn from_basis(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let p = config.patch_len();
        let basis = orthonormal_basis(config.factor);
        let decoder = basis[..config.n_z * p].to_vec();
        let mut encoder = vec![0.0; p * config.n_z];
        for j in 0..config.n_z {
            for i in 0..p {
                encoder[i * config.n_z + j] = decoder[j * p + i];
            }
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn trainable(factor: usize, n_z: usize, init: CodecInit, rng: &mut impl Rng) -> Result<Self> {
        let config = CodecConfig {
            factor,
            n_z,
            mode: CodecMode::TrainableLinear,
        };
        match init {
            CodecInit::Orthonormal => Self::from_basis(config),
            CodecInit::Random { std } => {
                config.validate()?;
                let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(format!("bad init std {std}: {e}")))?;
                let n = config.patch_len() * n_z;
                let encoder = (0..n).map(|_| normal.sample(rng)).collect();
                let decoder = (0..n).map(|_| normal.sample(rng)).collect();
                Ok(Self {
                    config,
                    encoder,
                    decoder,
                })
            }
        }
    }

    pub fn from_matrices(config: CodecConfig, encoder: Vec<f64>, decoder: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let n = config.patch_len() * config.n_z;
        if encoder.len() != n || decoder.len() != n {
            return Err(Error::Shape(format!(
                "codec matrices need {n} values each, got {} and {}",
                encoder.len(),
                decoder.len()
            )));
        }
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn factor(&self) -> usize {
        self.config.factor
    }

    pub fn n_z(&self) -> usize {
        self.config.n_z
    }

    pub fn encoder(&self) -> &[f64] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[f64] {
        &self.decoder
    }

    pub fn set_matrices(&mut self, encoder: Vec<f64>, decoder: Vec<f64>) {
        assert_eq!(encoder.len(), self.encoder.len());
        assert_eq!(decoder.len(), self.decoder.len());
        self.encoder = encoder;
        self.decoder = decoder;
    }

    /// Feature-map geometry `(H, W)` for an image.
    pub fn grid(&self, image: &Image) -> Result<(usize, usize)> {
        let f = self.config.factor;
        if !image.height.is_multiple_of(f) || !image.width.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by downsampling factor {f}",
                image.height, image.width
            )));
        }
        Ok((image.height / f, image.width / f))
    }

    /// Flattened patches as a `(H·W) × P` row-major matrix in raster order.
    pub fn patches(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w) = self.grid(image)?;
        let f = self.config.factor;
        let p = self.config.patch_len();
        let mut out = vec![0.0; h * w * p];
        for gy in 0..h {
            for gx in 0..w {
                let row = &mut out[(gy * w + gx) * p..(gy * w + gx + 1) * p];
                for py in 0..f {
                    for px in 0..f {
                        let pix = image.pixel(gy * f + py, gx * f + px);
                        row[(py * f + px) * 3..(py * f + px) * 3 + 3].copy_from_slice(pix);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`PatchCodec::patches`].
    pub fn unpatch(&self, rows: &[f64], h: usize, w: usize) -> Result<Image> {
        let f = self.config.factor;
        let p = self.config.patch_len();
        if rows.len() != h * w * p {
            return Err(Error::Shape(format!(
                "{} patch values for a {h}x{w} grid of {p}",
                rows.len()
            )));
        }
        let (height, width) = (h * f, w * f);
        let mut data = vec![0.0; height * width * 3];
        for gy in 0..h {
            for gx in 0..w {
                let row = &rows[(gy * w + gx) * p..(gy * w + gx + 1) * p];
                for py in 0..f {
                    for px in 0..f {
                        let dst = ((gy * f + py) * width + gx * f + px) * 3;
                        data[dst..dst + 3].copy_from_slice(&row[(py * f + px) * 3..][..3]);
                    }
                }
            }
        }
        Image::new(height, width, data)
    }

    /// `Z = E(X)`.
    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w) = self.grid(image)?;
        let patches = self.patches(image)?;
        let (p, n) = (self.config.patch_len(), self.config.n_z);
        let z = kernels::matmul(&patches, &self.encoder, h * w, p, n);
        FeatureMap::new(h, w, n, z)
    }

    /// Decoder output before clamping, as patch rows.
    pub fn decode_patches(&self, z: &FeatureMap) -> Result<Vec<f64>> {
        if z.dim != self.config.n_z {
            return Err(Error::Dimension {
                expected: self.config.n_z,
                actual: z.dim,
            });
        }
        let p = self.config.patch_len();
        Ok(kernels::matmul(&z.data, &self.decoder, z.positions(), z.dim, p))
    }

    /// `X̂ = G(Ẑ)` with pixels clamped to `[0, 1]`.
    pub fn decode(&self, z: &FeatureMap) -> Result<Image> {
        let mut rows = self.decode_patches(z)?;
        rows.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self.unpatch(&rows, z.height, z.width)
    }

    pub fn encode_batch(&self, images: &[Image], exec: Execution) -> Result<Vec<FeatureMap>> {
        exec.try_map_range(images.len(), |i| self.encode(&images[i]))
    }

    /// Writes the `RQPC` format: header, then encoder and decoder as `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        io::write_u32(w, 1)?;
        io::write_u32(w, self.config.factor as u32)?;
        io::write_u32(w, self.config.n_z as u32)?;
        w.write_all(&[self.config.mode.tag()])?;
        for v in self.encoder.iter().chain(&self.decoder) {
            io::write_f64(w, *v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, MAGIC)?;
        io::expect_version(r, "RQPC")?;
        let factor = io::read_u32(r)? as usize;
        let n_z = io::read_u32(r)? as usize;
        let mode = match io::read_u8(r)? {
            0 => CodecMode::Orthonormal,
            1 => CodecMode::TrainableLinear,
            m => return Err(Error::Format(format!("unknown RQPC mode {m}"))),
        };
        if factor == 0 || factor > 64 || n_z == 0 || n_z > 3 * factor * factor {
            return Err(Error::Format(format!("bad RQPC geometry f={factor}, n_z={n_z}")));
        }
        let config = CodecConfig { factor, n_z, mode };
        let n = config.patch_len() * n_z;
        let encoder = (0..n).map(|_| io::read_f64(r)).collect::<Result<Vec<_>>>()?;
        let decoder = (0..n).map(|_| io::read_f64(r)).collect::<Result<Vec<_>>>()?;
        Self::from_matrices(config, encoder, decoder)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_matches_jpeg_prefix() {
        let z = zigzag_order(4);
        assert_eq!(&z[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z.len(), 16);
        assert_eq!(z[15], (3, 3));
    }

    #[test]
    fn basis_gram_is_identity() {
        for f in [1, 2, 4] {
            let p = 3 * f * f;
            let b = orthonormal_basis(f);
            for i in 0..p {
                for j in 0..p {
                    let g = kernels::dot(&b[i * p..(i + 1) * p], &b[j * p..(j + 1) * p]);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < 1e-12, "f={f} ({i},{j}) = {g}");
                }
            }
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let codec = PatchCodec::orthonormal(1, 3).unwrap();
        let img = Image::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.data, img.data);
    }

    #[test]
    fn constant_image_has_only_dc() {
        let codec = PatchCodec::orthonormal(4, 48).unwrap();
        let z = codec.encode(&Image::filled(8, 8, 0.5)).unwrap();
        for t in 0..z.positions() {
            let v = z.at(t);
            assert!((v[0] - 2.0).abs() < 1e-12);
            assert!(v[3..].iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let codec = PatchCodec::orthonormal(4, 8).unwrap();
        assert!(matches!(codec.encode(&Image::filled(6, 8, 0.0)), Err(Error::Shape(_))));
        assert!(PatchCodec::orthonormal(2, 13).is_err());
    }

    #[test]
    fn zero_features_decode_to_black() {
        let codec = PatchCodec::orthonormal(2, 5).unwrap();
        let img = codec.decode(&FeatureMap::zeros(2, 3, 5)).unwrap();
        assert_eq!((img.height, img.width), (4, 6));
        assert!(img.data.iter().all(|v| *v == 0.0));
    }
}
