//! RGB images with `f64` pixels in `[0, 1]` and binary PPM (P6) I/O.

use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// `height × width × 3`, channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * 3;
        &self.data[i..i + 3]
    }

    /// 8-bit value `round(v·255)` after clamping to `[0, 1]`.
    fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| Self::quantize(*v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(r: &mut impl BufRead) -> Result<Self> {
        let magic = read_token(r)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6 PPM, found {magic:?}")));
        }
        let mut next_num = |what: &str| -> Result<usize> {
            let tok = read_token(r)?;
            tok.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM {what} {tok:?}")))
        };
        let width = next_num("width")?;
        let height = next_num("height")?;
        let maxval = next_num("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 26 {
            return Err(Error::Format(format!("bad PPM size {width}x{height}")));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated PPM raster: {e}")))?;
        let data = bytes.iter().map(|b| *b as f64 / 255.0).collect();
        Self::new(height, width, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_ppm(&mut std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).expect("writing to a Vec");
        buf
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes exactly one trailing whitespace byte.
fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PPM header".into()));
            }
            break;
        }
        let c = b[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
        if tok.len() > 32 {
            return Err(Error::Format("PPM header token too long".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PPM header".into()))
}

/// Mean squared error over all pixels and channels.
pub fn recon_loss(x: &Image, xhat: &Image) -> Result<f64> {
    if x.height != xhat.height || x.width != xhat.width {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            x.height, x.width, xhat.height, xhat.width
        )));
    }
    Ok(rq_autodiff::kernels::squared_distance(&x.data, &xhat.data) / x.data.len() as f64)
}
