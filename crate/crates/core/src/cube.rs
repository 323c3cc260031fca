//! Spectral image cubes.

use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const CUBE_MAGIC: &[u8; 8] = b"OXYCUBE\0";
pub const CUBE_VERSION: u32 = 1;
const CUBE_HEADER_BYTES: usize = 24;

/// `height × width × bands` image stored pixel-interleaved: the spectrum of
/// pixel `(y, x)` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Hypercube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::shape("cube dimensions must be positive"));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{bands} cube",
                data.len()
            )));
        }
        Ok(Self { height, width, bands, data })
    }

    pub fn filled(height: usize, width: usize, spectrum: &[f32]) -> Result<Self> {
        let data = spectrum.iter().copied().cycle().take(height * width * spectrum.len()).collect();
        Self::new(height, width, spectrum.len(), data)
    }

    /// Builds a cube by evaluating `f(y, x)` for every pixel.
    pub fn from_fn(height: usize, width: usize, bands: usize, mut f: impl FnMut(usize, usize) -> Vec<f32>) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * bands);
        for y in 0..height {
            for x in 0..width {
                let s = f(y, x);
                if s.len() != bands {
                    return Err(Error::shape(format!("pixel ({y}, {x}) has {} bands, expected {bands}", s.len())));
                }
                data.extend(s);
            }
        }
        Self::new(height, width, bands, data)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.bands;
        &self.data[i..i + self.bands]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.bands;
        &mut self.data[i..i + self.bands]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_BYTES + self.data.len() * 4 + 4);
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        for d in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CUBE_HEADER_BYTES + 4 {
            return Err(FormatError::Length { found: bytes.len(), expected: CUBE_HEADER_BYTES + 4 }.into());
        }
        if &bytes[..8] != CUBE_MAGIC {
            return Err(FormatError::BadMagic { expected: "OXYCUBE" }.into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(8) != CUBE_VERSION {
            return Err(FormatError::Version { found: u32_at(8), expected: CUBE_VERSION }.into());
        }
        let (h, w, b) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        let expected = CUBE_HEADER_BYTES + h * w * b * 4 + 4;
        if bytes.len() != expected {
            return Err(FormatError::Length { found: bytes.len(), expected }.into());
        }
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..expected - 4]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed }.into());
        }
        let data = bytes[CUBE_HEADER_BYTES..expected - 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, b, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-pixel oxygenation estimates in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OxygenationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// Pixels whose spectrum could not be evaluated; their value is 0.5.
    pub degenerate: Vec<bool>,
}

impl OxygenationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        let degenerate = vec![false; values.len()];
        Ok(Self { height, width, values, degenerate })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}
