//! On-disk formats: `DPP1` latent dumps, binary PGM/PPM, and small text
//! tables.

use std::io::{Read, Write};

use crate::error::{PdiError, Result};
use crate::latent::LatentGrid;
use crate::mask::{BinaryMask, SubjectMap};

pub const LATENT_MAGIC: &[u8; 4] = b"DPP1";

/// `DPP1`, then `H`, `W`, `C` as `u32` LE, then `H·W·C` `f32` LE values.
pub fn write_latent(out: &mut impl Write, z: &LatentGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * z.len());
    buf.extend_from_slice(LATENT_MAGIC);
    for dim in [z.height(), z.width(), z.channels()] {
        let dim = u32::try_from(dim).map_err(|_| PdiError::Format("dimension overflows u32".into()))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in z.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn latent_bytes(z: &LatentGrid) -> Vec<u8> {
    let mut buf = Vec::new();
    write_latent(&mut buf, z).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_latent(input: &mut impl Read) -> Result<LatentGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_latent(&bytes)
}

pub fn parse_latent(bytes: &[u8]) -> Result<LatentGrid> {
    if bytes.len() < 16 || &bytes[..4] != LATENT_MAGIC {
        return Err(PdiError::Format("missing DPP1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| PdiError::Format("dimensions overflow".into()))?;
    if bytes.len() != 16 + 4 * count {
        return Err(PdiError::Format(format!(
            "{h}x{w}x{c} latent needs {} bytes, file has {}",
            16 + 4 * count,
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    LatentGrid::new(h, w, c, data)
}

/// Grey levels by linear min–max scaling; a constant map is written as 0.
pub fn map_to_grey(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                libm::round((v - lo) / range * 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_pgm(out: &mut impl Write, width: usize, height: usize, grey: &[u8]) -> Result<()> {
    if grey.len() != width * height {
        return Err(PdiError::shape("PGM pixel count does not match its dimensions"));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(grey);
    out.write_all(&buf)?;
    Ok(())
}

pub fn map_pgm(map: &SubjectMap) -> Vec<u8> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, map.width(), map.height(), &map_to_grey(map.values())).expect("in-memory write");
    buf
}

/// Masks use exactly 0 and 255.
pub fn mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let grey: Vec<u8> = mask.values().iter().map(|&b| b * 255).collect();
    let mut buf = Vec::new();
    write_pgm(&mut buf, mask.width(), mask.height(), &grey).expect("in-memory write");
    buf
}

/// An 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(PdiError::shape("pixel count does not match image dimensions"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// First three channels clamped to `[0, 1]` and scaled to 0–255.
    pub fn from_latent(z: &LatentGrid) -> Self {
        let pixels = (0..z.height() * z.width())
            .map(|p| {
                let mut px = [0u8; 3];
                for (c, out) in px.iter_mut().enumerate().take(z.channels()) {
                    let v = z.data()[p * z.channels() + c].clamp(0.0, 1.0);
                    *out = libm::round(v * 255.0) as u8;
                }
                px
            })
            .collect();
        Self {
            width: z.width(),
            height: z.height(),
            pixels,
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            buf.extend_from_slice(px);
        }
        buf
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PdiError::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(PdiError::Format(format!("expected P6, got {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| PdiError::Format(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(PdiError::Format("only 8-bit PPM is supported".into()));
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != 3 * width * height {
            return Err(PdiError::Format(format!(
                "{width}x{height} PPM needs {} raster bytes, got {}",
                3 * width * height,
                raster.len()
            )));
        }
        let pixels = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(width, height, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_round_trip() {
        let z = LatentGrid::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let bytes = latent_bytes(&z);
        assert_eq!(&bytes[..4], b"DPP1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &(-1.0f32).to_le_bytes());
        assert!(parse_latent(&bytes).unwrap().bit_eq(&z));
    }

    #[test]
    fn latent_rejects_bad_input() {
        assert!(parse_latent(b"DPP2\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
        let mut bytes = latent_bytes(&LatentGrid::filled(1, 1, 1, 0.5));
        bytes.pop();
        assert!(matches!(parse_latent(&bytes), Err(PdiError::Format(_))));
    }

    #[test]
    fn grey_scaling() {
        assert_eq!(map_to_grey(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(map_to_grey(&[2.0, 2.0]), vec![0, 0]);
        let mask = BinaryMask::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(mask_pgm(&mask), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn ppm_round_trip() {
        let z = LatentGrid::new(1, 2, 3, vec![-0.5, 0.0, 0.5, 1.0, 2.0, 0.25]).unwrap();
        let img = RgbImage::from_latent(&z);
        assert_eq!(img.pixels, vec![[0, 0, 128], [255, 255, 64]]);
        let bytes = img.to_ppm();
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
        let commented = b"P6\n# note\n1 1\n255\n\x01\x02\x03";
        assert_eq!(RgbImage::from_ppm(commented).unwrap().pixels, vec![[1, 2, 3]]);
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
