//! Single-channel rasters plus binary PGM (P5) / PPM (P6) I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded masks at or above this value count as foreground.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// A raster with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for a {height}x{width} mask",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Image(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        let pixels = mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { height: mask.height, width: mask.width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn binarize(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.pixels.iter().map(|&p| p >= BINARIZE_THRESHOLD).collect(),
        }
    }

    /// Writes the binarized mask as P5 with values 0 / 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.binarize().write_pgm(path)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (w, h, channels, bytes) = read_pnm(path)?;
        if channels != 1 {
            return Err(Error::Image(format!("{}: expected P5", path.display())));
        }
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h, w, pixels)
    }
}

/// A thresholded mask used by the metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_pnm(path, self.width, self.height, 1, &bytes)
    }
}

/// Writes a binary PNM (`P5` for one channel, `P6` for three), maxval 255.
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Image(format!("unsupported channel count {c}"))),
    };
    if bytes.len() != width * height * channels {
        return Err(Error::Dimension(format!("pnm payload {} bytes for {width}x{height}x{channels}", bytes.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "{magic}\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Reads a binary PNM. Returns `(width, height, channels, bytes)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let bad = |why: &str| Error::Image(format!("{}: {why}", path.display()));

    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_owned));
    }
    if fields.len() != 4 {
        return Err(bad("malformed header"));
    }
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let mut bytes = vec![0u8; w * h * channels];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
    Ok((w, h, channels, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(MaskImage::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(MaskImage::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn binarize_uses_midpoint() {
        let m = MaskImage::new(1, 3, vec![0.49, 0.5, 0.9]).unwrap();
        assert_eq!(m.binarize().bits, vec![false, true, true]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = MaskImage::new(2, 3, vec![0.0, 1.0, 0.7, 0.2, 1.0, 0.0]).unwrap();
        m.write_pgm(&path).unwrap();
        let back = MaskImage::read_pgm(&path).unwrap();
        assert_eq!(back.binarize(), m.binarize());
        assert!(back.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
        let raw = std::fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n3 2\n255\n"));
    }
}
