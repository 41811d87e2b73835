//! Images, semantic label maps, and binary PPM/PGM file formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with channel-first storage `(3, H, W)` and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Tensor<f64>,
}

impl Image {
    /// Wraps a `(3, H, W)` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor(t: Tensor<f64>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::ShapeMismatch {
                op: "image",
                detail: format!("expected (3,H,W), got {:?}", s),
            });
        }
        let (height, width) = (s[1], s[2]);
        let data = t.map(|v| v.clamp(0.0, 1.0));
        Ok(Image { width, height, data })
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height + y) * self.width + x]
    }

    /// Mean squared error against another image of the same size.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                op: "mse",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            });
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push(to_byte(self.pixel(c, y, x)));
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (magic, rest) = split_token(&bytes)?;
        if magic != b"P6" {
            return Err(Error::ImageFormat("not a binary PPM (P6)".into()));
        }
        let (width, rest) = parse_usize(rest)?;
        let (height, rest) = parse_usize(rest)?;
        let (maxval, rest) = parse_usize(rest)?;
        if maxval != 255 {
            return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
        }
        let rest = skip_single_whitespace(rest)?;
        let need = width * height * 3;
        if rest.len() < need {
            return Err(Error::Truncated("ppm pixel data"));
        }
        let mut data = vec![0.0f64; need];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = rest[(y * width + x) * 3 + c] as f64 / 255.0;
                    data[(c * height + y) * width + x] = v;
                }
            }
        }
        Ok(Image { width, height, data: Tensor::new(vec![3, height, width], data)? })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        self.write_ppm(std::fs::File::create(path)?)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

#[inline]
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Integer label field: the lossless structure layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    pub width: usize,
    pub height: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMap("zero-sized map".into()));
        }
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::InvalidMap(format!("class count {num_classes} out of [1, 255]")));
        }
        if labels.len() != width * height {
            return Err(Error::InvalidMap(format!(
                "{} labels for {}x{} map",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidMap(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(SemanticMap { width, height, labels, num_classes })
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Per-class pixel counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.labels)?;
        Ok(())
    }

    /// Reads a P5 map; `num_classes` fixes the class universe, which may
    /// exceed the labels actually present.
    pub fn read_pgm<R: Read>(mut r: R, num_classes: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let (magic, rest) = split_token(&bytes)?;
        if magic != b"P5" {
            return Err(Error::ImageFormat("not a binary PGM (P5)".into()));
        }
        let (width, rest) = parse_usize(rest)?;
        let (height, rest) = parse_usize(rest)?;
        let (maxval, rest) = parse_usize(rest)?;
        if maxval != 255 {
            return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
        }
        let rest = skip_single_whitespace(rest)?;
        let need = width * height;
        if rest.len() < need {
            return Err(Error::Truncated("pgm pixel data"));
        }
        SemanticMap::new(width, height, rest[..need].to_vec(), num_classes)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        self.write_pgm(std::fs::File::create(path)?)
    }

    pub fn load_pgm(path: &Path, num_classes: usize) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?, num_classes)
    }
}

/// Pixel membership lists per class, shared by pooling and broadcasting.
#[derive(Debug)]
pub struct RegionIndex {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// For each class, the flat pixel indices (`y*width + x`) it covers.
    pub pixels: Vec<Vec<u32>>,
}

impl RegionIndex {
    pub fn new(map: &SemanticMap) -> Self {
        let mut pixels = vec![Vec::new(); map.num_classes()];
        for (i, &l) in map.labels().iter().enumerate() {
            pixels[l as usize].push(i as u32);
        }
        RegionIndex {
            width: map.width,
            height: map.height,
            num_classes: map.num_classes(),
            pixels,
        }
    }

    pub fn presence(&self) -> Vec<bool> {
        self.pixels.iter().map(|p| !p.is_empty()).collect()
    }

    /// Class ids that have at least one pixel, in ascending order.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| !self.pixels[c].is_empty()).collect()
    }
}

// -- PNM header parsing ------------------------------------------------------

fn skip_ws_and_comments(mut b: &[u8]) -> &[u8] {
    loop {
        while let Some(&c) = b.first() {
            if c.is_ascii_whitespace() {
                b = &b[1..];
            } else {
                break;
            }
        }
        if b.first() == Some(&b'#') {
            while let Some(&c) = b.first() {
                b = &b[1..];
                if c == b'\n' {
                    break;
                }
            }
        } else {
            return b;
        }
    }
}

fn split_token(b: &[u8]) -> Result<(&[u8], &[u8])> {
    let b = skip_ws_and_comments(b);
    let end = b
        .iter()
        .position(|c| c.is_ascii_whitespace())
        .unwrap_or(b.len());
    if end == 0 {
        return Err(Error::ImageFormat("missing header token".into()));
    }
    Ok((&b[..end], &b[end..]))
}

fn parse_usize(b: &[u8]) -> Result<(usize, &[u8])> {
    let (tok, rest) = split_token(b)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::ImageFormat("bad header".into()))?;
    let v = s
        .parse::<usize>()
        .map_err(|_| Error::ImageFormat(format!("bad header number `{s}`")))?;
    Ok((v, rest))
}

fn skip_single_whitespace(b: &[u8]) -> Result<&[u8]> {
    if b.first().map(|c| c.is_ascii_whitespace()) == Some(true) {
        Ok(&b[1..])
    } else {
        Err(Error::ImageFormat("missing whitespace before pixel data".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let t = Tensor::new(
            vec![3, 2, 2],
            vec![0.0, 0.25, 0.5, 1.0, 0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6],
        )
        .unwrap();
        let img = Image::from_tensor(t).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&buf[..]).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.height, 2);
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn image_clamps_on_construction() {
        let t = Tensor::new(vec![3, 1, 1], vec![-0.5, 0.5, 1.5]).unwrap();
        let img = Image::from_tensor(t).unwrap();
        assert_eq!(img.tensor().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn pgm_round_trip_and_validation() {
        let map = SemanticMap::new(3, 2, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let mut buf = Vec::new();
        map.write_pgm(&mut buf).unwrap();
        let back = SemanticMap::read_pgm(&buf[..], 3).unwrap();
        assert_eq!(map, back);

        assert!(SemanticMap::new(2, 2, vec![0, 0, 0, 5], 3).is_err());
        assert!(SemanticMap::new(0, 2, vec![], 3).is_err());
    }

    #[test]
    fn pnm_comments_are_skipped() {
        let data = b"P5\n# a comment\n2 1\n255\n\x00\x01";
        let map = SemanticMap::read_pgm(&data[..], 2).unwrap();
        assert_eq!(map.labels(), &[0, 1]);
    }

    #[test]
    fn region_index_presence() {
        let map = SemanticMap::new(2, 2, vec![0, 0, 2, 2], 4).unwrap();
        let idx = RegionIndex::new(&map);
        assert_eq!(idx.presence(), vec![true, false, true, false]);
        assert_eq!(idx.present_classes(), vec![0, 2]);
        assert_eq!(idx.pixels[0], vec![0, 1]);
        assert_eq!(idx.pixels[2], vec![2, 3]);
    }
}
