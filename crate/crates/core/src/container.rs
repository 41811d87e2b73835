//! Container and model-file formats.
//!
//! Both formats use big-endian fixed-width fields throughout so a stream
//! written on one platform decodes bit-exactly on another. Byte layouts
//! are documented in `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"SPC1";
pub const CONTAINER_VERSION: u8 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"SPM1";
pub const MODEL_VERSION: u8 = 1;

/// Fixed header of a coded image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub width: u32,
    pub height: u32,
    pub num_classes: u8,
    pub channels: u16,
    /// Quantizer step, rounded to f32 for transport; the authoritative
    /// step lives in the model file.
    pub delta: f32,
    /// Bit `n` set iff class `n` occurs in the map (and is coded).
    pub presence: Vec<bool>,
}

impl ContainerHeader {
    pub fn present_count(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }

    fn byte_len(num_classes: usize) -> usize {
        4 + 1 + 4 + 4 + 1 + 2 + 4 + num_classes.div_ceil(8)
    }
}

/// A parsed container.
#[derive(Debug, Clone)]
pub struct Unpacked {
    pub header: ContainerHeader,
    pub map_segment: Vec<u8>,
    pub hyper_segment: Vec<u8>,
    pub prior_segment: Vec<u8>,
}

/// Serializes header and the three length-prefixed segments. Decode order
/// is map, then hyperprior, then prior (prior tables depend on the
/// decoded summary).
pub fn pack(
    header: &ContainerHeader,
    map_segment: &[u8],
    hyper_segment: &[u8],
    prior_segment: &[u8],
) -> Result<Vec<u8>> {
    if header.presence.len() != header.num_classes as usize {
        return Err(Error::ShapeMismatch {
            op: "pack",
            detail: format!(
                "{} presence flags for {} classes",
                header.presence.len(),
                header.num_classes
            ),
        });
    }
    if !(header.delta.is_finite() && header.delta > 0.0) {
        return Err(Error::InvalidStep(header.delta as f64));
    }
    let mut out = Vec::with_capacity(
        ContainerHeader::byte_len(header.num_classes as usize)
            + 12
            + map_segment.len()
            + hyper_segment.len()
            + prior_segment.len(),
    );
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(CONTAINER_VERSION);
    out.extend_from_slice(&header.width.to_be_bytes());
    out.extend_from_slice(&header.height.to_be_bytes());
    out.push(header.num_classes);
    out.extend_from_slice(&header.channels.to_be_bytes());
    out.extend_from_slice(&header.delta.to_be_bytes());
    let mut bitmap = vec![0u8; (header.num_classes as usize).div_ceil(8)];
    for (n, &p) in header.presence.iter().enumerate() {
        if p {
            bitmap[n / 8] |= 1 << (7 - n % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    for seg in [map_segment, hyper_segment, prior_segment] {
        out.extend_from_slice(&(seg.len() as u32).to_be_bytes());
        out.extend_from_slice(seg);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn segment(&mut self, what: &'static str) -> Result<Vec<u8>> {
        let len = self.u32(what)? as usize;
        Ok(self.take(len, what)?.to_vec())
    }
}

/// Parses a container, reproducing the packed segments byte-exactly.
pub fn unpack(bytes: &[u8]) -> Result<Unpacked> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CONTAINER_MAGIC {
        return Err(Error::BadMagic { expected: "SPC1" });
    }
    let version = c.u8("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::BadVersion(version));
    }
    let width = c.u32("width")?;
    let height = c.u32("height")?;
    let num_classes = c.u8("class count")?;
    let channels = c.u16("channel count")?;
    let delta = f32::from_be_bytes(c.take(4, "delta")?.try_into().unwrap());
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidStep(delta as f64));
    }
    if num_classes == 0 {
        return Err(Error::CorruptStream("zero classes".into()));
    }
    let bitmap = c.take(num_classes.div_ceil(8) as usize, "presence bitmap")?;
    let presence: Vec<bool> = (0..num_classes as usize)
        .map(|n| bitmap[n / 8] >> (7 - n % 8) & 1 == 1)
        .collect();
    let map_segment = c.segment("map segment")?;
    let hyper_segment = c.segment("hyperprior segment")?;
    let prior_segment = c.segment("prior segment")?;
    if c.pos != bytes.len() {
        return Err(Error::CorruptStream(format!(
            "{} trailing bytes after prior segment",
            bytes.len() - c.pos
        )));
    }
    Ok(Unpacked {
        header: ContainerHeader { width, height, num_classes, channels, delta, presence },
        map_segment,
        hyper_segment,
        prior_segment,
    })
}

// -- model files ----------------------------------------------------------------

/// Architecture and quantizer settings stored alongside parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub classes: usize,
    pub delta: f64,
    pub use_coords: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 64, classes: 19, delta: 0.01, use_coords: true }
    }
}

/// Writes config plus every parameter tensor (name, shape, f64 values, all
/// big-endian) followed by a CRC32 of the preceding bytes.
pub fn write_model<W: Write>(mut w: W, cfg: &ModelConfig, params: &ParamStore<f64>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(cfg.channels as u16).to_be_bytes());
    out.extend_from_slice(&(cfg.classes as u16).to_be_bytes());
    out.extend_from_slice(&cfg.delta.to_be_bytes());
    out.push(u8::from(cfg.use_coords));
    out.extend_from_slice(&(params.len() as u32).to_be_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_be_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    w.write_all(&out)?;
    Ok(())
}

/// Reads a model file, validating the checksum and every tensor shape
/// declaration against its data length.
pub fn read_model<R: Read>(mut r: R) -> Result<(ModelConfig, ParamStore<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 1 + 2 + 2 + 8 + 1 + 4 + 4 {
        return Err(Error::Truncated("model file"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4, "model magic")? != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: "SPM1" });
    }
    let version = c.u8("model version")?;
    if version != MODEL_VERSION {
        return Err(Error::BadVersion(version));
    }
    let channels = c.u16("channels")? as usize;
    let classes = c.u16("classes")? as usize;
    let delta = f64::from_be_bytes(c.take(8, "delta")?.try_into().unwrap());
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidStep(delta));
    }
    let use_coords = c.u8("flags")? & 1 == 1;
    let count = c.u32("tensor count")? as usize;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::CorruptStream("tensor name is not utf-8".into()))?
            .to_string();
        let rank = c.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("tensor dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "tensor values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_be_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::CorruptStream("trailing bytes in model file".into()));
    }

    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.insert(name, t);
    }
    Ok((ModelConfig { channels, classes, delta, use_coords }, store))
}

pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ParamStore<f64>) -> Result<()> {
    write_model(std::fs::File::create(path)?, cfg, params)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore<f64>)> {
    read_model(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn header() -> ContainerHeader {
        ContainerHeader {
            width: 256,
            height: 256,
            num_classes: 19,
            channels: 64,
            delta: 0.01,
            presence: (0..19).map(|n| n != 4).collect(),
        }
    }

    #[test]
    fn pack_unpack_identity() {
        let h = header();
        let packed = pack(&h, &[1, 2, 3], &[4, 5], &[6, 7, 8, 9]).unwrap();
        let u = unpack(&packed).unwrap();
        assert_eq!(u.header, h);
        assert_eq!(u.map_segment, vec![1, 2, 3]);
        assert_eq!(u.hyper_segment, vec![4, 5]);
        assert_eq!(u.prior_segment, vec![6, 7, 8, 9]);
    }

    #[test]
    fn truncation_names_the_segment() {
        let h = header();
        let packed = pack(&h, &[1, 2, 3], &[4, 5], &[6, 7, 8, 9]).unwrap();
        let cut = &packed[..packed.len() - 6];
        match unpack(cut) {
            Err(Error::Truncated(seg)) => assert_eq!(seg, "prior segment"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let h = header();
        let mut packed = pack(&h, &[], &[], &[]).unwrap();
        let mut wrong = packed.clone();
        wrong[0] = b'X';
        assert!(matches!(unpack(&wrong), Err(Error::BadMagic { .. })));
        packed[4] = 99;
        assert!(matches!(unpack(&packed), Err(Error::BadVersion(99))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let h = header();
        let mut packed = pack(&h, &[1], &[2], &[3]).unwrap();
        packed.push(0);
        assert!(matches!(unpack(&packed), Err(Error::CorruptStream(_))));
    }

    fn sample_store(seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        s.insert("b.bias", Tensor::randn(&[7], 0.3, &mut rng));
        s.insert("z", Tensor::randn(&[2, 2, 3, 3], 0.1, &mut rng));
        s
    }

    #[test]
    fn model_round_trip_is_bit_identical() {
        let cfg = ModelConfig { channels: 32, classes: 7, delta: 0.01, use_coords: false };
        let store = sample_store(3);
        let mut buf = Vec::new();
        write_model(&mut buf, &cfg, &store).unwrap();
        let (cfg2, store2) = read_model(&buf[..]).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.len(), store2.len());
        for (name, t) in store.iter() {
            let t2 = store2.get(name).unwrap();
            assert_eq!(t.shape(), t2.shape());
            for (a, b) in t.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Serialization itself is deterministic.
        let mut buf2 = Vec::new();
        write_model(&mut buf2, &cfg, &store).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let cfg = ModelConfig::default();
        let store = sample_store(4);
        let mut buf = Vec::new();
        write_model(&mut buf, &cfg, &store).unwrap();
        for &pos in &[6usize, buf.len() / 2, buf.len() - 9] {
            let mut bad = buf.clone();
            bad[pos] ^= 0x01;
            assert!(
                matches!(read_model(&bad[..]), Err(Error::ChecksumMismatch { .. })),
                "flip at {pos} was not detected"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pack_round_trips_random_segments(
            map in proptest::collection::vec(any::<u8>(), 0..200),
            hyper in proptest::collection::vec(any::<u8>(), 0..100),
            prior in proptest::collection::vec(any::<u8>(), 0..300),
            n in 1u8..40,
        ) {
            let h = ContainerHeader {
                width: 31,
                height: 17,
                num_classes: n,
                channels: 16,
                delta: 0.25,
                presence: (0..n as usize).map(|i| i % 3 != 1).collect(),
            };
            let packed = pack(&h, &map, &hyper, &prior).unwrap();
            let u = unpack(&packed).unwrap();
            prop_assert_eq!(u.header, h);
            prop_assert_eq!(u.map_segment, map);
            prop_assert_eq!(u.hyper_segment, hyper);
            prop_assert_eq!(u.prior_segment, prior);
        }
    }
}
