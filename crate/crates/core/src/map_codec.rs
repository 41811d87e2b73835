//! Lossless semantic-map coding.
//!
//! Raster-scan adaptive arithmetic coding with the (left, above) label
//! pair as context. Out-of-frame neighbors read as label 0. Each context
//! keeps per-symbol counts initialized to 1 (so every label stays
//! codable); the winning count grows by a fixed increment and totals are
//! halved when they near the coder's precision limit. A raw fallback mode
//! bounds the coded size on incompressible maps. The segment is
//! self-delimiting and checksummed.

use crate::error::{Error, Result};
use crate::image::SemanticMap;
use crate::range_coder::{RangeDecoder, RangeEncoder};

const MODE_CONTEXT: u8 = 0;
const MODE_RAW: u8 = 1;

/// Count added to a symbol on each occurrence. Larger than 1 so freshly
/// seen contexts adapt within a few pixels.
const INCREMENT: u32 = 32;

/// Totals are halved (keeping every count >= 1) beyond this bound, which
/// also keeps totals within the coder's 16-bit precision.
const RESCALE_LIMIT: u32 = 1 << 15;

struct ContextModel {
    num_classes: usize,
    /// Lazily allocated per-context counts; context id = left * N + above.
    counts: Vec<Option<Box<[u32]>>>,
    totals: Vec<u32>,
}

impl ContextModel {
    fn new(num_classes: usize) -> Self {
        ContextModel {
            num_classes,
            counts: (0..num_classes * num_classes).map(|_| None).collect(),
            totals: vec![0; num_classes * num_classes],
        }
    }

    fn ensure(&mut self, ctx: usize) -> (&mut [u32], &mut u32) {
        if self.counts[ctx].is_none() {
            self.counts[ctx] = Some(vec![1u32; self.num_classes].into_boxed_slice());
            self.totals[ctx] = self.num_classes as u32;
        }
        (self.counts[ctx].as_mut().unwrap(), &mut self.totals[ctx])
    }

    /// Cumulative start and count of `symbol` in context `ctx`.
    fn interval(&mut self, ctx: usize, symbol: u8) -> (u32, u32, u32) {
        let (counts, total) = self.ensure(ctx);
        let mut start = 0;
        for &c in counts.iter().take(symbol as usize) {
            start += c;
        }
        (start, counts[symbol as usize], *total)
    }

    fn locate(&mut self, ctx: usize, threshold: u32) -> (u8, u32, u32, u32) {
        let (counts, total) = self.ensure(ctx);
        let mut start = 0;
        for (sym, &c) in counts.iter().enumerate() {
            if threshold < start + c {
                return (sym as u8, start, c, *total);
            }
            start += c;
        }
        let last = counts.len() - 1;
        (last as u8, start - counts[last], counts[last], *total)
    }

    fn update(&mut self, ctx: usize, symbol: u8) {
        let (counts, total) = self.ensure(ctx);
        counts[symbol as usize] += INCREMENT;
        *total += INCREMENT;
        if *total >= RESCALE_LIMIT {
            let mut t = 0;
            for c in counts.iter_mut() {
                *c = (*c + 1) >> 1;
                t += *c;
            }
            *total = t;
        }
    }
}

#[inline]
fn context_of(map: &SemanticMap, y: usize, x: usize) -> usize {
    let left = if x > 0 { map.label(y, x - 1) } else { 0 } as usize;
    let above = if y > 0 { map.label(y - 1, x) } else { 0 } as usize;
    left * map.num_classes() + above
}

/// Encodes a map into a self-delimiting checksummed segment.
///
/// Layout: `mode u8 | W u32be | H u32be | N u8 | payload | crc32be` where
/// the checksum covers everything before it. Context mode falls back to
/// raw labels whenever that is smaller, so the segment never exceeds the
/// raw size plus header and slack.
pub fn encode_map(map: &SemanticMap) -> Vec<u8> {
    let n = map.num_classes();
    let mut model = ContextModel::new(n);
    let mut enc = RangeEncoder::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let ctx = context_of(map, y, x);
            let sym = map.label(y, x);
            let (start, size, total) = model.interval(ctx, sym);
            enc.encode(start, size, total);
            model.update(ctx, sym);
        }
    }
    let coded = enc.finish();

    let (mode, payload) = if coded.len() < map.labels().len() {
        (MODE_CONTEXT, coded)
    } else {
        (MODE_RAW, map.labels().to_vec())
    };

    let mut out = Vec::with_capacity(payload.len() + 14);
    out.push(mode);
    out.extend_from_slice(&(map.width as u32).to_be_bytes());
    out.extend_from_slice(&(map.height as u32).to_be_bytes());
    out.push(n as u8);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

/// Exact inverse of [`encode_map`]. Corrupt segments (bad checksum, bad
/// header, short payload) fail with a structured error.
pub fn decode_map(bytes: &[u8]) -> Result<SemanticMap> {
    if bytes.len() < 14 {
        return Err(Error::Truncated("map segment header"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mode = body[0];
    let width = u32::from_be_bytes(body[1..5].try_into().unwrap()) as usize;
    let height = u32::from_be_bytes(body[5..9].try_into().unwrap()) as usize;
    let n = body[9] as usize;
    if width == 0 || height == 0 || n == 0 {
        return Err(Error::CorruptStream("empty map dimensions".into()));
    }
    let payload = &body[10..];

    match mode {
        MODE_RAW => {
            if payload.len() < width * height {
                return Err(Error::Truncated("raw map payload"));
            }
            SemanticMap::new(width, height, payload[..width * height].to_vec(), n)
        }
        MODE_CONTEXT => {
            let mut model = ContextModel::new(n);
            let mut dec = RangeDecoder::new(payload);
            let mut labels = vec![0u8; width * height];
            for y in 0..height {
                for x in 0..width {
                    let left = if x > 0 { labels[y * width + x - 1] } else { 0 } as usize;
                    let above = if y > 0 { labels[(y - 1) * width + x] } else { 0 } as usize;
                    let ctx = left * n + above;
                    let total = {
                        let (_, t) = model.ensure(ctx);
                        *t
                    };
                    let th = dec.begin(total);
                    let (sym, start, size, _) = model.locate(ctx, th);
                    dec.consume(start, size);
                    model.update(ctx, sym);
                    labels[y * width + x] = sym;
                }
            }
            SemanticMap::new(width, height, labels, n)
        }
        other => Err(Error::CorruptStream(format!("unknown map mode {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_trip(map: &SemanticMap) -> usize {
        let bytes = encode_map(map);
        let back = decode_map(&bytes).unwrap();
        assert_eq!(&back, map);
        bytes.len()
    }

    #[test]
    fn constant_map_is_tiny() {
        let map = SemanticMap::new(256, 256, vec![7u8; 256 * 256], 19).unwrap();
        let len = round_trip(&map);
        assert!(len <= 64, "constant map took {len} bytes");
    }

    #[test]
    fn random_map_is_near_incompressible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 19u8;
        let labels: Vec<u8> = (0..256 * 256).map(|_| rng.random_range(0..n)).collect();
        let map = SemanticMap::new(256, 256, labels, n as usize).unwrap();
        let len = round_trip(&map);
        let bound = (256.0 * 256.0 * (n as f64).log2() / 8.0) * 0.99;
        assert!(len as f64 >= bound, "{len} below entropy bound {bound}");
    }

    #[test]
    fn four_quadrant_map_is_cheap() {
        let mut labels = vec![0u8; 256 * 256];
        for y in 0..256 {
            for x in 0..256 {
                labels[y * 256 + x] = match (y < 128, x < 128) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
            }
        }
        let map = SemanticMap::new(256, 256, labels, 19).unwrap();
        let len = round_trip(&map);
        let bpp = len as f64 * 8.0 / (256.0 * 256.0);
        assert!(bpp <= 0.03, "four-quadrant map cost {bpp} bpp");
    }

    #[test]
    fn coded_size_is_bounded_by_raw() {
        // Worst-case inputs must fall back to raw mode.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 255u16;
        let labels: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(0..n) as u8).collect();
        let map = SemanticMap::new(64, 64, labels, n as usize).unwrap();
        let len = round_trip(&map);
        assert!(len <= 64 * 64 + 14 + 16, "coded {len} exceeds raw bound");
    }

    #[test]
    fn corrupt_segment_is_detected() {
        let map = SemanticMap::new(16, 16, vec![3u8; 256], 5).unwrap();
        let mut bytes = encode_map(&map);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_map(&bytes), Err(Error::ChecksumMismatch { .. })));

        let short = &bytes[..4];
        assert!(decode_map(short).is_err());
    }

    #[test]
    fn out_of_frame_neighbors_are_class_zero() {
        // A map whose first row/column depend on the boundary rule: if the
        // rule changed, decode would diverge from encode.
        let mut labels = vec![0u8; 8 * 8];
        for (i, l) in labels.iter_mut().enumerate() {
            *l = ((i / 3) % 4) as u8;
        }
        let map = SemanticMap::new(8, 8, labels, 4).unwrap();
        round_trip(&map);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn round_trip_random_maps(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = rng.random_range(1..40usize);
            let h = rng.random_range(1..40usize);
            let n = rng.random_range(1..32usize);
            // Mix of random and structured content.
            let structured = rng.random::<bool>();
            let labels: Vec<u8> = (0..w * h)
                .map(|i| {
                    if structured {
                        (((i / w) / 3 + (i % w) / 5) % n) as u8
                    } else {
                        rng.random_range(0..n) as u8
                    }
                })
                .collect();
            let map = SemanticMap::new(w, h, labels, n).unwrap();
            let bytes = encode_map(&map);
            prop_assert_eq!(decode_map(&bytes).unwrap(), map);
        }
    }
}
