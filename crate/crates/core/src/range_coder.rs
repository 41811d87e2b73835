//! Integer range coder and fixed-point CDF tables.
//!
//! The coder is a 64-bit-low/32-bit-range machine with byte-wise
//! renormalization and carry handling through a cache/0xFF-run pipeline.
//! Termination is minimal: the final interval is narrowed to the widest
//! byte-aligned dyadic cell it contains, and only the bytes above that
//! cell are emitted, so any zero-extension (the decoder reads 0x00 past
//! the end) lands inside the final interval. This keeps the coded length
//! within a few bytes of the table cross-entropy on both sides.
//!
//! Probabilities are 16-bit fixed point (total 65536). Tables may carry an
//! escape slot; symbols outside the alphabet cost the escape plus a raw
//! 32-bit payload. The coder itself cannot detect corrupt payloads (any
//! byte stream decodes to some symbol sequence); callers wrap payloads in
//! checksummed segments.

use crate::entropy::{gaussian_symbol_prob, PROB_FLOOR, SIGMA_MIN_RATIO};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Fixed-point probability total: 16-bit precision.
pub const TOTAL: u32 = 1 << 16;

/// Number of entries in the frozen Gaussian scale grid.
pub const SIGMA_GRID: usize = 64;

/// Largest Gaussian scale representable in the grid, as a multiple of the
/// quantizer step.
pub const SIGMA_MAX_RATIO: f64 = 256.0;

// -- tables -------------------------------------------------------------------

/// Cumulative counts over an integer alphabet `[q_min, q_max]`, optionally
/// followed by one escape slot. Counts are all >= 1 and sum to exactly
/// 65536, so the cumulative is strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    q_min: i32,
    q_max: i32,
    /// `cum[0] = 0`, `cum[len-1] = 65536`, strictly increasing.
    cum: Vec<u32>,
    escape: bool,
}

impl CdfTable {
    pub fn q_min(&self) -> i32 {
        self.q_min
    }

    pub fn q_max(&self) -> i32 {
        self.q_max
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    pub fn slots(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn alphabet_len(&self) -> usize {
        (self.q_max - self.q_min) as usize + 1
    }

    pub fn count(&self, slot: usize) -> u32 {
        self.cum[slot + 1] - self.cum[slot]
    }

    pub fn start(&self, slot: usize) -> u32 {
        self.cum[slot]
    }

    fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.alphabet_len())
    }

    fn slot_for(&self, q: i32) -> Option<usize> {
        (self.q_min..=self.q_max)
            .contains(&q)
            .then(|| (q as i64 - self.q_min as i64) as usize)
    }

    /// Slot whose cumulative interval contains `threshold`.
    fn locate(&self, threshold: u32) -> usize {
        // partition_point returns the first slot boundary above threshold
        let i = self.cum.partition_point(|&c| c <= threshold);
        i.saturating_sub(1).min(self.slots() - 1)
    }

    /// Shannon entropy of the table distribution, bits per symbol.
    pub fn entropy_bits(&self) -> f64 {
        let total = TOTAL as f64;
        (0..self.slots())
            .map(|s| {
                let p = self.count(s) as f64 / total;
                -p * libm::log2(p)
            })
            .sum()
    }

    /// Cross-entropy of a symbol sequence under this table, in bits,
    /// including escape payloads (32 raw bits each).
    pub fn cross_entropy_bits(&self, symbols: &[i32]) -> f64 {
        let total = TOTAL as f64;
        symbols
            .iter()
            .map(|&q| match self.slot_for(q) {
                Some(s) => -libm::log2(self.count(s) as f64 / total),
                None => {
                    let esc = self.escape_slot().expect("escape required");
                    -libm::log2(self.count(esc) as f64 / total) + 32.0
                }
            })
            .sum()
    }

    /// Draws a symbol from the table distribution (escape slot excluded by
    /// resampling). Intended for tests and calibration harnesses.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> i32 {
        loop {
            let u = rng.random_range(0..TOTAL);
            let slot = self.locate(u);
            if Some(slot) == self.escape_slot() {
                continue;
            }
            return self.q_min + slot as i32;
        }
    }
}

/// Builds a 16-bit fixed-point table from probabilities over the alphabet
/// `[q_min, q_min + probs.len() - 1]`. A positive `escape_mass` appends an
/// escape slot. Mass is allocated proportionally with every slot kept at
/// count >= 1; the rounding deficit or surplus is resolved by largest
/// (respectively smallest) remainder, ties broken by index, so the result
/// is deterministic for bit-identical inputs.
pub fn build_table(probs: &[f64], q_min: i32, escape_mass: f64) -> Result<CdfTable> {
    if probs.is_empty() {
        return Err(Error::EmptyAlphabet);
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || !escape_mass.is_finite() || escape_mass < 0.0 {
        return Err(Error::CorruptStream("invalid probability input".into()));
    }
    let escape = escape_mass > 0.0;
    let slots = probs.len() + usize::from(escape);
    if slots > TOTAL as usize {
        return Err(Error::AlphabetTooLarge(slots));
    }
    if q_min as i64 + probs.len() as i64 - 1 > i32::MAX as i64 {
        return Err(Error::AlphabetTooLarge(probs.len()));
    }
    let total_in: f64 = probs.iter().sum::<f64>() + escape_mass;
    if total_in <= 0.0 {
        return Err(Error::CorruptStream("zero total probability".into()));
    }

    let scale = TOTAL as f64 / total_in;
    let mut counts = Vec::with_capacity(slots);
    let mut remainders = Vec::with_capacity(slots);
    let mut push_target = |p: f64| {
        let target = p * scale;
        let floor = target.floor();
        counts.push((floor as u32).max(1));
        remainders.push(target - floor);
    };
    for &p in probs {
        push_target(p);
    }
    if escape {
        push_target(escape_mass);
    }

    let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
    if assigned < TOTAL as u64 {
        let mut deficit = (TOTAL as u64 - assigned) as usize;
        let mut order: Vec<usize> = (0..slots).collect();
        order.sort_by(|&a, &b| {
            remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b))
        });
        let mut k = 0;
        while deficit > 0 {
            counts[order[k % slots]] += 1;
            deficit -= 1;
            k += 1;
        }
    } else if assigned > TOTAL as u64 {
        let mut surplus = assigned - TOTAL as u64;
        let mut order: Vec<usize> = (0..slots).collect();
        order.sort_by(|&a, &b| {
            remainders[a].partial_cmp(&remainders[b]).unwrap().then(a.cmp(&b))
        });
        while surplus > 0 {
            let mut progress = false;
            for &i in &order {
                if surplus == 0 {
                    break;
                }
                if counts[i] > 1 {
                    counts[i] -= 1;
                    surplus -= 1;
                    progress = true;
                }
            }
            if !progress {
                return Err(Error::AlphabetTooLarge(slots));
            }
        }
    }

    let mut cum = Vec::with_capacity(slots + 1);
    let mut acc = 0u32;
    cum.push(0);
    for &c in &counts {
        acc += c;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    Ok(CdfTable {
        q_min,
        q_max: q_min + probs.len() as i32 - 1,
        cum,
        escape,
    })
}

// -- encoder ------------------------------------------------------------------

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Codes one interval `[start, start+size)` out of `total`.
    /// Requires `size >= 1`, `start + size <= total`, `total <= 2^16`.
    pub fn encode(&mut self, start: u32, size: u32, total: u32) {
        debug_assert!(size >= 1 && start + size <= total && total <= TOTAL);
        let r = self.range / total;
        self.low += start as u64 * r as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = ((self.low as u32) << 8) as u64;
    }

    /// Emits the shortest byte-aligned termination whose whole granularity
    /// cell lies inside the final interval, so any extension of the output
    /// decodes identically.
    pub fn finish(mut self) -> Vec<u8> {
        let lo = self.low;
        let hi = lo + self.range as u64;
        let mut trailing = 0usize;
        for m in (0..=3usize).rev() {
            let cell = 1u64 << (8 * m);
            let x = (lo + cell - 1) & !(cell - 1);
            if x + cell <= hi {
                self.low = x;
                trailing = m;
                break;
            }
        }
        for _ in 0..(5 - trailing) {
            self.shift_low();
        }
        self.out
    }
}

// -- decoder ------------------------------------------------------------------

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = RangeDecoder { bytes, pos: 0, range: u32::MAX, code: 0, r: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        // Reads past the end are zero-extension; the encoder's termination
        // guarantees they cannot change decoded symbols.
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Starts a symbol: returns the threshold to locate within `total`.
    /// Must be followed by exactly one `consume` call.
    pub fn begin(&mut self, total: u32) -> u32 {
        self.r = self.range / total;
        (self.code / self.r).min(total - 1)
    }

    /// Finishes the symbol located from the last `begin`.
    pub fn consume(&mut self, start: u32, size: u32) {
        self.code = self.code.wrapping_sub(start.wrapping_mul(self.r));
        self.range = self.r.wrapping_mul(size);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

// -- symbol stream API ----------------------------------------------------------

/// Encodes one symbol against one table on an open encoder.
fn encode_symbol(enc: &mut RangeEncoder, q: i32, table: &CdfTable) -> Result<()> {
    match table.slot_for(q) {
        Some(slot) => {
            enc.encode(table.start(slot), table.count(slot), TOTAL);
        }
        None => {
            let esc = table.escape_slot().ok_or(Error::SymbolOutOfRange {
                symbol: q as i64,
                q_min: table.q_min,
                q_max: table.q_max,
            })?;
            enc.encode(table.start(esc), table.count(esc), TOTAL);
            for b in (q as u32).to_be_bytes() {
                enc.encode(b as u32 * 256, 256, TOTAL);
            }
        }
    }
    Ok(())
}

fn decode_symbol(dec: &mut RangeDecoder<'_>, table: &CdfTable) -> i32 {
    let th = dec.begin(TOTAL);
    let slot = table.locate(th);
    dec.consume(table.start(slot), table.count(slot));
    if Some(slot) == table.escape_slot() {
        let mut raw = [0u8; 4];
        for b in raw.iter_mut() {
            let th = dec.begin(TOTAL);
            let byte = (th >> 8).min(255);
            dec.consume(byte * 256, 256);
            *b = byte as u8;
        }
        i32::from_be_bytes(raw)
    } else {
        table.q_min + slot as i32
    }
}

/// Encodes `symbols[i]` against `tables[i]`.
pub fn encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::ShapeMismatch {
            op: "range_encode",
            detail: format!("{} symbols vs {} tables", symbols.len(), tables.len()),
        });
    }
    let mut enc = RangeEncoder::new();
    for (&q, table) in symbols.iter().zip(tables) {
        encode_symbol(&mut enc, q, table)?;
    }
    Ok(enc.finish())
}

/// Decodes `tables.len()` symbols. Exact inverse of [`encode`] on intact
/// payloads; corrupted payloads decode to wrong symbols without panicking
/// and are caught by segment checksums upstream.
pub fn decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    Ok(tables.iter().map(|t| decode_symbol(&mut dec, t)).collect())
}

/// Convenience wrappers for a shared table.
pub fn encode_shared(symbols: &[i32], table: &CdfTable) -> Result<Vec<u8>> {
    let tables: Vec<&CdfTable> = std::iter::repeat(table).take(symbols.len()).collect();
    encode(symbols, &tables)
}

pub fn decode_shared(bytes: &[u8], table: &CdfTable, count: usize) -> Result<Vec<i32>> {
    let tables: Vec<&CdfTable> = std::iter::repeat(table).take(count).collect();
    decode(bytes, &tables)
}

// -- frozen Gaussian tables ------------------------------------------------------

/// Gaussian parameters after snapping to the transmitted grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnappedGaussian {
    pub mu: f64,
    pub sigma: f64,
}

/// Snaps a mean onto the `delta/16` grid.
pub fn snap_mu(mu: f64, delta: f64) -> f64 {
    let grid = delta / 16.0;
    (mu / grid).round() * grid
}

/// Snaps a scale onto a 64-entry geometric grid spanning
/// `[0.1*delta, 256*delta]`.
pub fn snap_sigma(sigma: f64, delta: f64) -> f64 {
    let s_min = SIGMA_MIN_RATIO * delta;
    let s_max = SIGMA_MAX_RATIO * delta;
    let span = libm::log(s_max / s_min);
    let pos = libm::log(sigma.max(s_min) / s_min) / span;
    let idx = (pos * (SIGMA_GRID - 1) as f64).round().clamp(0.0, (SIGMA_GRID - 1) as f64);
    s_min * libm::exp(span * idx / (SIGMA_GRID - 1) as f64)
}

/// Builds the coding table for one symbol position. The mean and scale are
/// snapped *before* table construction so encoder and decoder, which both
/// derive them from the shared quantized summary, build bit-identical
/// tables. Bounds cover `mu ± 16 sigma`; the tail mass goes to the escape
/// slot.
pub fn freeze_gaussian_table(mu: f64, sigma: f64, delta: f64) -> Result<(CdfTable, SnappedGaussian)> {
    let mu_s = snap_mu(mu, delta);
    let sigma_s = snap_sigma(sigma, delta);
    let q_lo = ((mu_s - 16.0 * sigma_s) / delta).floor();
    let q_hi = ((mu_s + 16.0 * sigma_s) / delta).ceil();
    if q_lo < i32::MIN as f64 || q_hi > i32::MAX as f64 {
        return Err(Error::SymbolOverflow(mu));
    }
    let (q_lo, q_hi) = (q_lo as i32, q_hi as i32);
    let mut probs = Vec::with_capacity((q_hi - q_lo + 1) as usize);
    let mut mass = 0.0;
    for q in q_lo..=q_hi {
        let p = gaussian_symbol_prob(q, mu_s, sigma_s, delta);
        mass += p;
        probs.push(p);
    }
    let escape_mass = (1.0 - mass).max(1.0 / TOTAL as f64);
    let table = build_table(&probs, q_lo, escape_mass)?;
    Ok((table, SnappedGaussian { mu: mu_s, sigma: sigma_s }))
}

/// Builds the coding table for one factorized-density channel by probing
/// the cumulative on the symbol grid. `cdf_at` evaluates the channel's
/// cumulative at a batch of positions. Symbols outside the discovered
/// support go to the escape slot.
pub fn freeze_factorized_table(
    delta: f64,
    mut cdf_at: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<CdfTable> {
    // Expand the probe radius until both tails are negligible.
    let mut radius: i64 = 64;
    loop {
        let edges = cdf_at(&[
            delta * (-radius as f64 - 0.5),
            delta * (radius as f64 + 0.5),
        ])?;
        if (edges[0] < PROB_FLOOR && edges[1] > 1.0 - PROB_FLOOR) || radius >= (1 << 14) {
            break;
        }
        radius *= 2;
    }
    let xs: Vec<f64> = (-radius..=radius + 1)
        .map(|q| delta * (q as f64 - 0.5))
        .collect();
    let cum = cdf_at(&xs)?;
    let n = (2 * radius + 1) as usize;
    let masses: Vec<f64> = (0..n).map(|i| (cum[i + 1] - cum[i]).max(0.0)).collect();

    // Keep the contiguous block that carries real mass, always spanning 0.
    let mut lo_idx = masses.iter().position(|&m| m >= PROB_FLOOR).unwrap_or(0);
    let mut hi_idx = masses
        .iter()
        .rposition(|&m| m >= PROB_FLOOR)
        .unwrap_or(n - 1);
    let zero_idx = radius as usize;
    lo_idx = lo_idx.min(zero_idx);
    hi_idx = hi_idx.max(zero_idx);

    let probs = &masses[lo_idx..=hi_idx];
    let mass: f64 = probs.iter().sum();
    let escape_mass = (1.0 - mass).max(1.0 / TOTAL as f64);
    build_table(probs, (lo_idx as i64 - radius) as i32, escape_mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_256_counts() {
        let probs = vec![1.0 / 256.0; 256];
        let t = build_table(&probs, 0, 0.0).unwrap();
        for s in 0..256 {
            assert_eq!(t.count(s), 256);
        }
        assert!(!t.has_escape());
    }

    #[test]
    fn exact_fixed_point_split() {
        let t = build_table(&[0.75, 0.25], 0, 0.0).unwrap();
        assert_eq!(t.count(0), 49152);
        assert_eq!(t.count(1), 16384);
    }

    #[test]
    fn empty_alphabet_rejected() {
        assert!(matches!(build_table(&[], 0, 0.0), Err(Error::EmptyAlphabet)));
    }

    #[test]
    fn table_entropy_close_to_input_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(2..300usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().max(1e-4)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let t = build_table(&probs, -5, 0.0).unwrap();
            let h_in: f64 = probs.iter().map(|p| -p * libm::log2(*p)).sum();
            let h_t = t.entropy_bits();
            assert!((h_in - h_t).abs() < 0.01, "{h_in} vs {h_t} (n={n})");
        }
    }

    #[test]
    fn empty_sequence_round_trips() {
        let t = build_table(&[0.5, 0.5], 0, 0.0).unwrap();
        let bytes = encode(&[], &[]).unwrap();
        let back = decode(&bytes, &[]).unwrap();
        assert!(back.is_empty());
        assert!(bytes.len() <= 4, "termination too long: {}", bytes.len());
        let _ = t;
    }

    #[test]
    fn uniform_1000_symbols_length() {
        let probs = vec![1.0 / 256.0; 256];
        let t = build_table(&probs, 0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let symbols: Vec<i32> = (0..1000).map(|_| rng.random_range(0..256)).collect();
        let bytes = encode_shared(&symbols, &t).unwrap();
        assert!(bytes.len() >= 1000 && bytes.len() <= 1005, "len = {}", bytes.len());
        let back = decode_shared(&bytes, &t, symbols.len()).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn skewed_100k_symbols_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..64).map(|i| libm::exp(-(i as f64) / 9.0)).collect();
        let sum: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
        let t = build_table(&probs, 0, 0.0).unwrap();
        let symbols: Vec<i32> = (0..100_000).map(|_| t.sample(&mut rng)).collect();
        let bytes = encode_shared(&symbols, &t).unwrap();
        let back = decode_shared(&bytes, &t, symbols.len()).unwrap();
        assert_eq!(back, symbols);
        let h = t.cross_entropy_bits(&symbols);
        let coded_bits = 8.0 * bytes.len() as f64;
        assert!(coded_bits >= h, "beat entropy: {coded_bits} < {h}");
        assert!(coded_bits <= h * 1.005, "0.5% excess exceeded: {coded_bits} vs {h}");
    }

    #[test]
    fn length_sandwich_on_randomized_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..2000 {
            let n_sym = rng.random_range(2..40usize);
            let raw: Vec<f64> = (0..n_sym).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let t = build_table(&probs, 0, 0.0).unwrap();
            let len = rng.random_range(0..600usize);
            let symbols: Vec<i32> = (0..len).map(|_| t.sample(&mut rng)).collect();
            let bytes = encode_shared(&symbols, &t).unwrap();
            assert_eq!(decode_shared(&bytes, &t, len).unwrap(), symbols, "trial {trial}");
            let h = t.cross_entropy_bits(&symbols);
            let coded = 8.0 * bytes.len() as f64;
            assert!(coded >= h - 1e-9, "trial {trial}: {coded} < {h}");
            assert!(coded <= h + 32.0, "trial {trial}: {coded} > {h} + 32");
        }
    }

    #[test]
    fn escape_symbols_round_trip() {
        let t = build_table(&[0.9, 0.05], 10, 0.05).unwrap();
        assert!(t.has_escape());
        let symbols = vec![10, 11, -500, 10, 2_000_000, 11, i32::MIN, i32::MAX];
        let bytes = encode_shared(&symbols, &t).unwrap();
        assert_eq!(decode_shared(&bytes, &t, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn out_of_range_without_escape_is_an_error() {
        let t = build_table(&[0.5, 0.5], 0, 0.0).unwrap();
        assert!(matches!(
            encode_shared(&[7], &t),
            Err(Error::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn sigma_snapping_is_idempotent_and_collapses_neighbors() {
        let delta = 0.01;
        let s1 = snap_sigma(0.0204, delta);
        let s2 = snap_sigma(0.0205, delta);
        assert_eq!(s1, s2, "nearby scales must share a grid entry");
        assert_eq!(snap_sigma(s1, delta), s1);
        let (t1, g1) = freeze_gaussian_table(0.0001, 0.0204, delta).unwrap();
        let (t2, g2) = freeze_gaussian_table(0.0002, 0.0205, delta).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn frozen_table_peaks_at_the_mean() {
        let delta = 0.01;
        let (t, snapped) = freeze_gaussian_table(0.0, 0.03, delta).unwrap();
        assert_eq!(snapped.mu, 0.0);
        let center = t.slot_for(0).unwrap();
        let peak = t.count(center);
        for s in 0..t.alphabet_len() {
            assert!(t.count(s) <= peak);
        }
    }

    #[test]
    fn frozen_tables_code_close_to_model_estimate() {
        let delta = 0.01;
        let (t, snapped) = freeze_gaussian_table(0.013, 0.05, delta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let symbols: Vec<i32> = (0..10_000).map(|_| t.sample(&mut rng)).collect();
        let bytes = encode_shared(&symbols, &t).unwrap();
        assert_eq!(decode_shared(&bytes, &t, symbols.len()).unwrap(), symbols);
        let mut model_bits = 0.0;
        for &q in &symbols {
            let p = gaussian_symbol_prob(q, snapped.mu, snapped.sigma, delta).max(PROB_FLOOR);
            model_bits += -libm::log2(p);
        }
        let coded = 8.0 * bytes.len() as f64;
        assert!(
            coded <= model_bits * 1.02 + 32.0,
            "coded {coded} vs model {model_bits}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_random_tables(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..128usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().max(1e-6)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum * 0.97).collect();
            let q_min = rng.random_range(-1000..1000i32);
            let t = build_table(&probs, q_min, 0.03).unwrap();
            let len = rng.random_range(0..200usize);
            let symbols: Vec<i32> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.05 {
                        rng.random::<i32>() // likely escapes
                    } else {
                        t.sample(&mut rng)
                    }
                })
                .collect();
            let bytes = encode_shared(&symbols, &t).unwrap();
            let back = decode_shared(&bytes, &t, symbols.len()).unwrap();
            prop_assert_eq!(back, symbols);
        }
    }
}
