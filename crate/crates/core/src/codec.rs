//! End-to-end encoder/decoder wiring the pipeline to the container format.
//!
//! Encode: extract features, pool the semantic prior, squeeze it to the
//! channel summary, quantize both, freeze coding tables from the decoded
//! summary, range-code, pack. Decode order is map, then hyperprior, then
//! prior, since the prior's tables depend on the decoded summary. Both
//! sides build their Gaussian tables from snapped parameters derived from
//! the shared quantized summary, so the tables agree bit-exactly.

use std::path::Path;

use crate::container::{self, ContainerHeader, ModelConfig, Unpacked};
use crate::entropy::{
    factorized_cdf_grid, gaussian_symbol_prob, FactorizedDensity, HyperNets, Quantizer, PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{Image, RegionIndex, SemanticMap};
use crate::map_codec;
use crate::optim::ParamStore;
use crate::prior::{self, PipelineConfig, SemanticPrior};
use crate::range_coder::{self, CdfTable};
use crate::scalar;

/// Parameter namespace of the hyperprior's factorized density.
pub const SUMMARY_DENSITY_PREFIX: &str = "pz";

/// A loaded model ready to code images.
pub struct Codec {
    pub cfg: ModelConfig,
    pub params: ParamStore<f64>,
    nets: HyperNets,
    fd: FactorizedDensity,
    pipeline: PipelineConfig,
    quantizer: Quantizer,
}

/// Byte and bit accounting for one coded image.
#[derive(Debug, Clone)]
pub struct EncodeStats {
    pub width: usize,
    pub height: usize,
    pub header_bytes: usize,
    pub map_bytes: usize,
    pub hyper_bytes: usize,
    pub prior_bytes: usize,
    pub total_bytes: usize,
    pub t_symbol_count: usize,
    pub z_symbol_count: usize,
    /// Model estimate on snapped parameters, bits.
    pub model_prior_bits: f64,
    pub model_hyper_bits: f64,
    /// Integer-table cross-entropy of the coded symbols, bits.
    pub table_prior_bits: f64,
    pub table_hyper_bits: f64,
    /// (class id, table cross-entropy bits of that region's prior symbols)
    pub per_region_prior_bits: Vec<(usize, f64)>,
}

impl EncodeStats {
    pub fn bpp_total(&self) -> f64 {
        8.0 * self.total_bytes as f64 / (self.width * self.height) as f64
    }

    pub fn bpp_of(&self, bytes: usize) -> f64 {
        8.0 * bytes as f64 / (self.width * self.height) as f64
    }
}

pub struct Encoded {
    pub bytes: Vec<u8>,
    pub stats: EncodeStats,
}

pub struct Decoded {
    pub image: Image,
    pub map: SemanticMap,
    /// The quantized prior exactly as the encoder coded it.
    pub prior: SemanticPrior,
    pub header: ContainerHeader,
}

struct DecodedParts {
    header: ContainerHeader,
    map: SemanticMap,
    z_symbols: Vec<i32>,
    t_symbols: Vec<i32>,
    z_tables: Vec<CdfTable>,
    t_tables: Vec<CdfTable>,
    snapped: Vec<range_coder::SnappedGaussian>,
}

impl Codec {
    /// Wraps parameters after validating that every tensor the architecture
    /// needs exists with the right shape.
    pub fn new(cfg: ModelConfig, params: ParamStore<f64>) -> Result<Self> {
        let nets = HyperNets::new(cfg.channels)?;
        let fd = FactorizedDensity::new(nets.summary_channels(), SUMMARY_DENSITY_PREFIX);
        let pipeline = PipelineConfig { channels: cfg.channels, use_coords: cfg.use_coords };
        let quantizer = Quantizer::new(cfg.delta)?;
        validate_params(&cfg, &params)?;
        Ok(Codec { cfg, params, nets, fd, pipeline, quantizer })
    }

    /// Fresh randomly initialized model.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Codec::new(cfg, params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params) = container::load_model(path)?;
        Codec::new(cfg, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save_model(path, &self.cfg, &self.params)
    }

    pub fn quantizer(&self) -> Quantizer {
        self.quantizer
    }

    pub fn hyper_nets(&self) -> &HyperNets {
        &self.nets
    }

    pub fn summary_density(&self) -> &FactorizedDensity {
        &self.fd
    }

    pub fn pipeline_config(&self) -> &PipelineConfig {
        &self.pipeline
    }

    /// Coding tables for the channel summary, one per summary channel,
    /// derived solely from model parameters.
    pub fn summary_tables(&self) -> Result<Vec<CdfTable>> {
        (0..self.nets.summary_channels())
            .map(|ch| {
                range_coder::freeze_factorized_table(self.quantizer.step(), |xs| {
                    factorized_cdf_grid(&self.fd, &self.params, ch, xs)
                })
            })
            .collect()
    }

    pub fn encode(&self, image: &Image, map: &SemanticMap) -> Result<Encoded> {
        if image.width != map.width || image.height != map.height {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "image {}x{} vs map {}x{}",
                    image.width, image.height, map.width, map.height
                ),
            });
        }
        if map.num_classes() != self.cfg.classes {
            return Err(Error::ClassCountMismatch {
                prior: self.cfg.classes,
                map: map.num_classes(),
            });
        }

        let features = prior::extract_features(image, &self.params, &self.pipeline)?;
        let sem_prior = prior::pool_prior(&features, map)?;
        let selected = sem_prior.present_columns();
        let k = selected.cols();

        // Channel summary and its symbols.
        let mut g = Graph::new(&self.params);
        let t_node = g.constant(selected.clone());
        let z_node = self.nets.build_encode(&mut g, t_node)?;
        let z = g.value(z_node).clone();
        drop(g);
        let z_symbols = self.quantizer.symbols(&z)?;
        let z_tilde = self.quantizer.dequantize(&z_symbols, z.shape())?;

        let z_tables = self.summary_tables()?;
        let z_table_refs: Vec<&CdfTable> = z_symbols
            .chunks(k)
            .enumerate()
            .flat_map(|(ch, chunk)| std::iter::repeat(&z_tables[ch]).take(chunk.len()))
            .collect();
        let z_payload = range_coder::encode(&z_symbols, &z_table_refs)?;

        // Prior symbols coded with tables frozen from the decoded summary.
        let gaussians = crate::entropy::hyper_decode(&z_tilde, &self.params, &self.nets, &self.quantizer)?;
        let t_symbols = self.quantizer.symbols(&selected)?;
        let mut t_tables = Vec::with_capacity(t_symbols.len());
        let mut model_prior_bits = 0.0;
        for i in 0..t_symbols.len() {
            let (table, snapped) = range_coder::freeze_gaussian_table(
                gaussians.mu.data()[i],
                gaussians.sigma.data()[i],
                self.quantizer.step(),
            )?;
            let p = gaussian_symbol_prob(
                t_symbols[i],
                snapped.mu,
                snapped.sigma,
                self.quantizer.step(),
            )
            .max(PROB_FLOOR);
            model_prior_bits += scalar::neg_log2(p);
            t_tables.push(table);
        }
        let t_table_refs: Vec<&CdfTable> = t_tables.iter().collect();
        let t_payload = range_coder::encode(&t_symbols, &t_table_refs)?;

        // Model estimate for the summary on the exact table construction grid.
        let mut model_hyper_bits = 0.0;
        let mut table_hyper_bits = 0.0;
        for (ch, chunk) in z_symbols.chunks(k).enumerate() {
            table_hyper_bits += z_tables[ch].cross_entropy_bits(chunk);
            let edges_lo: Vec<f64> = chunk
                .iter()
                .map(|&q| self.quantizer.step() * (q as f64 - 0.5))
                .collect();
            let edges_hi: Vec<f64> = chunk
                .iter()
                .map(|&q| self.quantizer.step() * (q as f64 + 0.5))
                .collect();
            let lo = factorized_cdf_grid(&self.fd, &self.params, ch, &edges_lo)?;
            let hi = factorized_cdf_grid(&self.fd, &self.params, ch, &edges_hi)?;
            for (h, l) in hi.iter().zip(&lo) {
                model_hyper_bits += scalar::neg_log2((h - l).max(PROB_FLOOR));
            }
        }

        let mut table_prior_bits = 0.0;
        let present = sem_prior.present_classes();
        let mut per_region = vec![0.0f64; present.len()];
        for (i, (&q, table)) in t_symbols.iter().zip(&t_tables).enumerate() {
            let bits = table.cross_entropy_bits(std::slice::from_ref(&q));
            table_prior_bits += bits;
            per_region[i % k] += bits;
        }
        let per_region_prior_bits: Vec<(usize, f64)> =
            present.iter().copied().zip(per_region).collect();

        let map_segment = map_codec::encode_map(map);
        let hyper_segment = checksummed(&z_payload);
        let prior_segment = checksummed(&t_payload);

        let header = ContainerHeader {
            width: image.width as u32,
            height: image.height as u32,
            num_classes: self.cfg.classes as u8,
            channels: self.cfg.channels as u16,
            delta: self.quantizer.step() as f32,
            presence: sem_prior.presence.clone(),
        };
        let bytes = container::pack(&header, &map_segment, &hyper_segment, &prior_segment)?;
        let header_bytes =
            bytes.len() - map_segment.len() - hyper_segment.len() - prior_segment.len();

        let stats = EncodeStats {
            width: image.width,
            height: image.height,
            header_bytes,
            map_bytes: map_segment.len(),
            hyper_bytes: hyper_segment.len(),
            prior_bytes: prior_segment.len(),
            total_bytes: bytes.len(),
            t_symbol_count: t_symbols.len(),
            z_symbol_count: z_symbols.len(),
            model_prior_bits,
            model_hyper_bits,
            table_prior_bits,
            table_hyper_bits,
            per_region_prior_bits,
        };
        Ok(Encoded { bytes, stats })
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Decoded> {
        let parts = self.decode_parts(bytes)?;
        let k = parts.header.present_count();
        let t_tilde = self
            .quantizer
            .dequantize(&parts.t_symbols, &[self.cfg.channels, k])?;
        let prior = SemanticPrior::from_present_columns(&t_tilde, parts.header.presence.clone())?;
        let image = prior::synthesize(&prior, &parts.map, &self.params, &self.pipeline)?;
        Ok(Decoded { image, map: parts.map, prior, header: parts.header })
    }

    /// Decodes without synthesizing and recomputes the full accounting
    /// (segment bytes, model and table bits, per-region bits).
    pub fn inspect(&self, bytes: &[u8]) -> Result<EncodeStats> {
        let u = container::unpack(bytes)?;
        let seg_lens = (u.map_segment.len(), u.hyper_segment.len(), u.prior_segment.len());
        let parts = self.decode_parts(bytes)?;
        let k = parts.header.present_count();
        let step = self.quantizer.step();

        let mut table_hyper_bits = 0.0;
        let mut model_hyper_bits = 0.0;
        for (ch, chunk) in parts.z_symbols.chunks(k).enumerate() {
            table_hyper_bits += parts.z_tables[ch].cross_entropy_bits(chunk);
            let lo: Vec<f64> = chunk.iter().map(|&q| step * (q as f64 - 0.5)).collect();
            let hi: Vec<f64> = chunk.iter().map(|&q| step * (q as f64 + 0.5)).collect();
            let clo = factorized_cdf_grid(&self.fd, &self.params, ch, &lo)?;
            let chi = factorized_cdf_grid(&self.fd, &self.params, ch, &hi)?;
            for (h, l) in chi.iter().zip(&clo) {
                model_hyper_bits += scalar::neg_log2((h - l).max(PROB_FLOOR));
            }
        }

        let mut table_prior_bits = 0.0;
        let mut model_prior_bits = 0.0;
        let present: Vec<usize> = (0..parts.header.presence.len())
            .filter(|&n| parts.header.presence[n])
            .collect();
        let mut per_region = vec![0.0f64; k];
        for (i, (&q, table)) in parts.t_symbols.iter().zip(&parts.t_tables).enumerate() {
            let bits = table.cross_entropy_bits(std::slice::from_ref(&q));
            table_prior_bits += bits;
            per_region[i % k] += bits;
            let p = gaussian_symbol_prob(
                q,
                parts.snapped[i].mu,
                parts.snapped[i].sigma,
                step,
            )
            .max(PROB_FLOOR);
            model_prior_bits += scalar::neg_log2(p);
        }

        Ok(EncodeStats {
            width: parts.header.width as usize,
            height: parts.header.height as usize,
            header_bytes: bytes.len() - seg_lens.0 - seg_lens.1 - seg_lens.2,
            map_bytes: seg_lens.0,
            hyper_bytes: seg_lens.1,
            prior_bytes: seg_lens.2,
            total_bytes: bytes.len(),
            t_symbol_count: parts.t_symbols.len(),
            z_symbol_count: parts.z_symbols.len(),
            model_prior_bits,
            model_hyper_bits,
            table_prior_bits,
            table_hyper_bits,
            per_region_prior_bits: present.into_iter().zip(per_region).collect(),
        })
    }

    fn decode_parts(&self, bytes: &[u8]) -> Result<DecodedParts> {
        let Unpacked { header, map_segment, hyper_segment, prior_segment } = container::unpack(bytes)?;
        self.check_header(&header)?;

        let map = map_codec::decode_map(&map_segment)?;
        if map.width != header.width as usize
            || map.height != header.height as usize
            || map.num_classes() != header.num_classes as usize
        {
            return Err(Error::CorruptStream("map does not match container header".into()));
        }
        let idx = RegionIndex::new(&map);
        if idx.presence() != header.presence {
            return Err(Error::CorruptStream("presence bitmap disagrees with map".into()));
        }
        let k = header.present_count();
        if k == 0 {
            return Err(Error::CorruptStream("no present classes".into()));
        }

        let z_payload = verify_checksum(&hyper_segment, "hyperprior segment")?;
        let z_tables = self.summary_tables()?;
        let cz = self.nets.summary_channels();
        let z_table_refs: Vec<&CdfTable> = (0..cz)
            .flat_map(|ch| std::iter::repeat(&z_tables[ch]).take(k))
            .collect();
        let z_symbols = range_coder::decode(z_payload, &z_table_refs)?;
        let z_tilde = self.quantizer.dequantize(&z_symbols, &[cz, k])?;

        let gaussians =
            crate::entropy::hyper_decode(&z_tilde, &self.params, &self.nets, &self.quantizer)?;
        let t_payload = verify_checksum(&prior_segment, "prior segment")?;
        let mut t_tables = Vec::with_capacity(self.cfg.channels * k);
        let mut snapped = Vec::with_capacity(self.cfg.channels * k);
        for i in 0..self.cfg.channels * k {
            let (table, snap) = range_coder::freeze_gaussian_table(
                gaussians.mu.data()[i],
                gaussians.sigma.data()[i],
                self.quantizer.step(),
            )?;
            t_tables.push(table);
            snapped.push(snap);
        }
        let t_table_refs: Vec<&CdfTable> = t_tables.iter().collect();
        let t_symbols = range_coder::decode(t_payload, &t_table_refs)?;

        Ok(DecodedParts { header, map, z_symbols, t_symbols, z_tables, t_tables, snapped })
    }

    /// Decodes, replacing one region's prior column with the column decoded
    /// from a reference container before synthesis.
    pub fn decode_with_swap(
        &self,
        bytes: &[u8],
        reference_bytes: &[u8],
        class_id: usize,
    ) -> Result<Decoded> {
        let base = self.decode(bytes)?;
        let reference = self.decode(reference_bytes)?;
        let swapped = prior::swap_region_prior(&base.prior, &reference.prior, class_id)?;
        let image = prior::synthesize(&swapped, &base.map, &self.params, &self.pipeline)?;
        Ok(Decoded { image, map: base.map, prior: swapped, header: base.header })
    }

    fn check_header(&self, header: &ContainerHeader) -> Result<()> {
        if header.channels as usize != self.cfg.channels {
            return Err(Error::CorruptStream(format!(
                "container channels {} vs model {}",
                header.channels, self.cfg.channels
            )));
        }
        if header.num_classes as usize != self.cfg.classes {
            return Err(Error::CorruptStream(format!(
                "container classes {} vs model {}",
                header.num_classes, self.cfg.classes
            )));
        }
        if header.delta != self.quantizer.step() as f32 {
            return Err(Error::CorruptStream(format!(
                "container delta {} vs model {}",
                header.delta,
                self.quantizer.step()
            )));
        }
        Ok(())
    }
}

/// Initializes all pipeline parameters from one seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    use rand::SeedableRng;
    let nets = HyperNets::new(cfg.channels)?;
    let fd = FactorizedDensity::new(nets.summary_channels(), SUMMARY_DENSITY_PREFIX);
    let pipeline = PipelineConfig { channels: cfg.channels, use_coords: cfg.use_coords };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    prior::init_texsyn_params(&mut store, &pipeline, &mut rng);
    nets.init_params(&mut store, &mut rng);
    fd.init_params(&mut store, &mut rng);
    Ok(store)
}

/// Checks that `params` contains every tensor a fresh model of this
/// configuration would have, with matching shapes. Extra tensors (for
/// example ablation variants) are allowed.
pub fn validate_params(cfg: &ModelConfig, params: &ParamStore<f64>) -> Result<()> {
    let reference = init_params(cfg, 0)?;
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(Error::UnknownParam(name.clone())),
            Some(p) if !p.same_shape(t) => {
                return Err(Error::ShapeMismatch {
                    op: "load_model",
                    detail: format!(
                        "`{}` has shape {:?}, expected {:?}",
                        name,
                        p.shape(),
                        t.shape()
                    ),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

fn checksummed(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

fn verify_checksum<'a>(segment: &'a [u8], what: &'static str) -> Result<&'a [u8]> {
    if segment.len() < 4 {
        return Err(Error::Truncated(what));
    }
    let stored = u32::from_be_bytes(segment[..4].try_into().unwrap());
    let payload = &segment[4..];
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(payload)
}

/// Tensor of reconstruction residuals is not needed by callers; expose MSE
/// directly for reporting.
pub fn reconstruction_mse(a: &Image, b: &Image) -> Result<f64> {
    a.mse(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { channels: 32, classes: 5, delta: 0.01, use_coords: true }
    }

    fn scene(cfg: &ModelConfig, seed: u64) -> (Image, SemanticMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth::generate_scene(32, 32, cfg.classes, &mut rng).unwrap()
    }

    #[test]
    fn encode_decode_round_trips_quantized_prior() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 7).unwrap();
        let (img, map) = scene(&cfg, 1);
        let enc = codec.encode(&img, &map).unwrap();
        let dec = codec.decode(&enc.bytes).unwrap();
        assert_eq!(dec.map, map);

        // The decoded prior is exactly the encoder's quantized prior.
        let features = prior::extract_features(&img, &codec.params, codec.pipeline_config()).unwrap();
        let p = prior::pool_prior(&features, &map).unwrap();
        let q = codec.quantizer();
        let expected = q.quantize_test(&p.present_columns());
        let got = dec.prior.present_columns();
        assert_eq!(expected.shape(), got.shape());
        for (a, b) in expected.data().iter().zip(got.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 8).unwrap();
        let (img, map) = scene(&cfg, 2);
        let a = codec.encode(&img, &map).unwrap();
        let b = codec.encode(&img, &map).unwrap();
        assert_eq!(a.bytes, b.bytes);
        let da = codec.decode(&a.bytes).unwrap();
        let db = codec.decode(&b.bytes).unwrap();
        assert_eq!(da.image, db.image);
    }

    #[test]
    fn stats_bytes_are_consistent() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 9).unwrap();
        let (img, map) = scene(&cfg, 3);
        let enc = codec.encode(&img, &map).unwrap();
        let s = &enc.stats;
        assert_eq!(
            s.total_bytes,
            s.header_bytes + s.map_bytes + s.hyper_bytes + s.prior_bytes
        );
        assert_eq!(s.total_bytes, enc.bytes.len());
        let k = map
            .class_counts()
            .iter()
            .filter(|&&c| c > 0)
            .count();
        assert_eq!(s.t_symbol_count, cfg.channels * k);
        assert_eq!(s.z_symbol_count, cfg.channels / 16 * k);
        let region_sum: f64 = s.per_region_prior_bits.iter().map(|(_, b)| b).sum();
        assert!((region_sum - s.table_prior_bits).abs() < 1e-9);
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 10).unwrap();
        let (img, map) = scene(&cfg, 4);
        let enc = codec.encode(&img, &map).unwrap();
        // Flip a byte inside the prior segment (the tail of the container).
        let mut bad = enc.bytes.clone();
        let n = bad.len();
        bad[n - 3] ^= 0x10;
        assert!(codec.decode(&bad).is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 11).unwrap();
        let (img, map) = scene(&cfg, 5);
        let enc = codec.encode(&img, &map).unwrap();
        let other = Codec::init(ModelConfig { classes: 6, ..cfg }, 11).unwrap();
        assert!(other.decode(&enc.bytes).is_err());
    }

    #[test]
    fn model_file_round_trip_preserves_coding() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 12).unwrap();
        let dir = std::env::temp_dir().join("spcodec-codec-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.spm");
        codec.save(&path).unwrap();
        let loaded = Codec::load(&path).unwrap();
        let (img, map) = scene(&cfg, 6);
        let a = codec.encode(&img, &map).unwrap();
        let b = loaded.encode(&img, &map).unwrap();
        assert_eq!(a.bytes, b.bytes);

        // Frozen summary tables agree bit-exactly across save/load.
        let ta = codec.summary_tables().unwrap();
        let tb = loaded.summary_tables().unwrap();
        assert_eq!(ta, tb);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn validate_params_catches_missing_and_misshaped() {
        let cfg = small_cfg();
        let codec = Codec::init(cfg, 13).unwrap();
        let mut missing = codec.params.clone();
        let mut store = ParamStore::new();
        for (name, t) in missing.iter() {
            if name != "syn.mix2.b" {
                store.insert(name.clone(), t.clone());
            }
        }
        assert!(matches!(
            Codec::new(cfg, store),
            Err(Error::UnknownParam(_))
        ));
        missing.insert("syn.mix2.b", crate::Tensor::zeros(&[4]));
        assert!(matches!(
            Codec::new(cfg, missing),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn region_swap_changes_only_that_region() {
        let cfg = ModelConfig { use_coords: false, ..small_cfg() };
        let codec = Codec::init(cfg, 14).unwrap();
        let (img_a, map) = scene(&cfg, 7);
        // Same map, different texture content for the reference.
        let (img_b, _) = scene(&cfg, 8);
        let enc_a = codec.encode(&img_a, &map).unwrap();
        let enc_b = codec.encode(&img_b, &map).unwrap();
        let class_id = 2usize;
        let plain = codec.decode(&enc_a.bytes).unwrap();
        let swapped = codec.decode_with_swap(&enc_a.bytes, &enc_b.bytes, class_id).unwrap();
        for y in 0..map.height {
            for x in 0..map.width {
                let inside = map.label(y, x) as usize == class_id;
                for c in 0..3 {
                    let same = plain.image.pixel(c, y, x).to_bits()
                        == swapped.image.pixel(c, y, x).to_bits();
                    if !inside {
                        assert!(same, "pixel outside swapped region changed at ({x},{y})");
                    }
                }
            }
        }
        // The swapped region itself must differ somewhere.
        let mut any_diff = false;
        for y in 0..map.height {
            for x in 0..map.width {
                if map.label(y, x) as usize == class_id {
                    for c in 0..3 {
                        any_diff |= plain.image.pixel(c, y, x) != swapped.image.pixel(c, y, x);
                    }
                }
            }
        }
        assert!(any_diff, "swap had no visible effect");
    }
}
