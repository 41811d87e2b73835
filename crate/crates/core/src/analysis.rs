//! Channel-correlation study, rate reports, and synthetic prior
//! generators for the entropy-model comparisons.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{Codec, EncodeStats};
use crate::error::{Error, Result};
use crate::image::{Image, SemanticMap};
use crate::optim::ParamStore;
use crate::prior::{extract_features, pool_prior, PipelineConfig};
use crate::synth;
use crate::tensor::Tensor;
use crate::Tensor64;

/// Pearson correlation matrix across sample vectors. `samples[i]` is one
/// observation of all `C` channels. Channels with zero variance get 0
/// off-diagonal and 1 on the diagonal.
pub fn correlation_matrix(samples: &[Vec<f64>]) -> Result<Tensor64> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {m}")));
    }
    let c = samples[0].len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(Error::ShapeMismatch {
            op: "correlation_matrix",
            detail: "inconsistent sample lengths".into(),
        });
    }
    let mf = m as f64;
    let mut mean = vec![0.0; c];
    for s in samples {
        for (acc, &v) in mean.iter_mut().zip(s) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= mf;
    }
    // Covariance (population normalization cancels in the ratio).
    let mut cov = vec![0.0; c * c];
    for s in samples {
        for i in 0..c {
            let di = s[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += di * (s[j] - mean[j]);
            }
        }
    }
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        let vi = cov[i * c + i];
        for j in i..c {
            let vj = cov[j * c + j];
            let value = if i == j {
                1.0
            } else if vi > 0.0 && vj > 0.0 {
                (cov[i * c + j] / (vi.sqrt() * vj.sqrt())).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out.set2(i, j, value);
            out.set2(j, i, value);
        }
    }
    Ok(out)
}

/// Column `class_id` of a `(C, N)` prior matrix.
pub fn class_column(prior: &Tensor64, class_id: usize) -> Vec<f64> {
    let (c, n) = (prior.rows(), prior.cols());
    (0..c).map(|ch| prior.data()[ch * n + class_id]).collect()
}

/// Extracts priors from up to `max_images` dataset images and correlates
/// the channels of one class's latent vectors across images.
pub fn channel_correlation(
    dataset: &Path,
    params: &ParamStore<f64>,
    pipeline: &PipelineConfig,
    classes: usize,
    class_id: usize,
    max_images: usize,
) -> Result<Tensor64> {
    if class_id >= classes {
        return Err(Error::AbsentClass(class_id));
    }
    let mut vectors = Vec::new();
    for (ppm, pgm) in synth::list_pairs(dataset)?.into_iter().take(max_images) {
        let image = Image::load_ppm(&ppm)?;
        let map = SemanticMap::load_pgm(&pgm, classes)?;
        let features = extract_features(&image, params, pipeline)?;
        let prior = pool_prior(&features, &map)?;
        if prior.presence[class_id] {
            vectors.push(class_column(&prior.vectors, class_id));
        }
    }
    if vectors.is_empty() {
        return Err(Error::AbsentClass(class_id));
    }
    if vectors.len() < 3 {
        return Err(Error::Config(format!(
            "class {class_id} present in only {} images, need at least 3",
            vectors.len()
        )));
    }
    correlation_matrix(&vectors)
}

/// Mean absolute off-diagonal entry.
pub fn mean_abs_off_diagonal(matrix: &Tensor64) -> f64 {
    let c = matrix.rows();
    if c < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                acc += matrix.at2(i, j).abs();
            }
        }
    }
    acc / (c * (c - 1)) as f64
}

/// Synthetic correlated priors: a fixed random mixing of `factors` latent
/// factors plus channel noise at the given signal-to-noise ratio. Every
/// column of every sample draws fresh factors, so channels correlate
/// through the shared mixing while regions stay independent.
pub fn gen_correlated_priors<R: Rng>(
    count: usize,
    channels: usize,
    classes: usize,
    factors: usize,
    snr: f64,
    scale: f64,
    rng: &mut R,
) -> Vec<Tensor64> {
    let wstd = scale / (factors as f64).sqrt();
    let mixing: Vec<f64> = (0..channels * factors)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * wstd
        })
        .collect();
    let noise_std = scale / snr.sqrt();
    (0..count)
        .map(|_| {
            let mut t = Tensor::zeros(&[channels, classes]);
            for col in 0..classes {
                let f: Vec<f64> = (0..factors).map(|_| StandardNormal.sample(rng)).collect();
                for ch in 0..channels {
                    let signal: f64 = (0..factors).map(|k| mixing[ch * factors + k] * f[k]).sum();
                    let eps: f64 = StandardNormal.sample(rng);
                    t.set2(ch, col, signal + noise_std * eps);
                }
            }
            t
        })
        .collect()
}

/// Independent control: every channel of every column is plain Gaussian.
pub fn gen_independent_priors<R: Rng>(
    count: usize,
    channels: usize,
    classes: usize,
    scale: f64,
    rng: &mut R,
) -> Vec<Tensor64> {
    (0..count)
        .map(|_| {
            let data: Vec<f64> = (0..channels * classes)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            Tensor::new(vec![channels, classes], data).expect("length matches")
        })
        .collect()
}

// -- rate reports ---------------------------------------------------------------

/// Container accounting without a model: segment sizes only.
#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub width: usize,
    pub height: usize,
    pub present_classes: usize,
    pub header_bytes: usize,
    pub map_bytes: usize,
    pub hyper_bytes: usize,
    pub prior_bytes: usize,
    pub total_bytes: usize,
}

impl SegmentReport {
    pub fn from_container(bytes: &[u8]) -> Result<SegmentReport> {
        let u = crate::container::unpack(bytes)?;
        let header_bytes =
            bytes.len() - u.map_segment.len() - u.hyper_segment.len() - u.prior_segment.len();
        Ok(SegmentReport {
            width: u.header.width as usize,
            height: u.header.height as usize,
            present_classes: u.header.present_count(),
            header_bytes,
            map_bytes: u.map_segment.len(),
            hyper_bytes: u.hyper_segment.len(),
            prior_bytes: u.prior_segment.len(),
            total_bytes: bytes.len(),
        })
    }

    pub fn bpp(&self, bytes: usize) -> f64 {
        8.0 * bytes as f64 / (self.width * self.height) as f64
    }

    /// Segment view of freshly produced encoder stats, so encode-side
    /// reporting matches container inspection.
    pub fn from_stats(s: &EncodeStats) -> SegmentReport {
        SegmentReport {
            width: s.width,
            height: s.height,
            present_classes: s.per_region_prior_bits.len(),
            header_bytes: s.header_bytes,
            map_bytes: s.map_bytes,
            hyper_bytes: s.hyper_bytes,
            prior_bytes: s.prior_bytes,
            total_bytes: s.total_bytes,
        }
    }
}

/// Full report; per-region bits require the model.
pub fn rate_report(bytes: &[u8], codec: Option<&Codec>) -> Result<(SegmentReport, Option<EncodeStats>)> {
    let seg = SegmentReport::from_container(bytes)?;
    let stats = match codec {
        Some(c) => Some(c.inspect(bytes)?),
        None => None,
    };
    Ok((seg, stats))
}

/// Plain-text rendering of a rate report.
pub fn render_report_text(seg: &SegmentReport, stats: Option<&EncodeStats>) -> String {
    let mut out = String::new();
    let px = (seg.width * seg.height) as f64;
    out.push_str(&format!("size           {}x{} ({} px)\n", seg.width, seg.height, px as usize));
    out.push_str(&format!("present classes {}\n", seg.present_classes));
    for (name, b) in [
        ("header", seg.header_bytes),
        ("map", seg.map_bytes),
        ("hyperprior", seg.hyper_bytes),
        ("prior", seg.prior_bytes),
        ("total", seg.total_bytes),
    ] {
        out.push_str(&format!("{name:<14} {b:>8} bytes  {:>9.5} bpp\n", seg.bpp(b)));
    }
    if let Some(s) = stats {
        out.push_str(&format!(
            "symbols        prior {} + hyperprior {}\n",
            s.t_symbol_count, s.z_symbol_count
        ));
        out.push_str(&format!(
            "model bits     prior {:.1} + hyperprior {:.1}\n",
            s.model_prior_bits, s.model_hyper_bits
        ));
        out.push_str(&format!(
            "table bits     prior {:.1} + hyperprior {:.1}\n",
            s.table_prior_bits, s.table_hyper_bits
        ));
        out.push_str("per-region prior bits:\n");
        for &(class, bits) in &s.per_region_prior_bits {
            out.push_str(&format!("  class {class:<3} {bits:>10.1}\n"));
        }
    }
    out
}

/// CSV rendering (RFC-4180 subset: numeric fields, CRLF line ends).
pub fn render_report_csv(seg: &SegmentReport, stats: Option<&EncodeStats>) -> String {
    let mut out = String::from("segment,bytes,bpp\r\n");
    for (name, b) in [
        ("header", seg.header_bytes),
        ("map", seg.map_bytes),
        ("hyperprior", seg.hyper_bytes),
        ("prior", seg.prior_bytes),
        ("total", seg.total_bytes),
    ] {
        out.push_str(&format!("{name},{b},{}\r\n", seg.bpp(b)));
    }
    if let Some(s) = stats {
        out.push_str("class,prior_bits\r\n");
        for &(class, bits) in &s.per_region_prior_bits {
            out.push_str(&format!("{class},{bits}\r\n"));
        }
    }
    out
}

/// Matrix as CSV (numeric cells, CRLF).
pub fn matrix_to_csv(matrix: &Tensor64) -> String {
    let (r, c) = (matrix.rows(), matrix.cols());
    let mut out = String::new();
    for i in 0..r {
        for j in 0..c {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", matrix.at2(i, j)));
        }
        out.push_str("\r\n");
    }
    out
}

/// Matrix as an 8-bit PGM heatmap, values affinely mapped from [-1, 1].
pub fn matrix_to_pgm(matrix: &Tensor64) -> Vec<u8> {
    let (r, c) = (matrix.rows(), matrix.cols());
    let mut out = format!("P5\n{c} {r}\n255\n").into_bytes();
    for i in 0..r {
        for j in 0..c {
            let v = matrix.at2(i, j).clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 0.5 * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicated_channel_correlates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![a, a, b]
            })
            .collect();
        let m = correlation_matrix(&samples).unwrap();
        assert_eq!(m.at2(0, 1), 1.0);
        assert_eq!(m.at2(1, 0), 1.0);
        for i in 0..3 {
            assert_eq!(m.at2(i, i), 1.0);
        }
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let m = correlation_matrix(&samples).unwrap();
        for i in 0..6 {
            assert_eq!(m.at2(i, i), 1.0);
            for j in 0..6 {
                assert_eq!(m.at2(i, j).to_bits(), m.at2(j, i).to_bits());
                assert!(m.at2(i, j).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn zero_variance_channel_convention() {
        let samples: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let m = correlation_matrix(&samples).unwrap();
        assert_eq!(m.at2(0, 0), 1.0);
        assert_eq!(m.at2(0, 1), 0.0);
        assert_eq!(m.at2(1, 0), 0.0);
    }

    #[test]
    fn correlated_generator_shows_structure_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let priors = gen_correlated_priors(100, 16, 4, 4, 10.0, 0.05, &mut rng);
        let samples: Vec<Vec<f64>> = priors.iter().map(|p| class_column(p, 1)).collect();
        let m = correlation_matrix(&samples).unwrap();
        assert!(mean_abs_off_diagonal(&m) >= 0.3, "got {}", mean_abs_off_diagonal(&m));

        // Brute-force covariance oracle.
        let c = 16;
        let n = samples.len() as f64;
        for i in 0..c {
            for j in 0..c {
                let mi: f64 = samples.iter().map(|s| s[i]).sum::<f64>() / n;
                let mj: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / n;
                let cov: f64 = samples.iter().map(|s| (s[i] - mi) * (s[j] - mj)).sum::<f64>();
                let vi: f64 = samples.iter().map(|s| (s[i] - mi).powi(2)).sum::<f64>();
                let vj: f64 = samples.iter().map(|s| (s[j] - mj).powi(2)).sum::<f64>();
                let expect = if i == j { 1.0 } else { cov / (vi.sqrt() * vj.sqrt()) };
                assert!(
                    (m.at2(i, j) - expect).abs() < 1e-10,
                    "({i},{j}): {} vs {expect}",
                    m.at2(i, j)
                );
            }
        }
    }

    #[test]
    fn independent_generator_shows_no_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let priors = gen_independent_priors(1000, 16, 4, 0.05, &mut rng);
        let samples: Vec<Vec<f64>> = priors.iter().map(|p| class_column(p, 0)).collect();
        let m = correlation_matrix(&samples).unwrap();
        assert!(mean_abs_off_diagonal(&m) <= 0.05, "got {}", mean_abs_off_diagonal(&m));
    }

    #[test]
    fn heatmap_mapping_is_affine() {
        let m = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let pgm = matrix_to_pgm(&m);
        let tail = &pgm[pgm.len() - 3..];
        assert_eq!(tail, &[0, 128, 255]);
    }

    #[test]
    fn csv_is_rectangular() {
        let m = Tensor::new(vec![2, 2], vec![1.0, -0.5, -0.5, 1.0]).unwrap();
        let csv = matrix_to_csv(&m);
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 2);
    }
}
