//! Probability models for the texture layer.
//!
//! The quantized prior is coded with per-symbol conditional Gaussians whose
//! mean and scale come from a cross-channel hyper network: a three-layer
//! 1x1 mixing stack squeezes the C channels of each region vector down to
//! C/16 summary channels, and a mirrored stack expands the quantized
//! summary back to per-channel (mu, sigma). The summary itself is coded
//! with a learned monotone per-channel cumulative (four composed layers,
//! three filters each).
//!
//! Training replaces rounding with additive uniform noise; test-time
//! rounding is half away from zero. Probabilities are floored at 2^-40
//! before any logarithm so estimated bits stay finite.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::ParamStore;
use crate::prior::SemanticPrior;
use crate::scalar::{self, Real};
use crate::tensor::Tensor;
use crate::Tensor64;

/// Probability floor applied before logs and when freezing tables.
pub const PROB_FLOOR: f64 = 5.684_341_886_080_802e-14; // 2^-40

/// Ratio of the smallest allowed Gaussian scale to the quantizer step.
pub const SIGMA_MIN_RATIO: f64 = 0.1;

/// Uniform quantizer with step `delta`.
#[derive(Debug, Clone, Copy)]
pub struct Quantizer {
    step: f64,
}

impl Quantizer {
    pub fn new(step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidStep(step));
        }
        Ok(Quantizer { step })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Smallest Gaussian scale the models may emit.
    #[inline]
    pub fn sigma_min(&self) -> f64 {
        SIGMA_MIN_RATIO * self.step
    }

    /// Test-time quantization: `step * round(v/step)`, ties away from zero.
    /// Adding +0.0 canonicalizes -0.0 so grid values match
    /// [`Quantizer::dequantize`] bit-for-bit.
    pub fn quantize_test<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let step = T::from_f64_lossy(self.step);
        t.map(|v| (v / step).round() * step + T::zero())
    }

    /// Training proxy: adds uniform noise from `(-step/2, step/2)`.
    pub fn quantize_train<T: Real, R: Rng>(&self, t: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        let noise = self.noise(t.shape(), rng);
        t.zip_map(&noise, |v, u| v + u).expect("same shape")
    }

    /// A noise tensor from the same distribution `quantize_train` adds.
    pub fn noise<T: Real, R: Rng>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let step = self.step;
        let data = (0..n)
            .map(|_| T::from_f64_lossy((rng.random::<f64>() - 0.5) * step))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("length matches")
    }

    /// Integer grid indices `round(v/step)`; errors if a value does not fit
    /// the 32-bit symbol domain.
    pub fn symbols(&self, t: &Tensor64) -> Result<Vec<i32>> {
        t.data()
            .iter()
            .map(|&v| {
                let q = (v / self.step).round();
                if q >= i32::MIN as f64 && q <= i32::MAX as f64 {
                    Ok(q as i32)
                } else {
                    Err(Error::SymbolOverflow(v))
                }
            })
            .collect()
    }

    /// Grid values `step * q` for decoded symbols.
    pub fn dequantize(&self, symbols: &[i32], shape: &[usize]) -> Result<Tensor64> {
        Tensor::new(shape.to_vec(), symbols.iter().map(|&q| q as f64 * self.step).collect())
    }
}

/// Conditional Gaussian parameters for the prior symbols, shape `(C, K)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor64,
    pub sigma: Tensor64,
}

impl GaussianParams {
    pub fn new(mu: Tensor64, sigma: Tensor64, sigma_min: f64) -> Result<Self> {
        if !mu.same_shape(&sigma) {
            return Err(Error::ShapeMismatch {
                op: "gaussian_params",
                detail: format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            });
        }
        if sigma.data().iter().any(|&s| s < sigma_min) {
            return Err(Error::ShapeMismatch {
                op: "gaussian_params",
                detail: format!("sigma below floor {sigma_min}"),
            });
        }
        Ok(GaussianParams { mu, sigma })
    }
}

/// Channel-summary latents for one image: raw encoder output and its
/// test-mode grid values. Shape `(C/16, N)`; absent-class columns are zero
/// and never coded.
#[derive(Debug, Clone)]
pub struct Hyperprior {
    pub z: Tensor64,
    pub z_tilde: Tensor64,
}

/// Widths of the channel-mixing stacks. The encoder tapers C -> C/16 over
/// three layers; the decoder mirrors back and doubles for (mu, sigma).
#[derive(Debug, Clone, Copy)]
pub struct HyperNets {
    pub channels: usize,
}

impl HyperNets {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || channels % 16 != 0 {
            return Err(Error::ChannelsNotDivisible(channels));
        }
        Ok(HyperNets { channels })
    }

    pub fn summary_channels(&self) -> usize {
        self.channels / 16
    }

    fn encoder_widths(&self) -> [usize; 4] {
        let c = self.channels;
        [c, c / 2, c / 8, c / 16]
    }

    fn decoder_widths(&self) -> [usize; 4] {
        let c = self.channels;
        [c / 16, c / 8, c / 2, 2 * c]
    }

    /// He-normal weights. Hidden biases start slightly positive so the
    /// ReLU stacks pass gradient from the first step; stacks that start
    /// mostly dead leave the summary uninformative and the model stalls at
    /// the marginal rate.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore<f64>, rng: &mut R) {
        let std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let enc = self.encoder_widths();
        for l in 0..3 {
            store.insert(
                format!("henc.l{}.w", l + 1),
                Tensor::randn(&[enc[l + 1], enc[l]], std(enc[l]), rng),
            );
            let bias = if l < 2 { 0.1 } else { 0.0 };
            store.insert(format!("henc.l{}.b", l + 1), Tensor::full(&[enc[l + 1]], bias));
        }
        let dec = self.decoder_widths();
        for l in 0..3 {
            store.insert(
                format!("hdec.l{}.w", l + 1),
                Tensor::randn(&[dec[l + 1], dec[l]], std(dec[l]), rng),
            );
            if l < 2 {
                store.insert(format!("hdec.l{}.b", l + 1), Tensor::full(&[dec[l + 1]], 0.1));
            } else {
                // Mean head starts at zero; the scale head starts near the
                // coding scale (exp(-3) ~ 0.05) instead of exp(0) = 1.
                let c = self.channels;
                let mut b = Tensor::zeros(&[2 * c]);
                for v in b.data_mut()[c..].iter_mut() {
                    *v = -3.0;
                }
                store.insert(format!("hdec.l{}.b", l + 1), b);
            }
        }
    }

    /// Encoder subgraph: `(C, K)` -> `(C/16, K)`, ReLU between layers.
    pub fn build_encode(&self, g: &mut Graph<'_, f64>, t: NodeId) -> Result<NodeId> {
        if g.value(t).shape().len() != 2 || g.value(t).rows() != self.channels {
            return Err(Error::ShapeMismatch {
                op: "hyper_encode",
                detail: format!("expected ({}, K), got {:?}", self.channels, g.value(t).shape()),
            });
        }
        let mut h = t;
        for l in 1..=3 {
            let w = g.param(&format!("henc.l{l}.w"))?;
            let b = g.param(&format!("henc.l{l}.b"))?;
            h = g.mix(h, w, b)?;
            if l < 3 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Decoder subgraph: `(C/16, K)` -> `(mu (C,K), sigma (C,K))`. The scale
    /// head is exponential, clamped at `sigma_min`.
    pub fn build_decode(
        &self,
        g: &mut Graph<'_, f64>,
        z: NodeId,
        sigma_min: f64,
    ) -> Result<(NodeId, NodeId)> {
        if g.value(z).shape().len() != 2 || g.value(z).rows() != self.summary_channels() {
            return Err(Error::ShapeMismatch {
                op: "hyper_decode",
                detail: format!(
                    "expected ({}, K), got {:?}",
                    self.summary_channels(),
                    g.value(z).shape()
                ),
            });
        }
        let mut h = z;
        for l in 1..=3 {
            let w = g.param(&format!("hdec.l{l}.w"))?;
            let b = g.param(&format!("hdec.l{l}.b"))?;
            h = g.mix(h, w, b)?;
            if l < 3 {
                h = g.relu(h)?;
            }
        }
        let c = self.channels;
        let mu = g.slice_rows(h, 0, c)?;
        let log_sigma = g.slice_rows(h, c, c)?;
        let sigma_raw = g.exp(log_sigma)?;
        let sigma = g.clamp_min(sigma_raw, sigma_min)?;
        Ok((mu, sigma))
    }
}

/// Produces the channel summary for a prior. Absent-class columns come out
/// zero and are excluded from coding by the presence bitmap.
pub fn hyper_encode(
    prior: &SemanticPrior,
    params: &ParamStore<f64>,
    nets: &HyperNets,
    q: &Quantizer,
) -> Result<Hyperprior> {
    if prior.channels != nets.channels {
        return Err(Error::ShapeMismatch {
            op: "hyper_encode",
            detail: format!("prior C={} vs nets C={}", prior.channels, nets.channels),
        });
    }
    let selected = prior.present_columns();
    let mut g = Graph::new(params);
    let t = g.constant(selected);
    let z_sel = nets.build_encode(&mut g, t)?;
    let z_sel = g.value(z_sel).clone();

    // scatter back to (C/16, N) with zero columns for absent classes
    let (cz, n) = (nets.summary_channels(), prior.num_classes);
    let cols = prior.present_classes();
    let mut z = Tensor::zeros(&[cz, n]);
    for row in 0..cz {
        for (j, &col) in cols.iter().enumerate() {
            z.data_mut()[row * n + col] = z_sel.data()[row * cols.len() + j];
        }
    }
    let z_tilde = q.quantize_test(&z);
    Ok(Hyperprior { z, z_tilde })
}

/// Expands a quantized channel summary `(C/16, K)` into per-symbol Gaussian
/// parameters `(C, K)`.
pub fn hyper_decode(
    z_tilde: &Tensor64,
    params: &ParamStore<f64>,
    nets: &HyperNets,
    q: &Quantizer,
) -> Result<GaussianParams> {
    let mut g = Graph::new(params);
    let z = g.constant(z_tilde.clone());
    let (mu, sigma) = nets.build_decode(&mut g, z, q.sigma_min())?;
    GaussianParams::new(g.value(mu).clone(), g.value(sigma).clone(), q.sigma_min())
}

/// Probability mass of grid symbol `q` under a Gaussian with step `delta`.
#[inline]
pub fn gaussian_symbol_prob(q: i32, mu: f64, sigma: f64, delta: f64) -> f64 {
    let lo = (delta * (q as f64 - 0.5) - mu) / sigma;
    let hi = (delta * (q as f64 + 0.5) - mu) / sigma;
    scalar::std_normal_interval(lo, hi)
}

/// Interval mass around a continuous position (the training-time proxy).
#[inline]
pub fn gaussian_interval_prob(v: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    let lo = (v - 0.5 * delta - mu) / sigma;
    let hi = (v + 0.5 * delta - mu) / sigma;
    scalar::std_normal_interval(lo, hi)
}

/// Model probabilities and total bits for a symbol grid under conditional
/// Gaussians. Returned probabilities are unfloored; the bit count floors
/// them at 2^-40 before the log.
pub fn gaussian_bits(
    symbols: &[i32],
    gp: &GaussianParams,
    delta: f64,
) -> Result<(Vec<f64>, f64)> {
    if symbols.len() != gp.mu.len() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_bits",
            detail: format!("{} symbols vs {} params", symbols.len(), gp.mu.len()),
        });
    }
    let mut probs = Vec::with_capacity(symbols.len());
    let mut bits = 0.0;
    for (i, &q) in symbols.iter().enumerate() {
        let p = gaussian_symbol_prob(q, gp.mu.data()[i], gp.sigma.data()[i], delta);
        bits += scalar::neg_log2(p.max(PROB_FLOOR));
        probs.push(p);
    }
    Ok((probs, bits))
}

// -- learned factorized density ----------------------------------------------

const FD_FILTERS: usize = 3;
const FD_HIDDEN_LAYERS: usize = 3; // plus the sigmoid output layer: 4 composed maps

/// Per-channel monotone cumulative model. Parameters live in a
/// [`ParamStore`] under `{prefix}.c{channel}.*`; positivity of the mixing
/// weights comes from a softplus reparameterization and the gate slopes
/// stay in (-1, 1) via tanh, which makes the cumulative non-decreasing by
/// construction with limits 0 and 1.
#[derive(Debug, Clone)]
pub struct FactorizedDensity {
    pub channels: usize,
    pub prefix: String,
}

impl FactorizedDensity {
    pub fn new(channels: usize, prefix: impl Into<String>) -> Self {
        FactorizedDensity { channels, prefix: prefix.into() }
    }

    fn name(&self, ch: usize, part: &str) -> String {
        format!("{}.c{}.{}", self.prefix, ch, part)
    }

    /// Initializes the chain so the cumulative starts out roughly logistic
    /// with unit scale; biases get a small jitter to break filter symmetry.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore<f64>, rng: &mut R) {
        // With all gates at identity, the slope at zero is 9 w^4 for
        // per-layer softplus weight w; solve 9 w^4 * 3 = 1 for a unit scale.
        let w = (1.0 / 27.0f64).powf(0.25);
        let raw = scalar::softplus_inv(w);
        for ch in 0..self.channels {
            let dims = [
                (FD_FILTERS, 1),
                (FD_FILTERS, FD_FILTERS),
                (FD_FILTERS, FD_FILTERS),
                (1, FD_FILTERS),
            ];
            for (k, &(rows, cols)) in dims.iter().enumerate() {
                store.insert(
                    self.name(ch, &format!("h{}", k + 1)),
                    Tensor::full(&[rows, cols], raw),
                );
                let jitter: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() - 0.5).collect();
                store.insert(self.name(ch, &format!("b{}", k + 1)), Tensor::from_vec(jitter));
                if k < FD_HIDDEN_LAYERS {
                    store.insert(self.name(ch, &format!("a{}", k + 1)), Tensor::zeros(&[rows]));
                }
            }
        }
    }

    /// Pre-sigmoid logits of the cumulative for every element of
    /// `x (channels, K)`, evaluated with the chain of the element's row
    /// channel. Interval masses should be formed from logits via
    /// `sigmoid_interval` to keep tail precision.
    pub fn build_cdf_logits(&self, g: &mut Graph<'_, f64>, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "factorized_cdf",
                detail: format!("expected ({}, K), got {:?}", self.channels, shape),
            });
        }
        let mut rows: Vec<NodeId> = Vec::with_capacity(self.channels);
        for ch in 0..self.channels {
            let mut h = g.slice_rows(x, ch, 1)?;
            for k in 1..=FD_HIDDEN_LAYERS {
                let w_raw = g.param(&self.name(ch, &format!("h{k}")))?;
                let w = g.softplus(w_raw)?;
                let b = g.param(&self.name(ch, &format!("b{k}")))?;
                let pre = g.mix(h, w, b)?;
                let a_raw = g.param(&self.name(ch, &format!("a{k}")))?;
                let a = g.tanh(a_raw)?;
                let gated = g.tanh(pre)?;
                let gated = g.row_scale(gated, a)?;
                h = g.add(pre, gated)?;
            }
            let w_raw = g.param(&self.name(ch, "h4"))?;
            let w = g.softplus(w_raw)?;
            let b = g.param(&self.name(ch, "b4"))?;
            rows.push(g.mix(h, w, b)?);
        }
        let mut out = rows[0];
        for &r in &rows[1..] {
            out = g.concat_rows(out, r)?;
        }
        Ok(out)
    }

    /// Cumulative values in (0, 1).
    pub fn build_cdf(&self, g: &mut Graph<'_, f64>, x: NodeId) -> Result<NodeId> {
        let logits = self.build_cdf_logits(g, x)?;
        g.sigmoid(logits)
    }

    /// Plain cumulative evaluation (forward only).
    pub fn cdf(&self, x: &Tensor64, params: &ParamStore<f64>) -> Result<Tensor64> {
        let mut g = Graph::new(params);
        let xn = g.constant(x.clone());
        let c = self.build_cdf(&mut g, xn)?;
        Ok(g.value(c).clone())
    }
}

/// Model probabilities and total bits for a symbol grid under the
/// factorized density. Symbols are row-major over `(channels, K)`.
pub fn factorized_bits(
    symbols: &[i32],
    cols: usize,
    fd: &FactorizedDensity,
    params: &ParamStore<f64>,
    delta: f64,
) -> Result<(Vec<f64>, f64)> {
    if symbols.len() != fd.channels * cols {
        return Err(Error::ShapeMismatch {
            op: "factorized_bits",
            detail: format!("{} symbols vs ({}, {})", symbols.len(), fd.channels, cols),
        });
    }
    let shape = [fd.channels, cols];
    let hi = Tensor::new(
        shape.to_vec(),
        symbols.iter().map(|&q| delta * (q as f64 + 0.5)).collect(),
    )?;
    let lo = Tensor::new(
        shape.to_vec(),
        symbols.iter().map(|&q| delta * (q as f64 - 0.5)).collect(),
    )?;
    let mut g = Graph::new(params);
    let p = {
        let lo_n = g.constant(lo);
        let hi_n = g.constant(hi);
        let lo_logits = fd.build_cdf_logits(&mut g, lo_n)?;
        let hi_logits = fd.build_cdf_logits(&mut g, hi_n)?;
        g.sigmoid_interval(lo_logits, hi_logits)?
    };
    let mut probs = Vec::with_capacity(symbols.len());
    let mut bits = 0.0;
    for &p in g.value(p).data() {
        bits += scalar::neg_log2(p.max(PROB_FLOOR));
        probs.push(p);
    }
    Ok((probs, bits))
}

// -- differentiable rate ------------------------------------------------------

/// Scalar bit-count subgraph for continuous positions `v (C,K)` under
/// Gaussians `(mu, sigma)`.
pub fn build_gaussian_bits(
    g: &mut Graph<'_, f64>,
    v: NodeId,
    mu: NodeId,
    sigma: NodeId,
    delta: f64,
) -> Result<NodeId> {
    let half = 0.5 * delta;
    let hi = g.add_scalar(v, half)?;
    let hi = g.sub(hi, mu)?;
    let hi = g.div(hi, sigma)?;
    let lo = g.add_scalar(v, -half)?;
    let lo = g.sub(lo, mu)?;
    let lo = g.div(lo, sigma)?;
    let p = g.normal_interval(lo, hi)?;
    let p = g.clamp_min(p, PROB_FLOOR)?;
    let l = g.log2(p)?;
    let s = g.sum(l)?;
    g.scale(s, -1.0)
}

/// Scalar bit-count subgraph for continuous positions under the factorized
/// density.
pub fn build_factorized_bits(
    g: &mut Graph<'_, f64>,
    fd: &FactorizedDensity,
    v: NodeId,
    delta: f64,
) -> Result<NodeId> {
    let hi = g.add_scalar(v, 0.5 * delta)?;
    let lo = g.add_scalar(v, -0.5 * delta)?;
    let hi_logits = fd.build_cdf_logits(g, hi)?;
    let lo_logits = fd.build_cdf_logits(g, lo)?;
    let p = g.sigmoid_interval(lo_logits, hi_logits)?;
    let p = g.clamp_min(p, PROB_FLOOR)?;
    let l = g.log2(p)?;
    let s = g.sum(l)?;
    g.scale(s, -1.0)
}

/// Node handles produced by the differentiable rate pipeline.
pub struct RateNodes {
    pub t_tilde: NodeId,
    pub z_tilde: NodeId,
    pub prior_bits: NodeId,
    pub hyper_bits: NodeId,
    pub total_bits: NodeId,
}

/// Training-mode rate: noise-quantizes the prior and its channel summary,
/// then sums conditional-Gaussian bits and factorized bits. `t_clean` must
/// hold the present columns `(C, K)`. The same noisy `t_tilde` should feed
/// the decoder when reconstruction is trained jointly.
pub fn build_rate_train<R: Rng>(
    g: &mut Graph<'_, f64>,
    t_clean: NodeId,
    nets: &HyperNets,
    fd: &FactorizedDensity,
    q: &Quantizer,
    rng: &mut R,
) -> Result<RateNodes> {
    let z = nets.build_encode(g, t_clean)?;
    let zn = g.constant(q.noise(g.value(z).shape(), rng));
    let z_tilde = g.add(z, zn)?;
    let (mu, sigma) = nets.build_decode(g, z_tilde, q.sigma_min())?;
    let tn = g.constant(q.noise(g.value(t_clean).shape(), rng));
    let t_tilde = g.add(t_clean, tn)?;
    let prior_bits = build_gaussian_bits(g, t_tilde, mu, sigma, q.step())?;
    let hyper_bits = build_factorized_bits(g, fd, z_tilde, q.step())?;
    let total_bits = g.add(prior_bits, hyper_bits)?;
    Ok(RateNodes { t_tilde, z_tilde, prior_bits, hyper_bits, total_bits })
}

/// Same pipeline but with an externally provided noisy prior (used when the
/// reconstruction path already owns the noise draw).
pub fn build_rate_train_with_t_tilde<R: Rng>(
    g: &mut Graph<'_, f64>,
    t_clean: NodeId,
    t_tilde: NodeId,
    nets: &HyperNets,
    fd: &FactorizedDensity,
    q: &Quantizer,
    rng: &mut R,
) -> Result<RateNodes> {
    let z = nets.build_encode(g, t_clean)?;
    let zn = g.constant(q.noise(g.value(z).shape(), rng));
    let z_tilde = g.add(z, zn)?;
    let (mu, sigma) = nets.build_decode(g, z_tilde, q.sigma_min())?;
    let prior_bits = build_gaussian_bits(g, t_tilde, mu, sigma, q.step())?;
    let hyper_bits = build_factorized_bits(g, fd, z_tilde, q.step())?;
    let total_bits = g.add(prior_bits, hyper_bits)?;
    Ok(RateNodes { t_tilde, z_tilde, prior_bits, hyper_bits, total_bits })
}

/// Test-mode rate and symbols for the full coding pipeline.
#[derive(Debug, Clone)]
pub struct RateBreakdown {
    /// Row-major `(C, K)` grid indices of the quantized prior.
    pub t_symbols: Vec<i32>,
    /// Row-major `(C/16, K)` grid indices of the quantized summary.
    pub z_symbols: Vec<i32>,
    /// Gaussian parameters decoded from the quantized summary.
    pub gaussians: GaussianParams,
    pub prior_bits: f64,
    pub hyper_bits: f64,
    pub total_bits: f64,
}

/// Runs `t -> encode -> round z -> decode -> round t` and reports model
/// bits for both payloads. `t_selected` holds present columns `(C, K)`.
pub fn rate_test(
    t_selected: &Tensor64,
    params: &ParamStore<f64>,
    nets: &HyperNets,
    fd: &FactorizedDensity,
    q: &Quantizer,
) -> Result<RateBreakdown> {
    let cols = t_selected.cols();
    let mut g = Graph::new(params);
    let t = g.constant(t_selected.clone());
    let z = nets.build_encode(&mut g, t)?;
    let z = g.value(z).clone();
    let z_symbols = q.symbols(&z)?;
    let z_tilde = q.dequantize(&z_symbols, z.shape())?;
    let gaussians = hyper_decode(&z_tilde, params, nets, q)?;
    let t_symbols = q.symbols(t_selected)?;
    let (_, prior_bits) = gaussian_bits(&t_symbols, &gaussians, q.step())?;
    let (_, hyper_bits) = factorized_bits(&z_symbols, cols, fd, params, q.step())?;
    Ok(RateBreakdown {
        t_symbols,
        z_symbols,
        gaussians,
        prior_bits,
        hyper_bits,
        total_bits: prior_bits + hyper_bits,
    })
}

/// Evaluates the per-channel factorized cumulative on a 1-D grid for one
/// channel; used for table freezing and the monotonicity checks.
pub fn factorized_cdf_grid(
    fd: &FactorizedDensity,
    params: &ParamStore<f64>,
    channel: usize,
    xs: &[f64],
) -> Result<Vec<f64>> {
    // Evaluate via a single-channel view so other channels' params are not
    // touched: build a (channels, len) tensor where only `channel`'s row
    // matters and read that row back.
    let mut data = vec![0.0; fd.channels * xs.len()];
    data[channel * xs.len()..(channel + 1) * xs.len()].copy_from_slice(xs);
    let t = Tensor::new(vec![fd.channels, xs.len()], data)?;
    let c = fd.cdf(&t, params)?;
    Ok(c.data()[channel * xs.len()..(channel + 1) * xs.len()].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::forward_backward;
    use crate::image::SemanticMap;
    use crate::prior::pool_prior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantizer() -> Quantizer {
        Quantizer::new(0.01).unwrap()
    }

    #[test]
    fn rounding_definition_and_tie_rule() {
        let q = quantizer();
        let t = Tensor::from_vec(vec![0.0234, -0.005]);
        let r = q.quantize_test(&t);
        assert_eq!(r.data()[0], 0.02);
        assert_eq!(r.data()[1], -0.01); // half away from zero
    }

    #[test]
    fn train_noise_is_bounded_and_centered() {
        let q = quantizer();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = Tensor::<f64>::zeros(&[100_000]);
        let noisy = q.quantize_train(&t, &mut rng);
        let mut sum = 0.0;
        for &v in noisy.data() {
            assert!(v > -0.005 && v < 0.005, "noise out of range: {v}");
            sum += v;
        }
        let mean = sum / noisy.len() as f64;
        assert!(mean.abs() < 1e-4, "biased noise: {mean}");
    }

    #[test]
    fn invalid_step_rejected() {
        assert!(Quantizer::new(0.0).is_err());
        assert!(Quantizer::new(-1.0).is_err());
        assert!(Quantizer::new(f64::NAN).is_err());
    }

    fn full_prior(c: usize, n: usize, seed: u64) -> SemanticPrior {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SemanticPrior::new(Tensor::randn(&[c, n], 0.1, &mut rng), vec![true; n]).unwrap()
    }

    fn hyper_setup(c: usize, seed: u64) -> (ParamStore<f64>, HyperNets) {
        let nets = HyperNets::new(c).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nets.init_params(&mut store, &mut rng);
        store
            .get("henc.l1.w")
            .expect("params registered");
        (store, nets)
    }

    #[test]
    fn hyper_encode_shapes() {
        let (store, nets) = hyper_setup(64, 1);
        let prior = full_prior(64, 19, 2);
        let hp = hyper_encode(&prior, &store, &nets, &quantizer()).unwrap();
        assert_eq!(hp.z.shape(), &[4, 19]);
        assert_eq!(hp.z_tilde.shape(), &[4, 19]);
    }

    #[test]
    fn zero_prior_zero_bias_gives_zero_summary() {
        let (mut store, nets) = hyper_setup(32, 3);
        for l in 1..=3 {
            let name = format!("henc.l{l}.b");
            let zeros = Tensor::zeros(store.get(&name).unwrap().shape());
            *store.get_mut(&name).unwrap() = zeros;
        }
        let prior =
            SemanticPrior::new(Tensor::zeros(&[32, 5]), vec![true; 5]).unwrap();
        let hp = hyper_encode(&prior, &store, &nets, &quantizer()).unwrap();
        assert!(hp.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_regions_permutes_summary() {
        let (store, nets) = hyper_setup(32, 4);
        let prior = full_prior(32, 6, 5);
        let hp = hyper_encode(&prior, &store, &nets, &quantizer()).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let (c, n) = (32, 6);
        let mut permuted = Tensor::zeros(&[c, n]);
        for row in 0..c {
            for (j, &src) in perm.iter().enumerate() {
                permuted.data_mut()[row * n + j] = prior.vectors.data()[row * n + src];
            }
        }
        let prior_p = SemanticPrior::new(permuted, vec![true; n]).unwrap();
        let hp_p = hyper_encode(&prior_p, &store, &nets, &quantizer()).unwrap();
        for row in 0..nets.summary_channels() {
            for (j, &src) in perm.iter().enumerate() {
                assert_eq!(
                    hp_p.z.at2(row, j).to_bits(),
                    hp.z.at2(row, src).to_bits(),
                    "column permutation must commute with encoding"
                );
            }
        }
    }

    #[test]
    fn channels_must_divide_16() {
        assert!(HyperNets::new(60).is_err());
        assert!(HyperNets::new(64).is_ok());
    }

    #[test]
    fn decode_shapes_and_sigma_floor() {
        let (store, nets) = hyper_setup(64, 6);
        let q = quantizer();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::randn(&[4, 19], 1.0, &mut rng);
        let gp = hyper_decode(&z, &store, &nets, &q).unwrap();
        assert_eq!(gp.mu.shape(), &[64, 19]);
        assert_eq!(gp.sigma.shape(), &[64, 19]);
        assert!(gp.sigma.data().iter().all(|&s| s >= 0.001));
    }

    #[test]
    fn decode_is_region_local() {
        let (store, nets) = hyper_setup(32, 8);
        let q = quantizer();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[2, 5], 0.5, &mut rng);
        let base = hyper_decode(&z, &store, &nets, &q).unwrap();
        let mut z2 = z.clone();
        z2.set2(1, 3, z2.at2(1, 3) + 1.0);
        let bumped = hyper_decode(&z2, &store, &nets, &q).unwrap();
        for row in 0..32 {
            for col in 0..5 {
                let same_mu = base.mu.at2(row, col).to_bits() == bumped.mu.at2(row, col).to_bits();
                let same_sg =
                    base.sigma.at2(row, col).to_bits() == bumped.sigma.at2(row, col).to_bits();
                if col == 3 {
                    continue;
                }
                assert!(same_mu && same_sg, "column {col} changed");
            }
        }
    }

    #[test]
    fn gaussian_reference_value() {
        // mu=0, sigma=1, delta=1, q=0: mass of N(0,1) on [-1/2, 1/2]
        let p = gaussian_symbol_prob(0, 0.0, 1.0, 1.0);
        assert!((p - 0.382_924_922_548_026_2).abs() < 1e-12, "p = {p}");
        let bits = scalar::neg_log2(p);
        assert!((bits - 1.3848).abs() < 1e-4, "bits = {bits}");
    }

    #[test]
    fn gaussian_symmetry() {
        for q in [1i32, 3, 17, 400] {
            let a = gaussian_symbol_prob(q, 0.0, 0.7, 0.01);
            let b = gaussian_symbol_prob(-q, 0.0, 0.7, 0.01);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_mass_sums_to_one() {
        // Telescoping sum over a huge symbol range.
        let (mu, sigma, delta) = (0.0, 1.0, 1.0);
        let mut sum = 0.0;
        for q in -1_000_000i32..=1_000_000 {
            sum += gaussian_symbol_prob(q, mu, sigma, delta);
        }
        assert!(sum <= 1.0 + 1e-12 && sum >= 1.0 - 1e-9, "sum = {sum}");
    }

    fn fd_setup(channels: usize, seed: u64) -> (ParamStore<f64>, FactorizedDensity) {
        let fd = FactorizedDensity::new(channels, "pz");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fd.init_params(&mut store, &mut rng);
        (store, fd)
    }

    #[test]
    fn factorized_cdf_is_monotone_with_unit_limits() {
        let (store, fd) = fd_setup(2, 10);
        let delta = 0.01;
        let xs: Vec<f64> = (0..10_000).map(|i| -50.0 * delta + i as f64 * 0.01 * delta * 1000.0 / 1000.0).collect();
        for ch in 0..2 {
            let c = factorized_cdf_grid(&fd, &store, ch, &xs).unwrap();
            for w in c.windows(2) {
                assert!(w[1] >= w[0] - 1e-15, "cdf must be non-decreasing");
            }
            let lo = factorized_cdf_grid(&fd, &store, ch, &[-1e4 * delta]).unwrap()[0];
            let hi = factorized_cdf_grid(&fd, &store, ch, &[1e4 * delta]).unwrap()[0];
            assert!(lo < 1e-6, "lower limit {lo}");
            assert!(hi > 1.0 - 1e-6, "upper limit {hi}");
        }
    }

    #[test]
    fn factorized_probs_are_nonnegative() {
        let (store, fd) = fd_setup(3, 11);
        let symbols: Vec<i32> = (-30..30).flat_map(|q| [q, q, q]).collect();
        let cols = symbols.len() / 3;
        let reordered: Vec<i32> = (0..3)
            .flat_map(|ch| symbols.iter().skip(ch).step_by(3).copied().collect::<Vec<_>>())
            .collect();
        let (probs, bits) = factorized_bits(&reordered, cols, &fd, &store, 0.01).unwrap();
        assert!(probs.iter().all(|&p| p >= 0.0));
        assert!(bits.is_finite() && bits > 0.0);
    }

    #[test]
    fn rate_total_is_sum_of_parts() {
        let (mut store, nets) = hyper_setup(32, 12);
        let fd = FactorizedDensity::new(2, "pz");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        fd.init_params(&mut store, &mut rng);
        let t = Tensor::randn(&[32, 7], 0.05, &mut rng);
        let q = quantizer();
        let bd = rate_test(&t, &store, &nets, &fd, &q).unwrap();
        assert_eq!(bd.total_bits, bd.prior_bits + bd.hyper_bits);
        assert_eq!(bd.t_symbols.len(), 32 * 7);
        assert_eq!(bd.z_symbols.len(), 2 * 7);
    }

    #[test]
    fn shrinking_toward_means_never_costs_more() {
        // At fixed (mu, sigma), moving positions toward mu increases the
        // interval mass, so bits are non-increasing.
        let q = quantizer();
        let mu = 0.037;
        let sigma = 0.02;
        let v0 = 0.11;
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let alpha = 1.0 - i as f64 / 10.0;
            let v = mu + alpha * (v0 - mu);
            let p = gaussian_interval_prob(v, mu, sigma, q.step());
            let bits = scalar::neg_log2(p.max(PROB_FLOOR));
            assert!(bits <= last + 1e-12);
            last = bits;
        }
    }

    #[test]
    fn train_mode_rate_matches_test_mode_for_wide_sigma() {
        // Averaged over noise draws, train-mode bits at a bin center stay
        // within 2% of test-mode bits once sigma >= 5*delta.
        let q = quantizer();
        let (mu, sigma) = (0.0, 5.0 * q.step());
        let v = 3.0 * q.step(); // a bin center
        let test_bits = scalar::neg_log2(gaussian_symbol_prob(3, mu, sigma, q.step()).max(PROB_FLOOR));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut acc = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let u = (rng.random::<f64>() - 0.5) * q.step();
            let p = gaussian_interval_prob(v + u, mu, sigma, q.step());
            acc += scalar::neg_log2(p.max(PROB_FLOOR));
        }
        let train_bits = acc / draws as f64;
        let rel = (train_bits - test_bits).abs() / test_bits;
        assert!(rel < 0.02, "train {train_bits} vs test {test_bits} ({rel})");
    }

    #[test]
    fn absent_columns_contribute_zero_bits() {
        let (mut store, nets) = hyper_setup(32, 14);
        let fd = FactorizedDensity::new(2, "pz");
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        fd.init_params(&mut store, &mut rng);
        let q = quantizer();

        let mut vectors = Tensor::zeros(&[32, 4]);
        for row in 0..32 {
            vectors.set2(row, 1, 0.05 * ((row % 5) as f64 - 2.0));
        }
        let prior = SemanticPrior::new(vectors, vec![false, true, false, false]).unwrap();
        let sel = prior.present_columns();
        assert_eq!(sel.cols(), 1);
        let with_absent = rate_test(&sel, &store, &nets, &fd, &q).unwrap();
        // Coding only ever sees present columns; the absent ones add nothing.
        assert_eq!(with_absent.t_symbols.len(), 32);
        assert_eq!(with_absent.z_symbols.len(), 2);
    }

    #[test]
    fn rate_is_region_local() {
        let (mut store, nets) = hyper_setup(32, 16);
        let fd = FactorizedDensity::new(2, "pz");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        fd.init_params(&mut store, &mut rng);
        let q = quantizer();
        let t = Tensor::randn(&[32, 5], 0.05, &mut rng);
        let base = rate_test(&t, &store, &nets, &fd, &q).unwrap();

        let mut t2 = t.clone();
        t2.set2(4, 2, t2.at2(4, 2) + 0.4);
        let bumped = rate_test(&t2, &store, &nets, &fd, &q).unwrap();

        // Per-column bits of untouched regions are identical.
        for col in 0..5 {
            if col == 2 {
                continue;
            }
            for row in 0..32 {
                let i = row * 5 + col;
                let a =
                    gaussian_symbol_prob(base.t_symbols[i], base.gaussians.mu.data()[i], base.gaussians.sigma.data()[i], q.step());
                let b = gaussian_symbol_prob(
                    bumped.t_symbols[i],
                    bumped.gaussians.mu.data()[i],
                    bumped.gaussians.sigma.data()[i],
                    q.step(),
                );
                assert_eq!(a.to_bits(), b.to_bits(), "row {row} col {col}");
            }
        }
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let (mut store, nets) = hyper_setup(32, 18);
        let fd = FactorizedDensity::new(2, "pz");
        let mut seed_rng = ChaCha8Rng::seed_from_u64(19);
        fd.init_params(&mut store, &mut seed_rng);
        let q = quantizer();
        let t_val = Tensor::randn(&[32, 3], 0.05, &mut seed_rng);

        let eval = |store: &ParamStore<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            forward_backward(store, |g| {
                let t = g.constant(t_val.clone());
                let r = build_rate_train(g, t, &nets, &fd, &q, &mut rng)?;
                Ok(r.total_bits)
            })
            .unwrap()
        };

        let (_, grads) = eval(&store);
        let h = 1e-3;
        for name in ["hdec.l3.w", "henc.l1.w", "pz.c1.h2"] {
            let idx = 1;
            let analytic = grads.get(name).unwrap().data()[idx];
            let orig = store.get(name).unwrap().data()[idx];
            store.get_mut(name).unwrap().data_mut()[idx] = orig + h;
            let (lp, _) = eval(&store);
            store.get_mut(name).unwrap().data_mut()[idx] = orig - h;
            let (lm, _) = eval(&store);
            store.get_mut(name).unwrap().data_mut()[idx] = orig;
            let fd_grad = (lp - lm) / (2.0 * h);
            let rel = (analytic - fd_grad).abs() / analytic.abs().max(fd_grad.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}: analytic {analytic} vs fd {fd_grad} (rel {rel})");
        }
    }

    #[test]
    fn pooled_prior_plugs_into_rate() {
        let map = SemanticMap::new(4, 4, vec![0, 0, 1, 1].repeat(4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let features = Tensor::randn(&[32, 4, 4], 0.1, &mut rng);
        let prior = pool_prior(&features, &map).unwrap();
        let (mut store, nets) = hyper_setup(32, 21);
        let fd = FactorizedDensity::new(2, "pz");
        fd.init_params(&mut store, &mut rng);
        let bd = rate_test(&prior.present_columns(), &store, &nets, &fd, &quantizer()).unwrap();
        assert!(bd.total_bits.is_finite());
        assert_eq!(bd.t_symbols.len(), 32 * 2);
    }
}
