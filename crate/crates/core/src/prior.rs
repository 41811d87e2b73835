//! Semantic prior extraction, broadcasting, synthesis, and region swaps.
//!
//! The feature extractor is two 3x3 convolutions with a ReLU between
//! (3 -> 32 -> C, reflect padding, full resolution). The synthesizer mixes
//! the broadcast prior, optionally concatenated with two normalized
//! coordinate channels, through two 1x1 layers (C+2 -> 32 -> 3). Pooling
//! and broadcasting are exact per-region means and fills.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::{Image, RegionIndex, SemanticMap};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::Tensor64;

/// Smallest image edge the extractor accepts.
pub const MIN_IMAGE_DIM: usize = 8;

const TEX_HIDDEN: usize = 32;
const SYN_HIDDEN: usize = 32;

/// Per-region latent vectors: column `n` is the texture code of class `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrior {
    pub channels: usize,
    pub num_classes: usize,
    /// `(C, N)`; columns of absent classes are all-zero.
    pub vectors: Tensor64,
    /// `presence[n]` is false iff class `n` covers zero pixels.
    pub presence: Vec<bool>,
}

impl SemanticPrior {
    pub fn new(vectors: Tensor64, presence: Vec<bool>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.cols() != presence.len() {
            return Err(Error::ShapeMismatch {
                op: "semantic_prior",
                detail: format!("{:?} with {} presence flags", vectors.shape(), presence.len()),
            });
        }
        Ok(SemanticPrior {
            channels: vectors.rows(),
            num_classes: vectors.cols(),
            vectors,
            presence,
        })
    }

    /// Indices of present classes, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&n| self.presence[n]).collect()
    }

    /// The `(C, K)` submatrix of present columns, in ascending class order.
    pub fn present_columns(&self) -> Tensor64 {
        let cols = self.present_classes();
        let (c, n) = (self.channels, self.num_classes);
        let mut data = Vec::with_capacity(c * cols.len());
        for row in 0..c {
            for &col in &cols {
                data.push(self.vectors.data()[row * n + col]);
            }
        }
        Tensor::new(vec![c, cols.len()], data).expect("consistent shape")
    }

    /// Rebuilds a full `(C, N)` prior from present columns.
    pub fn from_present_columns(
        selected: &Tensor64,
        presence: Vec<bool>,
    ) -> Result<Self> {
        let cols: Vec<usize> = (0..presence.len()).filter(|&n| presence[n]).collect();
        if selected.shape().len() != 2 || selected.cols() != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "semantic_prior",
                detail: format!("{:?} for {} present classes", selected.shape(), cols.len()),
            });
        }
        let (c, n) = (selected.rows(), presence.len());
        let mut vectors = Tensor::zeros(&[c, n]);
        for row in 0..c {
            for (j, &col) in cols.iter().enumerate() {
                vectors.data_mut()[row * n + col] = selected.data()[row * cols.len() + j];
            }
        }
        SemanticPrior::new(vectors, presence)
    }
}

/// Architecture knobs shared by the extractor and synthesizer.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Texture channels C.
    pub channels: usize,
    /// Feed normalized (x, y) channels to the synthesizer. With this off,
    /// the output within one region is spatially constant.
    pub use_coords: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { channels: 64, use_coords: true }
    }
}

/// He-normal initialization of extractor and synthesizer parameters.
/// The extractor's output layer starts 10x narrower than plain He so the
/// pooled prior is born near the coding scale the quantizer expects;
/// starting an order of magnitude too wide wastes most of the rate
/// schedule just shrinking the latents.
pub fn init_texsyn_params<R: Rng>(store: &mut ParamStore<f64>, cfg: &PipelineConfig, rng: &mut R) {
    let c = cfg.channels;
    let conv_std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    store.insert(
        "tex.conv1.w",
        Tensor::randn(&[TEX_HIDDEN, 3, 3, 3], conv_std(3 * 9), rng),
    );
    store.insert("tex.conv1.b", Tensor::zeros(&[TEX_HIDDEN]));
    store.insert(
        "tex.conv2.w",
        Tensor::randn(&[c, TEX_HIDDEN, 3, 3], 0.1 * conv_std(TEX_HIDDEN * 9), rng),
    );
    store.insert("tex.conv2.b", Tensor::zeros(&[c]));
    store.insert(
        "syn.mix1.w",
        Tensor::randn(&[SYN_HIDDEN, c + 2], conv_std(c + 2), rng),
    );
    store.insert("syn.mix1.b", Tensor::zeros(&[SYN_HIDDEN]));
    store.insert("syn.mix2.w", Tensor::randn(&[3, SYN_HIDDEN], conv_std(SYN_HIDDEN), rng));
    store.insert("syn.mix2.b", Tensor::zeros(&[3]));
}

/// Extractor subgraph: image `(3,H,W)` -> features `(C,H,W)`.
pub fn build_extract(g: &mut Graph<'_, f64>, image: NodeId) -> Result<NodeId> {
    let w1 = g.param("tex.conv1.w")?;
    let b1 = g.param("tex.conv1.b")?;
    let w2 = g.param("tex.conv2.w")?;
    let b2 = g.param("tex.conv2.b")?;
    let h = g.conv3x3(image, w1, b1)?;
    let h = g.relu(h)?;
    g.conv3x3(h, w2, b2)
}

/// Synthesizer subgraph: prior `(C,N)` -> image tensor `(3,H,W)`.
/// The output is raw (unclamped); clamping happens when an [`Image`] is
/// materialized so training gradients stay alive outside `[0,1]`.
pub fn build_synthesize(
    g: &mut Graph<'_, f64>,
    prior: NodeId,
    idx: &Rc<RegionIndex>,
    cfg: &PipelineConfig,
) -> Result<NodeId> {
    let (h, w) = (idx.height, idx.width);
    let feat = g.broadcast_regions(prior, idx)?;
    let flat = g.reshape(feat, &[g.value(feat).shape()[0], h * w])?;
    let coords = g.constant(coord_channels(h, w, cfg.use_coords));
    let stacked = g.concat_rows(flat, coords)?;
    let w1 = g.param("syn.mix1.w")?;
    let b1 = g.param("syn.mix1.b")?;
    let w2 = g.param("syn.mix2.w")?;
    let b2 = g.param("syn.mix2.b")?;
    let hid = g.mix(stacked, w1, b1)?;
    let hid = g.relu(hid)?;
    let out = g.mix(hid, w2, b2)?;
    g.reshape(out, &[3, h, w])
}

/// Two rows of normalized pixel coordinates (x then y), or zeros when
/// coordinates are disabled.
pub fn coord_channels(height: usize, width: usize, enabled: bool) -> Tensor64 {
    let mut t = Tensor::zeros(&[2, height * width]);
    if enabled {
        let (dx, dy) = (
            if width > 1 { 1.0 / (width - 1) as f64 } else { 0.0 },
            if height > 1 { 1.0 / (height - 1) as f64 } else { 0.0 },
        );
        for y in 0..height {
            for x in 0..width {
                t.data_mut()[y * width + x] = x as f64 * dx;
                t.data_mut()[height * width + y * width + x] = y as f64 * dy;
            }
        }
    }
    t
}

/// Runs the feature extractor. Output spatial size equals the input's.
pub fn extract_features(
    image: &Image,
    params: &ParamStore<f64>,
    _cfg: &PipelineConfig,
) -> Result<Tensor64> {
    if image.width < MIN_IMAGE_DIM || image.height < MIN_IMAGE_DIM {
        return Err(Error::UndersizedImage {
            width: image.width,
            height: image.height,
            min: MIN_IMAGE_DIM,
        });
    }
    let mut g = Graph::new(params);
    let x = g.constant(image.tensor().clone());
    let f = build_extract(&mut g, x)?;
    Ok(g.value(f).clone())
}

/// Semantic-wise average pooling: `vectors[c][n]` is the mean of feature
/// channel `c` over the pixels of class `n`. Absent classes get a zero
/// column and `presence = false`.
pub fn pool_prior(features: &Tensor64, map: &SemanticMap) -> Result<SemanticPrior> {
    let s = features.shape();
    if s.len() != 3 || s[1] != map.height || s[2] != map.width {
        return Err(Error::ShapeMismatch {
            op: "pool_prior",
            detail: format!("features {:?} vs map {}x{}", s, map.width, map.height),
        });
    }
    let (c, hw, n) = (s[0], map.width * map.height, map.num_classes());
    let counts = map.class_counts();
    let mut vectors = Tensor::zeros(&[c, n]);
    for ch in 0..c {
        let plane = &features.data()[ch * hw..(ch + 1) * hw];
        let row = &mut vectors.data_mut()[ch * n..(ch + 1) * n];
        for (p, &l) in map.labels().iter().enumerate() {
            row[l as usize] += plane[p];
        }
        for (cls, v) in row.iter_mut().enumerate() {
            if counts[cls] > 0 {
                *v /= counts[cls] as f64;
            } else {
                *v = 0.0;
            }
        }
    }
    let presence = counts.iter().map(|&k| k > 0).collect();
    SemanticPrior::new(vectors, presence)
}

/// Fills every pixel of class `n` with prior column `n`: `(C,N)` -> `(C,H,W)`.
pub fn broadcast_prior(prior: &SemanticPrior, map: &SemanticMap) -> Result<Tensor64> {
    if prior.num_classes != map.num_classes() {
        return Err(Error::ClassCountMismatch {
            prior: prior.num_classes,
            map: map.num_classes(),
        });
    }
    let (c, n) = (prior.channels, prior.num_classes);
    let hw = map.width * map.height;
    let mut out = Tensor::zeros(&[c, map.height, map.width]);
    for ch in 0..c {
        let row = &prior.vectors.data()[ch * n..(ch + 1) * n];
        let plane = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        for (p, &l) in map.labels().iter().enumerate() {
            plane[p] = row[l as usize];
        }
    }
    Ok(out)
}

/// Decodes an image from a prior and its map. Deterministic given params.
pub fn synthesize(
    prior: &SemanticPrior,
    map: &SemanticMap,
    params: &ParamStore<f64>,
    cfg: &PipelineConfig,
) -> Result<Image> {
    if prior.num_classes != map.num_classes() {
        return Err(Error::ClassCountMismatch {
            prior: prior.num_classes,
            map: map.num_classes(),
        });
    }
    let idx = Rc::new(RegionIndex::new(map));
    let mut g = Graph::new(params);
    let p = g.constant(prior.vectors.clone());
    let out = build_synthesize(&mut g, p, &idx, cfg)?;
    Image::from_tensor(g.value(out).clone())
}

/// Replaces column `class_id` of `prior` with the same column of
/// `reference`. The reference class must be present.
pub fn swap_region_prior(
    prior: &SemanticPrior,
    reference: &SemanticPrior,
    class_id: usize,
) -> Result<SemanticPrior> {
    if prior.channels != reference.channels || prior.num_classes != reference.num_classes {
        return Err(Error::ShapeMismatch {
            op: "swap_region_prior",
            detail: format!(
                "({},{}) vs ({},{})",
                prior.channels, prior.num_classes, reference.channels, reference.num_classes
            ),
        });
    }
    if class_id >= prior.num_classes {
        return Err(Error::AbsentClass(class_id));
    }
    if !reference.presence[class_id] {
        return Err(Error::AbsentClass(class_id));
    }
    let mut out = prior.clone();
    let n = prior.num_classes;
    for ch in 0..prior.channels {
        out.vectors.data_mut()[ch * n + class_id] = reference.vectors.data()[ch * n + class_id];
    }
    out.presence[class_id] = prior.presence[class_id] || reference.presence[class_id];
    Ok(out)
}
