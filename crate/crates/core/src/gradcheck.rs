//! Central finite-difference verification of every operator's backward
//! pass, plus the composite rate and rate-distortion losses.
//!
//! Each check scalarizes the operator output with a random weighting,
//! computes analytic gradients, and compares them against central
//! differences at randomly probed input elements. The error measure is
//! `|a - f| / max(|a|, |f|, 1e-6)`; everything must stay at or below 1e-4
//! in 64-bit arithmetic.
//!
//! Operator checks use h = 1e-3 with probe inputs drawn away from the
//! kinks of relu/clamp so the difference quotient is valid. Composite
//! losses sweep thousands of ReLU preactivations when one early weight
//! moves, so a 1e-3 step almost always crosses some kink and the quotient
//! stops estimating the (correct, one-sided) derivative; those checks use
//! h = 3e-5, small enough to stay inside the smooth piece yet far above
//! f64 roundoff.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::container::ModelConfig;
use crate::entropy::{build_rate_train, FactorizedDensity, HyperNets, Quantizer};
use crate::error::Result;
use crate::graph::{forward_backward, Graph, NodeId};
use crate::image::{RegionIndex, SemanticMap};
use crate::optim::ParamStore;
use crate::prior::PipelineConfig;
use crate::synth;
use crate::tensor::Tensor;
use crate::trainer;
use crate::Tensor64;

pub const REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-3;
pub const COMPOSITE_FD_STEP: f64 = 3e-5;
const PROBES: usize = 10;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// How probe inputs for one operand are drawn.
#[derive(Clone, Copy)]
enum Draw {
    /// Standard normal.
    Normal,
    /// Uniform magnitude in [lo, hi] with random sign.
    AwayFromZero(f64, f64),
    /// Uniform in [lo, hi].
    Positive(f64, f64),
}

fn draw(rng: &mut ChaCha8Rng, how: Draw, shape: &[usize]) -> Tensor64 {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match how {
            Draw::Normal => {
                use rand_distr::{Distribution, StandardNormal};
                StandardNormal.sample(rng)
            }
            Draw::AwayFromZero(lo, hi) => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * (lo + (hi - lo) * rng.random::<f64>())
            }
            Draw::Positive(lo, hi) => lo + (hi - lo) * rng.random::<f64>(),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Checks one operator: `build` maps the bound input nodes to the output.
fn check_op<F>(
    name: &str,
    inputs: &[(&[usize], Draw)],
    rng: &mut ChaCha8Rng,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut store: ParamStore<f64> = ParamStore::new();
    for (i, (shape, how)) in inputs.iter().enumerate() {
        store.insert(format!("in{i}"), draw(rng, *how, shape));
    }

    // Learn the output shape, then scalarize with fixed random weights.
    let weights = {
        let mut g = Graph::new(&store);
        let nodes: Vec<NodeId> = (0..inputs.len())
            .map(|i| g.param(&format!("in{i}")))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &nodes)?;
        draw(rng, Draw::Normal, g.value(out).shape())
    };

    let eval = |store: &ParamStore<f64>| -> Result<(f64, crate::optim::Grads<f64>)> {
        forward_backward(store, |g| {
            let nodes: Vec<NodeId> = (0..inputs.len())
                .map(|i| g.param(&format!("in{i}")))
                .collect::<Result<_>>()?;
            let out = build(g, &nodes)?;
            let w = g.constant(weights.clone());
            let p = g.mul(out, w)?;
            g.sum(p)
        })
    };

    let (_, grads) = eval(&store)?;
    let mut max_err = 0.0f64;
    for _ in 0..PROBES {
        let input = rng.random_range(0..inputs.len());
        let pname = format!("in{input}");
        let len = store.get(&pname).unwrap().len();
        let idx = rng.random_range(0..len);
        let analytic = grads.get(&pname).unwrap().data()[idx];
        let orig = store.get(&pname).unwrap().data()[idx];
        store.get_mut(&pname).unwrap().data_mut()[idx] = orig + FD_STEP;
        let (lp, _) = eval(&store)?;
        store.get_mut(&pname).unwrap().data_mut()[idx] = orig - FD_STEP;
        let (lm, _) = eval(&store)?;
        store.get_mut(&pname).unwrap().data_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_err(analytic, fd));
    }
    Ok(GradCheckReport { name: name.to_string(), probes: PROBES, max_rel_err: max_err, pass: max_err <= REL_TOL })
}

/// Probes named parameters of a composite loss built on a real store.
fn check_composite<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    probe_params: &[&str],
    rng: &mut ChaCha8Rng,
    eval: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, crate::optim::Grads<f64>)>,
{
    let h = COMPOSITE_FD_STEP;
    let (_, grads) = eval(store)?;
    let mut max_err = 0.0f64;
    for probe in 0..PROBES {
        let pname = probe_params[probe % probe_params.len()];
        let len = store.get(pname).unwrap().len();
        let idx = rng.random_range(0..len);
        let analytic = grads.get(pname).unwrap().data()[idx];
        let orig = store.get(pname).unwrap().data()[idx];
        store.get_mut(pname).unwrap().data_mut()[idx] = orig + h;
        let (lp, _) = eval(store)?;
        store.get_mut(pname).unwrap().data_mut()[idx] = orig - h;
        let (lm, _) = eval(store)?;
        store.get_mut(pname).unwrap().data_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic, fd));
    }
    Ok(GradCheckReport { name: name.to_string(), probes: PROBES, max_rel_err: max_err, pass: max_err <= REL_TOL })
}

/// Runs the whole suite. Deterministic per seed.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let n = Draw::Normal;
    let shape2: &[usize] = &[3, 5];

    reports.push(check_op("add", &[(shape2, n), (shape2, n)], &mut rng, |g, i| g.add(i[0], i[1]))?);
    reports.push(check_op("sub", &[(shape2, n), (shape2, n)], &mut rng, |g, i| g.sub(i[0], i[1]))?);
    reports.push(check_op("mul", &[(shape2, n), (shape2, n)], &mut rng, |g, i| g.mul(i[0], i[1]))?);
    reports.push(check_op(
        "div",
        &[(shape2, n), (shape2, Draw::AwayFromZero(0.5, 1.5))],
        &mut rng,
        |g, i| g.div(i[0], i[1]),
    )?);
    reports.push(check_op("add_scalar", &[(shape2, n)], &mut rng, |g, i| g.add_scalar(i[0], 0.37))?);
    reports.push(check_op("scale", &[(shape2, n)], &mut rng, |g, i| g.scale(i[0], -1.7))?);
    reports.push(check_op(
        "relu",
        &[(shape2, Draw::AwayFromZero(0.05, 1.5))],
        &mut rng,
        |g, i| g.relu(i[0]),
    )?);
    reports.push(check_op("exp", &[(shape2, n)], &mut rng, |g, i| g.exp(i[0]))?);
    reports.push(check_op("softplus", &[(shape2, n)], &mut rng, |g, i| g.softplus(i[0]))?);
    reports.push(check_op("tanh", &[(shape2, n)], &mut rng, |g, i| g.tanh(i[0]))?);
    reports.push(check_op("sigmoid", &[(shape2, n)], &mut rng, |g, i| g.sigmoid(i[0]))?);
    reports.push(check_op("square", &[(shape2, n)], &mut rng, |g, i| g.square(i[0]))?);
    reports.push(check_op(
        "log2",
        &[(shape2, Draw::Positive(0.3, 2.0))],
        &mut rng,
        |g, i| g.log2(i[0]),
    )?);
    reports.push(check_op(
        "clamp_min",
        &[(shape2, Draw::AwayFromZero(0.31, 1.5))],
        &mut rng,
        |g, i| g.clamp_min(i[0], 0.3),
    )?);
    reports.push(check_op("normal_cdf", &[(shape2, n)], &mut rng, |g, i| g.normal_cdf(i[0]))?);
    reports.push(check_op(
        "normal_interval",
        &[(shape2, Draw::Positive(-8.0, 7.0)), (shape2, Draw::Positive(0.01, 1.0))],
        &mut rng,
        |g, i| {
            // hi = lo + width keeps the interval ordered
            let hi = g.add(i[0], i[1])?;
            g.normal_interval(i[0], hi)
        },
    )?);
    reports.push(check_op(
        "sigmoid_interval",
        &[(shape2, Draw::Positive(-12.0, 11.0)), (shape2, Draw::Positive(0.01, 1.0))],
        &mut rng,
        |g, i| {
            let hi = g.add(i[0], i[1])?;
            g.sigmoid_interval(i[0], hi)
        },
    )?);
    reports.push(check_op("sum", &[(shape2, n)], &mut rng, |g, i| g.sum(i[0]))?);
    reports.push(check_op("mean", &[(shape2, n)], &mut rng, |g, i| g.mean(i[0]))?);
    reports.push(check_op(
        "mix",
        &[(&[4, 6], n), (&[3, 4], n), (&[3], n)],
        &mut rng,
        |g, i| g.mix(i[0], i[1], i[2]),
    )?);
    reports.push(check_op(
        "conv3x3",
        &[(&[2, 5, 6], n), (&[3, 2, 3, 3], n), (&[3], n)],
        &mut rng,
        |g, i| g.conv3x3(i[0], i[1], i[2]),
    )?);

    let map = SemanticMap::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 2, 2], 4).unwrap();
    let idx = Rc::new(RegionIndex::new(&map));
    {
        let idx = Rc::clone(&idx);
        reports.push(check_op("pool_regions", &[(&[3, 4, 4], n)], &mut rng, move |g, i| {
            g.pool_regions(i[0], &idx)
        })?);
    }
    {
        let idx = Rc::clone(&idx);
        reports.push(check_op("broadcast_regions", &[(&[3, 4], n)], &mut rng, move |g, i| {
            g.broadcast_regions(i[0], &idx)
        })?);
    }
    reports.push(check_op(
        "concat_rows",
        &[(&[2, 5], n), (&[3, 5], n)],
        &mut rng,
        |g, i| g.concat_rows(i[0], i[1]),
    )?);
    reports.push(check_op("slice_rows", &[(&[5, 4], n)], &mut rng, |g, i| g.slice_rows(i[0], 1, 3))?);
    {
        let cols = Rc::new(vec![0usize, 2, 3]);
        reports.push(check_op("select_cols", &[(&[3, 5], n)], &mut rng, move |g, i| {
            g.select_cols(i[0], &cols)
        })?);
    }
    reports.push(check_op(
        "row_scale",
        &[(&[3, 5], n), (&[3], n)],
        &mut rng,
        |g, i| g.row_scale(i[0], i[1]),
    )?);
    reports.push(check_op("reshape", &[(&[3, 4], n)], &mut rng, |g, i| g.reshape(i[0], &[2, 6]))?);

    // Composite: factorized density bits.
    {
        let fd = FactorizedDensity::new(2, "pz");
        let quant = Quantizer::new(0.01)?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        fd.init_params(&mut store, &mut init_rng);
        let values = draw(&mut rng, Draw::AwayFromZero(0.001, 0.06), &[2, 9]);
        let probe = ["pz.c0.h1", "pz.c0.a2", "pz.c1.h4", "pz.c1.b2", "pz.c0.b1"];
        let fd_seed = seed ^ 2;
        let report = check_composite("factorized_bits", &mut store, &probe, &mut rng, |s| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(fd_seed);
            forward_backward(s, |g| {
                let v = g.constant(values.clone());
                let nz = g.constant(quant.noise(values.shape(), &mut noise_rng));
                let vt = g.add(v, nz)?;
                crate::entropy::build_factorized_bits(g, &fd, vt, quant.step())
            })
        })?;
        reports.push(report);
    }

    // Composite: full training-mode rate.
    {
        let nets = HyperNets::new(32)?;
        let fd = FactorizedDensity::new(2, "pz");
        let quant = Quantizer::new(0.01)?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        nets.init_params(&mut store, &mut init_rng);
        fd.init_params(&mut store, &mut init_rng);
        let t = draw(&mut rng, Draw::AwayFromZero(0.005, 0.08), &[32, 5]);
        let probe = ["henc.l1.w", "henc.l3.w", "hdec.l1.w", "hdec.l3.w", "pz.c0.h2", "hdec.l3.b"];
        let rate_seed = seed ^ 4;
        let report = check_composite("rate_train", &mut store, &probe, &mut rng, |s| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rate_seed);
            forward_backward(s, |g| {
                let tn = g.constant(t.clone());
                let r = build_rate_train(g, tn, &nets, &fd, &quant, &mut noise_rng)?;
                Ok(r.total_bits)
            })
        })?;
        reports.push(report);
    }

    // Composite: full rate-distortion loss on a 16x16 instance.
    {
        let cfg = ModelConfig { channels: 16, classes: 3, delta: 0.01, use_coords: true };
        let mut store = codec::init_params(&cfg, seed ^ 5)?;
        let nets = HyperNets::new(cfg.channels)?;
        let fd = FactorizedDensity::new(nets.summary_channels(), codec::SUMMARY_DENSITY_PREFIX);
        let pipeline = PipelineConfig { channels: cfg.channels, use_coords: true };
        let quant = Quantizer::new(cfg.delta)?;
        let mut scene_rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let (image, map) = synth::generate_scene(16, 16, 3, &mut scene_rng)?;
        let probe = [
            "tex.conv1.w",
            "tex.conv2.w",
            "syn.mix1.w",
            "syn.mix2.b",
            "henc.l2.w",
            "hdec.l3.w",
            "pz.c0.h3",
        ];
        let noise_seed = seed ^ 7;
        let report = check_composite("rd_loss", &mut store, &probe, &mut rng, |s| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let (parts, grads) = trainer::rd_loss(
                &image, &map, s, &nets, &fd, &pipeline, 1e-3, &quant, &mut noise_rng,
            )?;
            Ok((parts.loss, grads))
        })?;
        reports.push(report);
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        let reports = run_all(20260811).unwrap();
        assert!(reports.len() >= 28);
        for r in &reports {
            assert!(
                r.pass,
                "{} failed gradient check: max rel err {}",
                r.name, r.max_rel_err
            );
        }
    }
}
