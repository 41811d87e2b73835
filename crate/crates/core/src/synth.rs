//! Synthetic piecewise-textured scenes with paired label maps.
//!
//! Regions come from a Voronoi partition under the Chebyshev metric with
//! seeds on a jittered lattice, which yields mostly axis-aligned region
//! boundaries (cheap for the context-model map coder while still varied).
//! Each region gets a base color plus a few low-amplitude sinusoids as
//! texture. Every class is guaranteed at least one pixel: each seed wins
//! itself.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, SemanticMap};
use crate::tensor::Tensor;

const WAVES_PER_CHANNEL: usize = 2;

/// One scene: textured image plus its label map.
pub fn generate_scene<R: Rng>(
    width: usize,
    height: usize,
    classes: usize,
    rng: &mut R,
) -> Result<(Image, SemanticMap)> {
    if classes == 0 || classes > 255 {
        return Err(Error::InvalidMap(format!("class count {classes} out of range")));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidMap("zero-sized scene".into()));
    }

    // Jittered lattice seeds on integer pixel coordinates, one per class.
    // Integer seeds keep the Chebyshev boundaries straight (axis-aligned
    // runs with short diagonal corners) instead of pixel-ragged.
    let grid_w = (classes as f64 * width as f64 / height as f64).sqrt().ceil() as usize;
    let grid_w = grid_w.max(1);
    let grid_h = classes.div_ceil(grid_w);
    let cell_w = width as f64 / grid_w as f64;
    let cell_h = height as f64 / grid_h as f64;
    // Jitter stays small relative to the cell, and distances are measured
    // in cell units per axis. Both choices keep the region boundaries
    // mostly axis-aligned; diagonal boundary pixels are the expensive ones
    // for the (left, above) map coder.
    let mut seeds = Vec::with_capacity(classes);
    for i in 0..classes {
        let gx = i % grid_w;
        let gy = i / grid_w;
        let jx = (rng.random::<f64>() - 0.5) * 0.0625 * cell_w;
        let jy = (rng.random::<f64>() - 0.5) * 0.0625 * cell_h;
        let sx = ((gx as f64 + 0.5) * cell_w + jx).round().clamp(0.0, (width - 1) as f64);
        let sy = ((gy as f64 + 0.5) * cell_h + jy).round().clamp(0.0, (height - 1) as f64);
        seeds.push((sx, sy));
    }

    let mut labels = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(sx, sy)) in seeds.iter().enumerate() {
                let d = ((x as f64 - sx).abs() / cell_w).max((y as f64 - sy).abs() / cell_h);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labels[y * width + x] = best as u8;
        }
    }
    // Each seed owns its own pixel, so every class is present.
    for (i, &(sx, sy)) in seeds.iter().enumerate() {
        labels[sy.round() as usize * width + sx.round() as usize] = i as u8;
    }
    let map = SemanticMap::new(width, height, labels, classes)?;

    // Per-region texture: base color plus a couple of sinusoids.
    struct RegionTexture {
        base: [f64; 3],
        waves: [[(f64, f64, f64, f64); WAVES_PER_CHANNEL]; 3], // (amp, fx, fy, phase)
    }
    let textures: Vec<RegionTexture> = (0..classes)
        .map(|_| {
            let base = [
                0.15 + 0.7 * rng.random::<f64>(),
                0.15 + 0.7 * rng.random::<f64>(),
                0.15 + 0.7 * rng.random::<f64>(),
            ];
            let mut waves = [[(0.0, 0.0, 0.0, 0.0); WAVES_PER_CHANNEL]; 3];
            for channel in waves.iter_mut() {
                for wave in channel.iter_mut() {
                    let amp = 0.02 + 0.04 * rng.random::<f64>();
                    let fx = (1.0 + 5.0 * rng.random::<f64>()) * std::f64::consts::TAU
                        / width.max(2) as f64;
                    let fy = (1.0 + 5.0 * rng.random::<f64>()) * std::f64::consts::TAU
                        / height.max(2) as f64;
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    *wave = (amp, fx, fy, phase);
                }
            }
            RegionTexture { base, waves }
        })
        .collect();

    let mut data = vec![0.0f64; 3 * width * height];
    for y in 0..height {
        for x in 0..width {
            let t = &textures[map.label(y, x) as usize];
            for c in 0..3 {
                let mut v = t.base[c];
                for &(amp, fx, fy, phase) in &t.waves[c] {
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                data[(c * height + y) * width + x] = v;
            }
        }
    }
    let image = Image::from_tensor(Tensor::new(vec![3, height, width], data)?)?;
    Ok((image, map))
}

/// Writes `count` scenes as `scene_XXX.ppm` / `scene_XXX.pgm` pairs.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let (image, map) = generate_scene(size, size, classes, &mut rng)?;
        let ppm = dir.join(format!("scene_{i:03}.ppm"));
        let pgm = dir.join(format!("scene_{i:03}.pgm"));
        image.save_ppm(&ppm)?;
        map.save_pgm(&pgm)?;
        pairs.push((ppm, pgm));
    }
    Ok(pairs)
}

/// Lists `(image, map)` pairs in a dataset directory, sorted by name.
pub fn list_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("ppm"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    Ok(stems
        .into_iter()
        .map(|s| (dir.join(format!("{s}.ppm")), dir.join(format!("{s}.pgm"))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_classes_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, map) = generate_scene(64, 64, 19, &mut rng).unwrap();
        let counts = map.class_counts();
        assert!(counts.iter().all(|&c| c > 0), "missing classes: {counts:?}");
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let (img_a, map_a) = generate_scene(32, 24, 7, &mut a).unwrap();
        let (img_b, map_b) = generate_scene(32, 24, 7, &mut b).unwrap();
        assert_eq!(map_a, map_b);
        assert_eq!(img_a, img_b);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join("spcodec-synth-test");
        std::fs::remove_dir_all(&dir).ok();
        let pairs = write_dataset(&dir, 3, 16, 5, 1).unwrap();
        assert_eq!(pairs.len(), 3);
        let listed = list_pairs(&dir).unwrap();
        assert_eq!(listed, pairs);
        let map = SemanticMap::load_pgm(&pairs[0].1, 5).unwrap();
        assert_eq!(map.width, 16);
        std::fs::remove_dir_all(&dir).ok();
    }
}
