use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spcodec_core::image::SemanticMap;
use spcodec_core::{map_codec, synth};

fn bpp(map: &SemanticMap) -> f64 {
    map_codec::encode_map(map).len() as f64 * 8.0 / (map.width * map.height) as f64
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for classes in [19usize, 20] {
        let mut total = 0.0;
        for _ in 0..10 {
            let (_, map) = synth::generate_scene(256, 256, classes, &mut rng).unwrap();
            total += bpp(&map);
        }
        println!("lattice classes={classes}: {:.4} bpp", total / 10.0);
    }
    // four quadrants, N=19 universe
    let mut labels = vec![0u8; 256 * 256];
    for y in 0..256 {
        for x in 0..256 {
            labels[y * 256 + x] = match (y < 128, x < 128) {
                (true, true) => 0, (true, false) => 1,
                (false, true) => 2, (false, false) => 3,
            };
        }
    }
    let quad = SemanticMap::new(256, 256, labels, 19).unwrap();
    println!("four-quadrant: {:.4} bpp", bpp(&quad));
    // single vertical split
    let mut labels2 = vec![0u8; 256 * 256];
    for y in 0..256 { for x in 128..256 { labels2[y * 256 + x] = 1; } }
    let split = SemanticMap::new(256, 256, labels2, 19).unwrap();
    println!("vertical split: {:.4} bpp", bpp(&split));
}
