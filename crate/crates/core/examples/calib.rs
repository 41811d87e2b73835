use spcodec_core::codec::Codec;
use spcodec_core::synth;
use spcodec_core::trainer::{train, TrainConfig};
use spcodec_core::image::{Image, SemanticMap};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let dir = std::env::temp_dir().join("spcodec-e2e-calib");
    std::fs::remove_dir_all(&dir).ok();
    let t0 = Instant::now();
    synth::write_dataset(&dir, 20, 256, 19, 7).unwrap();
    println!("dataset: {:?}", t0.elapsed());

    let cfg = TrainConfig {
        channels: 64, classes: 19, delta: 0.01,
        lambda, lr, epochs, seed: 1, dataset: dir.clone(),
        use_coords: true,
    };
    let t1 = Instant::now();
    let out = train(&cfg, true).unwrap();
    println!("train: {:?} (best epoch {})", t1.elapsed(), out.best_epoch);

    let trained = Codec::new(out.config, out.best_params).unwrap();
    let untrained = Codec::init(out.config, cfg.seed).unwrap();

    let t2 = Instant::now();
    let pairs = synth::list_pairs(&dir).unwrap();
    let mut bpp_tot = 0.0; let mut bpp_tex = 0.0; let mut bpp_map = 0.0;
    let mut mse_tr = 0.0; let mut mse_un = 0.0;
    for (ppm, pgm) in &pairs {
        let img = Image::load_ppm(ppm).unwrap();
        let map = SemanticMap::load_pgm(pgm, 19).unwrap();
        let enc = trained.encode(&img, &map).unwrap();
        let dec = trained.decode(&enc.bytes).unwrap();
        mse_tr += img.mse(&dec.image).unwrap();
        let enc_u = untrained.encode(&img, &map).unwrap();
        let dec_u = untrained.decode(&enc_u.bytes).unwrap();
        mse_un += img.mse(&dec_u.image).unwrap();
        let s = &enc.stats;
        bpp_tot += s.bpp_total();
        bpp_tex += s.bpp_of(s.hyper_bytes + s.prior_bytes);
        bpp_map += s.bpp_of(s.map_bytes);
    }
    let n = pairs.len() as f64;
    println!("encode+decode both models: {:?}", t2.elapsed());
    println!(
        "bpp total {:.4} texture {:.4} map {:.4} | mse trained {:.5} untrained {:.5} | total {:?}",
        bpp_tot / n, bpp_tex / n, bpp_map / n, mse_tr / n, mse_un / n, t0.elapsed()
    );
}
