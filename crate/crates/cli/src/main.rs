//! Command-line frontend for the semantic-prior codec.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 internal invariant violation (non-finite values, failed gradient
//! checks).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spcodec_core::codec::Codec;
use spcodec_core::image::{Image, SemanticMap};
use spcodec_core::prior::swap_region_prior;
use spcodec_core::{analysis, gradcheck, synth, trainer, Error};

#[derive(Parser)]
#[command(name = "spcodec", version, about = "Semantic-prior conceptual image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate piecewise-textured scenes with paired label maps.
    SynthData {
        /// Output directory for scene_XXX.ppm / scene_XXX.pgm pairs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the best-loss checkpoint (.spm).
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode an image and its label map into a .spc container.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a container back to an image, optionally replacing one
    /// region's texture code with the one from a reference container.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class whose texture code is replaced.
        #[arg(long, requires = "reference")]
        swap_region: Option<usize>,
        /// Reference container supplying the replacement code.
        #[arg(long = "ref", requires = "swap_region")]
        reference: Option<PathBuf>,
    },
    /// Report per-segment sizes and, with a model, full bit accounting.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Emit CSV instead of text.
        #[arg(long, default_value_t = false)]
        csv: bool,
    },
    /// Train the cross-channel and factorized-only entropy models on
    /// synthetic correlated priors and print the bits comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run all finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pearson correlation among prior channels of one class across a
    /// dataset, exported as CSV and a PGM heatmap.
    AnalyzeCorr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class_id: usize,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_pgm: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output goes to stdout with success.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::SynthData { out, count, size, classes, seed } => {
            let pairs = synth::write_dataset(&out, count, size, classes, seed)?;
            println!("wrote {} scene pairs to {}", pairs.len(), out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = trainer::parse_config(&text)?;
            let outcome = trainer::train(&cfg, true)?;
            spcodec_core::container::save_model(&out, &outcome.config, &outcome.best_params)?;
            let last = outcome.logs.last().expect("at least one epoch");
            println!(
                "trained {} epochs; best epoch {}; final loss {:.4}; model -> {}",
                outcome.logs.len(),
                outcome.best_epoch,
                last.mean_loss,
                out.display()
            );
            Ok(())
        }
        Command::Encode { model, image, map, out } => {
            let codec = Codec::load(&model)?;
            let img = Image::load_ppm(&image)?;
            let map = SemanticMap::load_pgm(&map, codec.cfg.classes)?;
            let encoded = codec.encode(&img, &map)?;
            std::fs::write(&out, &encoded.bytes)?;
            let seg = analysis::SegmentReport::from_stats(&encoded.stats);
            print!("{}", analysis::render_report_text(&seg, Some(&encoded.stats)));
            Ok(())
        }
        Command::Decode { model, input, out, swap_region, reference } => {
            let codec = Codec::load(&model)?;
            let bytes = std::fs::read(&input)?;
            let decoded = match (swap_region, reference) {
                (Some(class_id), Some(ref_path)) => {
                    let ref_bytes = std::fs::read(&ref_path)?;
                    codec.decode_with_swap(&bytes, &ref_bytes, class_id)?
                }
                _ => codec.decode(&bytes)?,
            };
            decoded.image.save_ppm(&out)?;
            println!("decoded {} -> {}", input.display(), out.display());
            Ok(())
        }
        Command::Inspect { input, model, csv } => {
            let bytes = std::fs::read(&input)?;
            let codec = model.map(|m| Codec::load(&m)).transpose()?;
            let (seg, stats) = analysis::rate_report(&bytes, codec.as_ref())?;
            if csv {
                print!("{}", analysis::render_report_csv(&seg, stats.as_ref()));
            } else {
                print!("{}", analysis::render_report_text(&seg, stats.as_ref()));
            }
            Ok(())
        }
        Command::Ablate { config } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = trainer::parse_ablation_config(&text)?;
            let report = trainer::run_ablation(&cfg, true)?;
            println!(
                "cross-channel model: {:.1} bits/sample ({:.1} prior + {:.1} summary)",
                report.hyper_total_bits, report.hyper_prior_bits, report.hyper_summary_bits
            );
            println!("factorized-only model: {:.1} bits/sample", report.factorized_bits);
            println!("bits saving: {:.1}%", 100.0 * report.saving_fraction);
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let reports = gradcheck::run_all(seed)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{} {:<18} max rel err {:.3e} ({} probes)",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.probes
                );
                all_pass &= r.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::InvariantViolation(
                    "gradient checks exceeded the 1e-4 tolerance".into(),
                ))
            }
        }
        Command::AnalyzeCorr { model, data, class_id, images, out_csv, out_pgm } => {
            let codec = Codec::load(&model)?;
            let matrix = analysis::channel_correlation(
                &data,
                &codec.params,
                codec.pipeline_config(),
                codec.cfg.classes,
                class_id,
                images,
            )?;
            println!(
                "class {class_id}: mean |off-diagonal correlation| = {:.4}",
                analysis::mean_abs_off_diagonal(&matrix)
            );
            if let Some(path) = out_csv {
                std::fs::write(&path, analysis::matrix_to_csv(&matrix))?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = out_pgm {
                std::fs::write(&path, analysis::matrix_to_pgm(&matrix))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
