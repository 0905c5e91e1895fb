//! `defilter`: corpus generation, training, filter removal, evaluation and
//! residual maps.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use defilter_core::dataset::{generate_corpus, load_source_dir, procedural_sources, CorpusManifest, CorpusOptions, Split};
use defilter_core::filter_bank::{bank_from_toml, builtin_filter_bank};
use defilter_core::image::Image;
use defilter_core::metrics::residual_image;
use defilter_core::trainer::{evaluate_checkpoint, load_model, resume, train};
use defilter_core::{Error, Result};

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "defilter", version, about = "Remove photo filters with patch-wise contrastive style learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for single-image commands).
    #[arg(long, short = 'o', value_name = "PATH")]
    out: Option<PathBuf>,
    /// Compute device. Only the CPU backend exists.
    #[arg(long, default_value = "cpu", value_parser = ["cpu"])]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a paired corpus by applying the filter bank to source images.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Directory of source images; procedural textures when omitted.
        #[arg(long, value_name = "DIR")]
        sources: Option<PathBuf>,
        /// Number of procedural sources when `--sources` is absent.
        #[arg(long)]
        count: Option<usize>,
        /// Side length of the stored square images.
        #[arg(long)]
        image_size: Option<usize>,
        /// Fraction of sources assigned to the train split.
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Filter bank TOML; the built-in 16-filter bank when omitted.
        #[arg(long, value_name = "FILE")]
        bank: Option<PathBuf>,
    },
    /// Train on a corpus, writing the loss log, checkpoints and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus root (directory containing the manifest).
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Total number of training steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Training resolution.
        #[arg(long)]
        image_size: Option<usize>,
        /// Disable the style contrastive term.
        #[arg(long)]
        no_style_nce: bool,
        /// Disable the identity regularizer.
        #[arg(long)]
        no_id_reg: bool,
        /// Disable the consistency loss.
        #[arg(long)]
        no_consistency: bool,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Remove the filter from one image.
    Remove {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        image: PathBuf,
    },
    /// Score a checkpoint on a corpus split (PSNR, SSIM, CIEDE2000).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write the normalized absolute difference of two images.
    Residual {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<FileConfig> {
    match &common.config {
        Some(path) => FileConfig::load(path),
        None => Ok(FileConfig::default()),
    }
}

fn require(path: Option<PathBuf>, what: &'static str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Validation { what, reason: "not given on the command line or in the config".into() })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, sources, count, image_size, train_fraction, bank } => {
            let mut cfg = load_config(&common)?;
            let d = &mut cfg.data;
            d.seed = common.seed.unwrap_or(d.seed);
            d.sources = sources.or(d.sources.take());
            d.count = count.unwrap_or(d.count);
            d.image_size = image_size.unwrap_or(d.image_size);
            d.train_fraction = train_fraction.unwrap_or(d.train_fraction);
            d.bank = bank.or(d.bank.take());
            let root = require(common.out.or(cfg.corpus.clone()), "output directory")?;
            let d = &cfg.data;
            let images = match &d.sources {
                Some(dir) => load_source_dir(dir)?,
                None => procedural_sources(d.count, d.image_size, d.seed),
            };
            let filters = match &d.bank {
                Some(path) => bank_from_toml(&std::fs::read_to_string(path).map_err(|e| io_error(path, e))?)?,
                None => builtin_filter_bank(d.bank_seed),
            };
            let opts = CorpusOptions {
                train_fraction: d.train_fraction,
                seed: d.seed,
                image_size: d.image_size,
                bank_seed: d.bank_seed,
            };
            let manifest = generate_corpus(&images, &filters, &root, &opts)?;
            println!(
                "wrote {} sources x {} filters to {}",
                manifest.sources.len(),
                manifest.filters.len(),
                root.display()
            );
            Ok(())
        }
        Command::Train { common, corpus, steps, image_size, no_style_nce, no_id_reg, no_consistency, resume: from } => {
            let cfg = load_config(&common)?;
            let mut t = cfg.train;
            t.seed = common.seed.unwrap_or(t.seed);
            t.total_steps = steps.unwrap_or(t.total_steps);
            t.image_size = image_size.unwrap_or(t.image_size);
            t.enable_style_nce &= !no_style_nce;
            t.enable_identity_reg &= !no_id_reg;
            t.enable_consistency &= !no_consistency;
            let root = require(corpus.or(cfg.corpus), "corpus directory")?;
            let out = require(common.out.or(cfg.out), "output directory")?;
            let manifest = CorpusManifest::load(&root)?;
            let summary = match from {
                Some(ck) => resume(ck, &manifest, Some(t), &out)?,
                None => train(&manifest, &t, &out)?,
            };
            if let Some(last) = summary.reports.last() {
                println!("step {} total_g {:.6}", last.step + 1, last.total_g);
            }
            println!("checkpoint {}", summary.paths.final_checkpoint.display());
            Ok(())
        }
        Command::Remove { common, checkpoint, image } => {
            let (model, _) = load_model(&checkpoint)?;
            let input = Image::load(&image)?;
            let out = common.out.unwrap_or_else(|| sibling(&image, "restored"));
            model.remove_filter_padded(&input)?.save_png(&out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Eval { common, checkpoint, corpus, split } => {
            let cfg = load_config(&common)?;
            let root = require(corpus.or(cfg.corpus), "corpus directory")?;
            let out = require(common.out.or(cfg.out), "output directory")?;
            let manifest = CorpusManifest::load(&root)?;
            let report = evaluate_checkpoint(&checkpoint, &manifest, split, &out)?;
            let m = &report.overall;
            println!("pairs {} psnr {:.4} ssim {:.4} delta_e {:.4}", m.count, m.psnr, m.ssim, m.delta_e);
            Ok(())
        }
        Command::Residual { common, a, b } => {
            let out = common.out.unwrap_or_else(|| PathBuf::from("residual.png"));
            residual_image(&Image::load(&a)?, &Image::load(&b)?)?.save_png(&out)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// `dir/stem_suffix.png` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}
