//! Command-line interface. Exit codes: 0 success, 1 user or configuration
//! error, 2 internal error.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, OracleClassifier, OracleConfig, RandomFeatureDistance, DEFAULT_K};
use crate::imageio;
use crate::inference::{ManipulationPlan, Translator};
use crate::service::{self, AppState};
use crate::synthetic::{self, Shape};
use crate::trainer::{self, TrainingConfig};

#[derive(Debug, Parser)]
#[command(name = "aguit", version, about = "Attribute-guided image-to-image translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 128x128, full widths.
    Full,
    /// 32x32 synthetic-shapes scale.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train {
        /// TOML training config; unset keys take preset defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        preset: Preset,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        labeled_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        image_size: Option<i64>,
    },
    /// Score a checkpoint on a labelled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Saved oracle weights. Without it an oracle is trained on synthetic shapes.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        diversity_sources: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Edit one image's style code and decode it.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Plan as JSON text or a path to a JSON file; all-Hold when absent.
        #[arg(long)]
        plan: Option<String>,
        /// Take the style code from this image instead of the input.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<i64>,
    },
    /// Write a procedurally generated shapes dataset.
    MakeSyntheticData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Comma-separated shape classes.
        #[arg(long, default_value = "circle,square,triangle")]
        shapes: String,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            preset,
            data_root,
            out_dir,
            checkpoint,
            labeled_fraction,
            seed,
            iterations,
            image_size,
        } => {
            let mut cfg = match (&config, preset) {
                (Some(path), _) => TrainingConfig::from_toml_file(path)?,
                (None, Preset::Full) => TrainingConfig::default(),
                (None, Preset::Desk) => TrainingConfig::desk(),
            };
            if let Some(f) = labeled_fraction {
                cfg.labeled_fraction = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.total_iterations = n;
            }
            if let Some(s) = image_size {
                cfg.net.image_size = s;
            }
            if !data_root.exists() {
                return Err(Error::MissingPath(data_root));
            }
            let outcome = trainer::fit(&cfg, &data_root, &out_dir, checkpoint.as_deref())?;
            println!(
                "trained {} iterations, smoothed rec_x {:.4}{}, final checkpoint {}",
                outcome.iterations,
                outcome.smoothed_rec_x,
                if outcome.stopped_early { " (stopped early)" } else { "" },
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data_root,
            out_dir,
            oracle,
            k,
            diversity_sources,
            seed,
        } => {
            let translator = Translator::load(&checkpoint)?;
            let corpus = Corpus::load(&data_root, translator.attribute_names(), translator.image_size())?;
            let labeled = corpus.labeled_indices();
            if labeled.is_empty() {
                return Err(Error::Config(format!("{} has no annotated images", data_root.display())));
            }
            let images = corpus.select(&labeled);
            let labels = corpus.label_tensor(&labeled);
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let nd = translator.layout().nd as i64;
            let (oracle, oracle_accuracy) = match oracle {
                Some(path) => (OracleClassifier::load(&path, 3, nd)?, None),
                None => {
                    if nd != 3 {
                        return Err(Error::Config(
                            "the built-in oracle covers the three synthetic attributes; pass --oracle".into(),
                        ));
                    }
                    let (o, acc) = OracleClassifier::train_synthetic(
                        translator.image_size() as usize,
                        &OracleConfig::default(),
                    )?;
                    o.save(&out_dir.join("oracle.safetensors"))?;
                    (o, Some(acc))
                }
            };
            let cfg = EvalConfig {
                k,
                diversity_sources,
                seed,
            };
            let mut report = evaluate(
                &translator,
                &images,
                &labels,
                &oracle,
                &RandomFeatureDistance::default(),
                &cfg,
            )?;
            report.oracle_accuracy = oracle_accuracy;
            let path = out_dir.join("report.json");
            fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Translate {
            checkpoint,
            input,
            output,
            plan,
            reference,
            seed,
            image_size,
        } => {
            let translator = Translator::load(&checkpoint)?;
            let size = image_size.unwrap_or(translator.image_size());
            let plan = match plan {
                Some(p) => read_plan(&p)?,
                None => ManipulationPlan::hold(translator.layout().len()),
            };
            let image = load_input(&input, size)?;
            let mut rng = match seed {
                Some(s) => ChaCha8Rng::seed_from_u64(s),
                None => ChaCha8Rng::from_os_rng(),
            };
            let out = match reference {
                Some(r) => {
                    let reference = load_input(&r, size)?;
                    translator.translate_with_reference(&image, &reference, &plan, &mut rng)?
                }
                None => translator.translate(&image, &plan, &mut rng)?,
            };
            imageio::save_png(&output, &out.squeeze_dim(0))
        }
        Command::MakeSyntheticData {
            out_dir,
            n,
            seed,
            image_size,
            shapes,
        } => {
            let shapes = shapes
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| Shape::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            let index = synthetic::write_corpus(&out_dir, n, seed, &shapes, image_size)?;
            println!("wrote {} images to {}", index.entries.len(), out_dir.display());
            Ok(())
        }
        Command::Serve { checkpoint, bind } => {
            let state = match checkpoint {
                Some(dir) => AppState::with_translator(Translator::load(&dir)?),
                None => AppState::empty(),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(service::serve(bind, state))
                .map_err(|e| Error::io(bind.to_string(), e))
        }
    }
}

fn load_input(path: &Path, size: i64) -> Result<tch::Tensor> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    Ok(imageio::load_image(path, size)?.unsqueeze(0))
}

fn read_plan(arg: &str) -> Result<ManipulationPlan> {
    let text = if arg.trim_start().starts_with('[') {
        arg.to_string()
    } else {
        let path = Path::new(arg);
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Plan(format!("cannot parse plan: {e}")))
}
