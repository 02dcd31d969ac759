use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptseg::config::RunConfig;
use promptseg::corpus::SplitSpec;
use promptseg::inference::SplitKind;
use promptseg::model::checkpoint;
use promptseg::synthetic::{write_corpus, SyntheticSpec};
use promptseg::{pipeline, train, Error, Result};

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Text-prompted segmentation: prepare, train, eval, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a manifest into train/val id lists and write the concept dictionary.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "train-frac", default_value_t = 0.85)]
        train_frac: f64,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model. Any config key can be overridden as `--key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a split and write records plus a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Directory with the split lists; defaults to the manifest's directory.
        #[arg(long)]
        split_dir: Option<PathBuf>,
        /// Whether the manifest is an internal or external benchmark.
        #[arg(long, default_value = "internal")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare one or two evaluation record files.
    Report {
        #[arg(required = true, num_args = 1..=2)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic shapes corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Applies `--key value` / `--key=value` pairs; dashes in keys may stand for underscores.
fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            manifest,
            seed,
            train_frac,
            out,
        } => {
            let spec = SplitSpec {
                train_fraction: train_frac,
                seed,
            };
            let out = out.unwrap_or_else(|| parent_dir(&manifest));
            let s = pipeline::prepare(&manifest, &spec, &out)?;
            println!(
                "{} train / {} val ids, {} concepts -> {}",
                s.train,
                s.val,
                s.concepts,
                out.display()
            );
        }
        Command::Train {
            config,
            print_config,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::from_file(path)?,
                None => RunConfig::default(),
            };
            apply_overrides(&mut cfg, &overrides)?;
            cfg.sync();
            if print_config {
                print!("{}", cfg.render());
                return Ok(());
            }
            cfg.validate()?;
            let data = train::load_run_data(&cfg)?;
            let s = train::run(&cfg, &data)?;
            let loss = s.last_loss.map_or(f64::NAN, |l| l.total);
            match s.best_val_dice {
                Some(d) => println!(
                    "{} steps, last loss {loss:.4}, best val dice {d:.4} -> {}",
                    s.steps,
                    s.output_dir.display()
                ),
                None => println!("{} steps, last loss {loss:.4} -> {}", s.steps, s.output_dir.display()),
            }
        }
        Command::Eval {
            ckpt,
            manifest,
            split,
            split_dir,
            kind,
            out,
        } => {
            let kind: SplitKind = kind.parse()?;
            let model = checkpoint::load_model(&ckpt)?;
            let split_dir = split_dir.unwrap_or_else(|| parent_dir(&manifest));
            let records = pipeline::evaluate(&model, &manifest, &split_dir, &split, kind)?;
            if records.is_empty() {
                return Err(Error::Validation(format!("split {split:?} produced no records")));
            }
            let comparison = pipeline::write_eval_outputs(&out, &records)?;
            print!("{}", comparison.render_table());
        }
        Command::Report { records, out } => {
            let comparison = pipeline::report(&records, &out)?;
            for w in &comparison.warnings {
                log::warn!("{w}");
            }
            print!("{}", comparison.render_table());
        }
        Command::Synth { out, images, size, seed } => {
            write_corpus(&out, &SyntheticSpec { images, size, seed })?;
            println!("{images} images -> {}", out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
