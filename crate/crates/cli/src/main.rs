use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pseg::config::RunConfig;
use pseg::data::{load_checkpoint, load_dataset, load_image, save_checkpoint, save_mask_png, save_overlay_png, synth_generate, Modality};
use pseg::gradcheck::{run_suite, suite_names};
use pseg::metrics::scores_report;
use pseg::nn::{SegModel, Variant};
use pseg::train::{evaluate, run_ablation_with_progress, train_with_progress};
use pseg::tensor::NoGradGuard;

/// Pothole segmentation: synthetic data, training, evaluation and checks.
#[derive(Parser)]
#[command(name = "pseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic road dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant and write a checkpoint and a history CSV.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Overrides the `variant` key of the config file.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the `epochs` key of the config file.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict the mask of one image and render an overlay.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Mask PNG to write.
        #[arg(long)]
        out: PathBuf,
        /// Overlay PNG; defaults to `<out stem>_overlay.png` next to the mask.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train all four variants and write the ablation tables.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Evaluation split; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run finite-difference gradient suites.
    Gradcheck {
        /// Suite to run (op or block name).
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "rgb")]
    modality: Modality,
}

/// Failure caused by the numbers (NaN loss, failed gradient check).
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some() || e.downcast_ref::<pseg::Error>().is_some_and(pseg::Error::is_numerical)
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn modality_of(model: &SegModel) -> Modality {
    if model.config().in_channels == 1 {
        Modality::Disparity
    } else {
        Modality::Rgb
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, size, seed, out } => {
            synth_generate(n, size, seed, &out)?;
            eprintln!("wrote {n} scenes of {size}x{size} to {}", out.display());
        }
        Command::Train {
            data,
            variant,
            config,
            epochs,
            out_ckpt,
            history,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.model.in_channels = data.modality.channels();
            cfg.train.validate()?;
            let samples = load_dataset(&data.data, data.modality).with_context(|| format!("loading {}", data.data.display()))?;
            let model = SegModel::new(&cfg.model, cfg.train.variant, cfg.train.seed)?;
            eprintln!(
                "training {} on {} samples for {} epochs",
                cfg.train.variant.label(),
                samples.len(),
                cfg.train.epochs
            );
            let hist = train_with_progress(&model, &samples, &cfg.train, |r| {
                if let Some(m) = r.miou {
                    eprintln!("epoch {:>4}  loss {:.5}  mIoU {:.4}", r.epoch, r.loss, m);
                }
            })?;
            write_file(&history, &hist.to_csv())?;
            let steps = (cfg.train.epochs * samples.len()) as u64;
            save_checkpoint(&model, steps, cfg.train.seed, &out_ckpt)?;
            eprintln!("checkpoint {}  history {}", out_ckpt.display(), history.display());
        }
        Command::Eval { data, ckpt, report } => {
            let model = load_checkpoint(&ckpt)?.model;
            let samples = load_dataset(&data, modality_of(&model))?;
            let scores = evaluate(&model, &samples)?;
            let text = scores_report(&format!("{} on {}", model.variant().label(), data.display()), &scores);
            print!("{text}");
            if let Some(p) = report {
                write_file(&p, &text)?;
            }
        }
        Command::Predict { image, ckpt, out, overlay } => {
            let model = load_checkpoint(&ckpt)?.model;
            let sample = load_image(&image, modality_of(&model))?;
            let (h, w) = sample.original;
            let mask = {
                let _guard = NoGradGuard::new();
                model.predict(&sample.image)?.crop(h, w)?
            };
            save_mask_png(&mask, model.config().num_classes, &out)?;
            let overlay = overlay.unwrap_or_else(|| {
                let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out.with_file_name(format!("{stem}_overlay.png"))
            });
            save_overlay_png(&sample.image, &mask, &overlay)?;
            eprintln!("mask {}  overlay {}", out.display(), overlay.display());
        }
        Command::Ablate {
            data,
            eval_data,
            config,
            report,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.model.in_channels = data.modality.channels();
            let train_set = load_dataset(&data.data, data.modality)?;
            let eval_set = match &eval_data {
                Some(p) => load_dataset(p, data.modality)?,
                None => train_set.clone(),
            };
            let ablation = run_ablation_with_progress(&cfg.model, &cfg.train, &train_set, &eval_set, |v, r| {
                if r.epoch == cfg.train.epochs {
                    eprintln!("{}: final loss {:.5}", v.label(), r.loss);
                }
            })?;
            let text = ablation.markdown();
            print!("{text}");
            if let Some(p) = report {
                write_file(&p, &text)?;
            }
        }
        Command::Gradcheck {
            op,
            all,
            trials,
            tol,
            seed,
        } => {
            let names: Vec<String> = match (op, all) {
                (Some(n), _) => vec![n],
                (None, true) => suite_names().map(String::from).collect(),
                (None, false) => bail!(pseg::Error::Argument("pass --op <name> or --all".into())),
            };
            let mut failed = Vec::new();
            for name in &names {
                let r = run_suite(name, trials, tol, seed)?;
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<18} trials {:>4}  failed {:>3}  max rel err {:.3e}  checked {:>6}  kinks skipped {}",
                    r.name, r.trials, r.failed_trials, r.max_rel_error, r.checked, r.skipped_kinks
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(NumericalFailure(format!("gradient check failed for: {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures; exit code 2 means numerical
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}
