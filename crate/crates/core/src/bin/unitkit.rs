use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Parser, Subcommand};

use unitkit::cli::{self, CliError, EncodeMode, EvalSource, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "unitkit",
    version,
    about = "Discrete speech units: quantize, predict from text, evaluate"
)]
struct Args {
    /// Pipeline config (strict JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Output file; defaults to a name inside the config's workdir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a k-means codebook on the features listed in a manifest.
    QuantizeTrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Quantize features into unit sequences.
    Encode {
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Remove adjacent repeats.
        #[arg(long, conflicts_with = "durations")]
        dedup: bool,
        /// Write `unit:count` runs.
        #[arg(long)]
        durations: bool,
    },
    /// Train the text-to-unit predictor.
    PredictorTrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        units: Option<PathBuf>,
    },
    /// Predict units from manifest texts.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cap on generated tokens (default: the model's max_tgt_len).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score hypotheses against references (UER, CER, SDR).
    #[command(group(ArgGroup::new("reference").required(true).args(["ref_units", "ref_manifest"])))]
    #[command(group(ArgGroup::new("hypothesis").required(true).args(["hyp_units", "hyp_manifest"])))]
    Evaluate {
        #[arg(long)]
        ref_units: Option<PathBuf>,
        #[arg(long)]
        ref_manifest: Option<PathBuf>,
        #[arg(long)]
        hyp_units: Option<PathBuf>,
        #[arg(long)]
        hyp_manifest: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a micro model.
    GradCheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn manifest_arg(cfg: &PipelineConfig, given: Option<PathBuf>, key: &str) -> Result<PathBuf> {
    given
        .or_else(|| cfg.manifest(key).map(Path::to_path_buf))
        .ok_or_else(|| {
            CliError::Config(format!("pass --manifest or set paths.manifests.{key}")).into()
        })
}

fn out_arg(cfg: &PipelineConfig, given: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p.clone()),
        None => Ok(cfg.output(default)?),
    }
}

fn input_arg(cfg: &PipelineConfig, given: Option<PathBuf>, default: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.paths.workdir.join(default))
}

fn run(args: Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed_override {
        cfg = cfg.with_seed(seed);
    }
    match args.command {
        Command::QuantizeTrain { manifest } => {
            let manifest = manifest_arg(&cfg, manifest, "features")?;
            let out = out_arg(&cfg, &args.out, "codebook.kmcb")?;
            let (cb, stats) = cli::quantize_train(&cfg, &manifest, &out)
                .with_context(|| format!("quantize-train on {}", manifest.display()))?;
            println!(
                "codebook k={} dim={} iterations={} converged={} inertia={:.6}",
                cb.k(),
                cb.dim(),
                stats.iterations_run,
                stats.converged,
                cb.trained_inertia
            );
            println!(
                "wrote {} and {}",
                out.display(),
                cli::stats_path(&out).display()
            );
        }
        Command::Encode {
            codebook,
            manifest,
            dedup,
            durations,
        } => {
            let manifest = manifest_arg(&cfg, manifest, "features")?;
            let codebook = input_arg(&cfg, codebook, "codebook.kmcb");
            let (mode, default) = match (dedup, durations) {
                (_, true) => (EncodeMode::Durations, "durations.tsv"),
                (true, false) => (EncodeMode::Dedup, "units.tsv"),
                (false, false) => (EncodeMode::Frames, "frames.tsv"),
            };
            let out = out_arg(&cfg, &args.out, default)?;
            let rows = cli::encode(&codebook, &manifest, mode, &out)?;
            println!("encoded {} utterances into {}", rows.len(), out.display());
        }
        Command::PredictorTrain { manifest, units } => {
            let manifest = manifest_arg(&cfg, manifest, "text")?;
            let units = input_arg(&cfg, units, "units.tsv");
            let out = out_arg(&cfg, &args.out, "predictor.sq2s")?;
            let every = cfg.train.log_every.max(1);
            let last = cfg.train.max_steps.saturating_sub(1);
            let curve = cli::predictor_train(&cfg, &manifest, &units, &out, |s| {
                if s.step % every == 0 || s.step == last {
                    eprintln!("step {:>6}  loss {:.6}  {} ms", s.step, s.loss, s.wall_ms);
                }
            })?;
            println!(
                "trained {} steps, final loss {:.6}",
                curve.losses.len(),
                curve.final_loss().unwrap_or(f64::NAN)
            );
            println!(
                "wrote {} and {}",
                out.display(),
                cli::loss_log_path(&out).display()
            );
        }
        Command::Predict {
            checkpoint,
            manifest,
            max_len,
        } => {
            let manifest = manifest_arg(&cfg, manifest, "text")?;
            let checkpoint = input_arg(&cfg, checkpoint, "predictor.sq2s");
            let out = out_arg(&cfg, &args.out, "predicted.tsv")?;
            let p = cli::predict(&checkpoint, &manifest, max_len, &out)?;
            for id in &p.empty_ids {
                eprintln!("warning: utterance {id:?}: empty prediction");
            }
            println!(
                "predicted {} utterances into {}",
                p.rows.len(),
                out.display()
            );
        }
        Command::Evaluate {
            ref_units,
            ref_manifest,
            hyp_units,
            hyp_manifest,
        } => {
            let pick = |units: Option<PathBuf>, manifest: Option<PathBuf>| match units {
                Some(p) => EvalSource::Units(p),
                None => EvalSource::Manifest(manifest.expect("clap group requires one")),
            };
            let reference = pick(ref_units, ref_manifest);
            let hyp = pick(hyp_units, hyp_manifest);
            let out = out_arg(&cfg, &args.out, "report.json")?;
            let r = cli::evaluate(&reference, &hyp, &out)?;
            let show = |name: &str, v: Option<f64>| {
                if let Some(v) = v {
                    println!("{name:<12}{v:.6}");
                }
            };
            show("UER %", r.corpus.uer_micro);
            show("CER %", r.corpus.cer_micro);
            show("SDR dB", r.corpus.sdr_mean_db);
            println!(
                "evaluated {} of {}, skipped {}",
                r.counts.evaluated, r.counts.total, r.counts.skipped
            );
            for (reason, n) in &r.counts.skip_reasons {
                println!("  {reason}: {n}");
            }
            println!("wrote {}", out.display());
        }
        Command::GradCheck { corrupt_backward } => {
            match cli::grad_check(args.seed_override, corrupt_backward) {
                Ok(r) => println!(
                    "grad-check pass: max relative error {:.3e} over {} parameters",
                    r.max_rel_error, r.checked
                ),
                Err(e) => {
                    println!("grad-check FAIL");
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

/// The error and its causes, skipping causes already spelled out by the
/// message before them.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<CliError>())
                .map_or(2, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
