//! The `mst` command line.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use mst_core::audit::audit_report;
use mst_core::checks::{gradient_suite, ssd_oracle_trials, GRAD_TOL};
use mst_core::TrackerConfig;

use crate::checkpoint;
use crate::error::{read_text, write, HarnessError, Result};
use crate::eval::evaluate_all;
use crate::scene::{find_sequences, format_boxes, SequenceDir, SyntheticScene};
use crate::track::track;
use crate::train::{loss_csv, train, LoadedSequence, TrainOptions};

pub const CHECKPOINT_FILE: &str = "model.mst";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Parser, Debug)]
#[command(name = "mst", version, about = "Multi-state tracker: synthetic data, training, tracking and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic sequence (PPM frames plus groundtruth.txt).
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 160)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes model.mst and loss.csv into --out.
    Train {
        /// key=value architecture file; unspecified keys use the desk config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A sequence directory or a directory of sequences.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Stop after the epoch that crosses this many minutes.
        #[arg(long)]
        minutes: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files; repeat --pred/--gt for several sequences.
    Eval {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// CSV report path; the text report goes to stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOPs and parameter breakdown against the published table.
    Audit {
        /// key=value overrides on top of the ViT-Tiny configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Only checks whose name contains this string.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Linear SSD core against the quadratic oracle on random configurations.
    Oracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>, base: TrackerConfig) -> Result<TrackerConfig> {
    match path {
        Some(p) => Ok(TrackerConfig::parse_with(&read_text(p)?, base)?),
        None => Ok(base),
    }
}

/// Runs one command; human-readable progress goes to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { seed, frames, size, out } => {
            if frames == 0 || size < 32 {
                return Err(HarnessError::Usage("need at least one frame and a frame size of 32 px".into()));
            }
            SyntheticScene::random(seed, frames, size).write(&out)?;
            eprintln!("wrote {frames} frames to {}", out.display());
        }
        Command::Train {
            config,
            data,
            epochs,
            lr,
            seed,
            batch,
            minutes,
            out,
        } => {
            let cfg = load_config(config.as_deref(), TrackerConfig::desk())?;
            let seqs = find_sequences(&data)?
                .iter()
                .map(LoadedSequence::load)
                .collect::<Result<Vec<_>>>()?;
            let opts = TrainOptions {
                epochs,
                lr,
                seed,
                batch,
                time_limit: minutes.map(|m| Duration::from_secs_f64(m * 60.0)),
                ..TrainOptions::default()
            };
            let report = train(&cfg, &seqs, &opts, |e| {
                eprintln!("epoch {:>3}  loss {:.4}  cls {:.4}  giou {:.4}  l1 {:.4}", e.epoch, e.loss, e.cls, e.giou, e.l1)
            })?;
            checkpoint::save(&report.tracker, &out.join(CHECKPOINT_FILE))?;
            write(&out.join(LOSS_FILE), loss_csv(&report.epochs))?;
            eprintln!("{} steps in {:.1} s", report.steps, report.elapsed.as_secs_f64());
            if let Some(e) = report.abort {
                return Err(e);
            }
        }
        Command::Track {
            checkpoint: ckpt,
            sequence,
            out,
        } => {
            let tracker = checkpoint::load::<f64>(&ckpt)?;
            let seq = SequenceDir::open(&sequence)?;
            let gt = seq.groundtruth_path();
            let text = read_text(&gt)
                .map_err(|_| HarnessError::Usage(format!("{}: missing initial box", gt.display())))?;
            let init = crate::scene::parse_boxes(text.lines().next().unwrap_or(""))?
                .first()
                .copied()
                .ok_or_else(|| HarnessError::Usage(format!("{}: missing initial box", gt.display())))?;
            let t0 = Instant::now();
            let boxes = track(&tracker, seq.len(), init, |t| seq.frame(t))?;
            write(&out, format_boxes(&boxes))?;
            eprintln!("tracked {} frames in {:.1} s", boxes.len(), t0.elapsed().as_secs_f64());
        }
        Command::Eval { pred, gt, out } => {
            if pred.len() != gt.len() {
                return Err(HarnessError::Usage("--pred and --gt must be given the same number of times".into()));
            }
            let pairs: Vec<_> = pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| (sequence_name(g), p.as_path(), g.as_path()))
                .collect();
            let (text, csv) = evaluate_all(&pairs)?;
            print!("{text}");
            write(&out, csv)?;
        }
        Command::Audit { config, csv } => {
            let cfg = load_config(config.as_deref(), TrackerConfig::vit_tiny())?;
            let report = audit_report(&cfg)?;
            print!("{}", report.to_text());
            if let Some(p) = csv {
                write(&p, report.to_csv())?;
            }
        }
        Command::Gradcheck { module, seeds } => {
            let results = gradient_suite(module.as_deref(), seeds)?;
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<18} {:>10.3e}  {verdict}", r.name, r.max_rel_err);
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(HarnessError::Numeric(format!(
                    "gradient check above {GRAD_TOL:e}: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Oracle { trials, seed } => {
            let t0 = Instant::now();
            let r = ssd_oracle_trials(trials, seed)?;
            let (l, d, n, k) = r.worst_config;
            println!(
                "{} trials, worst max|core - oracle| / max|core| = {:.3e} at L={l} D={d} N_s={n} K={k} ({:.1} s)",
                r.trials,
                r.worst_ratio,
                t0.elapsed().as_secs_f64()
            );
            if r.worst_ratio >= 1e-9 {
                return Err(HarnessError::Numeric(format!("oracle deviation {:.3e} >= 1e-9", r.worst_ratio)));
            }
        }
    }
    Ok(())
}

/// Name for a report row: the ground truth's parent directory, else its stem.
fn sequence_name(gt: &Path) -> String {
    let from_dir = gt.parent().and_then(|p| p.file_name());
    let from_stem = gt.file_stem();
    from_dir
        .or(from_stem)
        .map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned())
}
