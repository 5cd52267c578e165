//! Command-line interface: train, eval, denoise, ablate, qmap,
//! robustness. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use ncfl::bench::{
    ablate, evaluate, export_qmaps, robustness_report, write_robustness, EvalReport,
};
use ncfl::config::{load_config, Direction};
use ncfl::data::{load_clip_dir, load_dataset_manifest, save_clip_dir, ClipSource, SourceKind};
use ncfl::data::{synthetic_corpus, SynthSpec};
use ncfl::pipeline::{run_clip, train_two_stage_verbose, NcflModel};

#[derive(Parser)]
#[command(
    name = "ncfl",
    version,
    about = "Recurrent video restoration with a learned compression bottleneck"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dir {
    Uni,
    Bi,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Direction {
        match d {
            Dir::Uni => Direction::Uni,
            Dir::Bi => Direction::Bi,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoints + metrics.ndjson).
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest (JSON). Defaults to a synthetic moving-pattern corpus.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        synth_clips: usize,
        #[arg(long, default_value_t = 10)]
        synth_frames: usize,
        #[arg(long, default_value_t = 48)]
        synth_size: usize,
    },
    /// Evaluate a checkpoint on clips degraded with AWGN.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Clip directory, directory of clip directories, or manifest JSON.
        #[arg(long)]
        data: PathBuf,
        /// Noise level on the 0-255 scale.
        #[arg(long)]
        sigma: f32,
        /// Write the EvalReport JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Dir::Uni)]
        direction: Dir,
    },
    /// Restore a degraded clip and write PNG frames.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Dir::Uni)]
        direction: Dir,
    },
    /// Train and evaluate ablation variants under identical budgets.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names (e.g. full,baseline,ncfl_noq).
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        synth_clips: usize,
        #[arg(long, default_value_t = 10)]
        synth_frames: usize,
        #[arg(long, default_value_t = 48)]
        synth_size: usize,
    },
    /// Export quantization-step maps for a clip.
    Qmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature-space robustness distances across noise realizations.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        sigma: f32,
        #[arg(long)]
        seeds: usize,
        /// Output directory for robustness.json / robustness.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn synth_sources(n: usize, frames: usize, size: usize, seed: u64) -> Vec<ClipSource> {
    synthetic_corpus(SynthSpec { n_clips: n, frames, height: size, width: size, seed })
        .into_iter()
        .map(|clean| ClipSource { clean, kind: SourceKind::Awgn { sigma: None } })
        .collect()
}

/// Accepts a manifest JSON, a single clip directory, or a directory of
/// clip directories.
fn load_sources(path: &Path) -> anyhow::Result<Vec<ClipSource>> {
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        return Ok(load_dataset_manifest(path)?);
    }
    if !path.is_dir() {
        bail!("{}: not a directory or manifest", path.display());
    }
    let has_frames = std::fs::read_dir(path)?.any(|e| {
        e.map(|e| e.file_name().to_string_lossy().starts_with("frame_")).unwrap_or(false)
    });
    if has_frames {
        let clip = load_clip_dir(path)?;
        return Ok(vec![ClipSource { clean: clip, kind: SourceKind::Awgn { sigma: None } }]);
    }
    let mut sources = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        sources
            .push(ClipSource { clean: load_clip_dir(&sub)?, kind: SourceKind::Awgn { sigma: None } });
    }
    if sources.is_empty() {
        bail!("{}: no clips found", path.display());
    }
    Ok(sources)
}

fn print_eval_table(report: &EvalReport) {
    println!("{:<24} {:>9} {:>8} {:>11}", "clip", "psnr", "ssim", "input_psnr");
    for c in &report.clips {
        println!("{:<24} {:>9.4} {:>8.4} {:>11.4}", c.id, c.psnr, c.ssim, c.input_psnr);
    }
    println!(
        "{:<24} {:>9.4} {:>8.4} {:>11.4}",
        "mean", report.mean_psnr, report.mean_ssim, report.mean_input_psnr
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, data, synth_clips, synth_frames, synth_size } => {
            let cfg = load_config(&config)?;
            let sources = match data {
                Some(path) => load_sources(&path)?,
                None => synth_sources(synth_clips, synth_frames, synth_size, cfg.seed ^ 0xdada),
            };
            let report = train_two_stage_verbose(&cfg, &sources, &out, true)?;
            let last = report.metrics.last().context("no metrics")?;
            println!(
                "done: iter {} loss {:.6} psnr {:.2} dB; checkpoint at {}",
                last.iter,
                last.loss,
                last.psnr,
                report.final_checkpoint.display()
            );
        }
        Cmd::Eval { ckpt, data, sigma, out, seed, direction } => {
            let model = NcflModel::from_checkpoint(&ckpt)?;
            let sources = load_sources(&data)?;
            let report = evaluate(&model, &sources, sigma, seed, direction.into())?;
            print_eval_table(&report);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Cmd::Denoise { ckpt, input, out, direction } => {
            let model = NcflModel::from_checkpoint(&ckpt)?;
            let clip = load_clip_dir(&input)?;
            let (restored, ce) = run_clip(&model, &clip, direction.into())?;
            save_clip_dir(&restored, &out)?;
            println!(
                "restored {} frames to {} (mean ce {:.3} bits)",
                restored.len(),
                out.display(),
                ce.iter().sum::<f64>() / ce.len() as f64
            );
        }
        Cmd::Ablate {
            config,
            variants,
            out,
            seeds,
            data,
            synth_clips,
            synth_frames,
            synth_size,
        } => {
            let cfg = load_config(&config)?;
            let variant_list: Vec<String> = variants
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let seed_list: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("bad seed list"))
                .collect::<anyhow::Result<_>>()?;
            let train_sources = match data {
                Some(path) => load_sources(&path)?,
                None => synth_sources(synth_clips, synth_frames, synth_size, cfg.seed ^ 0xdada),
            };
            let eval_sources = synth_sources(4, synth_frames, synth_size, cfg.seed ^ 0xbeef);
            std::fs::create_dir_all(&out)?;
            let report =
                ablate(&cfg, &variant_list, &train_sources, &eval_sources, &seed_list, &out)?;
            println!("{:<14} {:>12} {:>12}", "variant", "median_psnr", "median_ssim");
            for row in &report.rows {
                println!("{:<14} {:>12.4} {:>12.4}", row.variant, row.median_psnr, row.median_ssim);
            }
            let path = out.join("ablation.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("report written to {}", path.display());
        }
        Cmd::Qmap { ckpt, input, out } => {
            let model = NcflModel::from_checkpoint(&ckpt)?;
            let clip = load_clip_dir(&input)?;
            let n = export_qmaps(&model, &clip, &out)?;
            println!("exported {n} channel maps + qmap.ncfl to {}", out.display());
        }
        Cmd::Robustness { ckpt, input, sigma, seeds, out } => {
            let model = NcflModel::from_checkpoint(&ckpt)?;
            let clip = load_clip_dir(&input)?;
            let report = robustness_report(&model, &clip, sigma, seeds)?;
            std::fs::create_dir_all(&out)?;
            write_robustness(&report, &out.join("robustness.json"), &out.join("robustness.csv"))?;
            match (report.warped_pairwise_mean, report.refined_pairwise_mean) {
                (Some(w), Some(r)) => println!(
                    "pairwise distances: warped {w:.5}, refined {r:.5} ({} seeds)",
                    report.n_seeds
                ),
                _ => println!("single realization: pairwise distances empty"),
            }
            println!(
                "to-clean distances: warped {:.5}, refined {:.5}",
                report.warped_to_clean_mean, report.refined_to_clean_mean
            );
        }
    }
    Ok(())
}
