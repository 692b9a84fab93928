use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atgnn::checkpoint;
use atgnn::data::{self, Manifest};
use atgnn::training::{evaluate_model, fit, input_stats, TrainState};
use atgnn::{Atgnn64, Error, Result, RunConfig, Tensor64};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "atgnn", version, about = "Audio tagging with patch and label graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; writes checkpoints and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a manifest with a checkpoint and write the mAP report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report path (default: eval_report.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic tone corpus with manifest and vocabulary.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a learned label adjacency matrix as CSV.
    ExportGraph {
        #[arg(long)]
        ckpt: PathBuf,
        /// MLG block index (default: the last one).
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
        _ => 4,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ATGNN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config {
            field: "ATGNN_THREADS".into(),
            msg: format!("`{v}` is not a positive integer"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config {
            field: "ATGNN_THREADS".into(),
            msg: e.to_string(),
        })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let train_manifest = cfg.data.train_manifest.clone().ok_or_else(|| Error::Config {
        field: "data.train_manifest".into(),
        msg: "required for training".into(),
    })?;
    let out_dir = cfg
        .data
        .output_dir
        .clone()
        .unwrap_or_else(|| config_path.parent().unwrap_or(Path::new(".")).join("run"));
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let manifest = Manifest::load(&train_manifest)?;
    let val_manifest = cfg.data.val_manifest.as_deref().map(Manifest::load).transpose()?;

    let resumed = resume.map(checkpoint::load::<f64>).transpose()?;
    let mut run_cfg = cfg.clone();
    if let Some((saved, st)) = &resumed {
        log::info!("resuming at epoch {}", st.epoch);
        run_cfg.model = saved.model.clone();
    }
    let train = data::load_examples::<f64>(&manifest, &run_cfg.model, &run_cfg.train)?;
    let val = val_manifest
        .as_ref()
        .map(|m| data::load_examples::<f64>(m, &run_cfg.model, &run_cfg.train))
        .transpose()?;
    let mut state = match resumed {
        Some((_, st)) => st,
        None => {
            let (mean, std) = input_stats(&train)?;
            run_cfg.model.input_mean = mean;
            run_cfg.model.input_std = std;
            TrainState::new(Atgnn64::new(run_cfg.model.clone())?)
        }
    };
    run_cfg.train.validate(&run_cfg.model)?;

    let last = out_dir.join("last.ckpt");
    if resume.is_none() {
        checkpoint::save(&last, &run_cfg, &state)?;
    }
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let train_cfg = run_cfg.train.clone();
    fit(&mut state, &train, val.as_deref(), &train_cfg, |entry, st| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log_file, "{line}").map_err(|e| io_err(&log_path, e))?;
        println!("{line}");
        checkpoint::save(&last, &run_cfg, st)
    })?;
    println!("checkpoint: {}", last.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, state) = checkpoint::load::<f64>(ckpt)?;
    let manifest = Manifest::load(manifest_path)?;
    let examples = data::load_examples::<f64>(&manifest, &cfg.model, &cfg.train)?;
    let report = evaluate_model(&state.model, &examples)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval_report.json"));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&out, json + "\n").map_err(|e| io_err(&out, e))?;
    println!("mAP {:.6} over {} clips ({} classes skipped)", report.map, examples.len(), report.skipped.len());
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_gradcheck(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let model = Atgnn64::new(cfg.model.clone())?;
    let (bins, frames) = model.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.init_seed);
    let image = Tensor64::from_vec(bins, frames, (0..bins * frames).map(|_| rng.random_range(-3.0..3.0)).collect())?;
    let targets: Vec<f64> = (0..cfg.model.classes).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let count = model.params().scalar_count();
    if count > 200_000 {
        log::warn!("{count} parameters; the check needs two forward passes per entry");
    }
    let report = model.gradient_check(&image, &targets, 1e-5)?;
    println!(
        "max relative gradient error {:.3e} over {} entries",
        report.max_rel_error, report.entries
    );
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Error::Numeric(format!(
            "gradient error {:.3e} exceeds {GRADCHECK_TOLERANCE:e} (worst entry {:?})",
            report.max_rel_error, report.worst
        )));
    }
    Ok(())
}

fn cmd_gen_data(classes: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    let m = data::generate_synthetic(classes, count, seed, out)?;
    println!(
        "wrote {} clips over {} classes to {}",
        m.len(),
        m.classes(),
        out.display()
    );
    Ok(())
}

fn cmd_export_graph(ckpt: &Path, block: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (cfg, state) = checkpoint::load::<f64>(ckpt)?;
    let blocks: usize = cfg.model.stage_mlg.iter().sum();
    if blocks == 0 {
        return Err(Error::Config {
            field: "model.stage_mlg".into(),
            msg: "the checkpoint has no label graph".into(),
        });
    }
    let b = block.unwrap_or(blocks - 1);
    if b >= blocks {
        return Err(Error::Config {
            field: "block".into(),
            msg: format!("block {b} out of range (model has {blocks})"),
        });
    }
    let a = state
        .model
        .params()
        .get(&format!("mlg.{b}.adj"))
        .expect("validated layout");
    let mut csv = String::new();
    for r in 0..a.rows() {
        let row: Vec<String> = a.row(r).iter().map(|v| format!("{v:?}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| io_err(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { ckpt, manifest, out } => cmd_eval(&ckpt, &manifest, out.as_deref()),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::GenData {
            classes,
            count,
            seed,
            out,
        } => cmd_gen_data(classes, count, seed, &out),
        Command::ExportGraph { ckpt, block, out } => cmd_export_graph(&ckpt, block, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            exit_code(&Error::Config {
                field: "x".into(),
                msg: String::new()
            }),
            2
        );
        assert_eq!(exit_code(&io_err(Path::new("a"), std::io::ErrorKind::NotFound.into())), 3);
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 4);
    }
}
