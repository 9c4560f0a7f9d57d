//! Operator surface: wires dataset generation, the two pretraining stages,
//! and the evaluation protocols into subcommands over on-disk artifacts.
//!
//! Every command validates its configuration before doing work, writes a
//! resolved-config snapshot beside its outputs, and exits with a distinct
//! code per failure class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sm3::config::{MlStrategy, MmStrategy, RunConfig};
use sm3::error::{Error, Result};
use sm3::eval;
use sm3::synthdata::{self, Dataset};
use sm3::train::{self, Checkpoint};

#[derive(Parser)]
#[command(
    name = "sm3",
    about = "Self-supervised multi-modality multi-label pretraining toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command: the config file plus common overrides
/// (flags win over file values).
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults to the built-in desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the multi-modality fusion strategy
    /// (simclr | concat | sep_shared | sep_sep).
    #[arg(long)]
    mm_strategy: Option<MmStrategy>,
    /// Override the multi-label classifier strategy
    /// (no_proj | proj | msa | tel | te).
    #[arg(long)]
    ml_strategy: Option<MlStrategy>,
    /// Override stage-1 epochs.
    #[arg(long)]
    stage1_epochs: Option<usize>,
    /// Override stage-2 epochs.
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Override the generator sample count.
    #[arg(long)]
    n_samples: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::desk(),
        };
        if let Some(seed) = self.seed {
            run.train.seed = seed;
            run.generator.seed = seed;
        }
        if let Some(s) = self.mm_strategy {
            run.train.mm_strategy = s;
        }
        if let Some(s) = self.ml_strategy {
            run.train.ml_strategy = s;
        }
        if let Some(e) = self.stage1_epochs {
            run.train.stage1.epochs = e;
        }
        if let Some(e) = self.stage2_epochs {
            run.train.stage2.epochs = e;
        }
        if let Some(n) = self.n_samples {
            run.generator.n_samples = n;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired-modality synthetic dataset artifact.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 multi-modality contrastive pretraining.
    PretrainMm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 pseudo-multi-label pretraining on a stage-1 checkpoint.
    PretrainMl {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe: frozen encoders, classifier trained on true labels.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output report directory (JSON + CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune: all parameters trained on true labels.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-modality pair matching on the test split.
    EvalPairmatch {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metric JSONs into one comparison table across runs.
    Report {
        /// Labeled inputs, each `name=path/to/report.json`.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Output paths may be redirected under one root via `SM3_OUT_ROOT`.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("SM3_OUT_ROOT") {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_snapshot(dir: &Path, run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.save(&dir.join("config.toml"))
}

fn write_report(dir: &Path, json: serde_json::Value, csv: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&json)?)?;
    std::fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    synthdata::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = synthdata::generate(&run.generator)?;
            synthdata::save(&dataset, &out)?;
            write_snapshot(&out, &run)?;
            println!(
                "wrote dataset: {} samples (train {} / val {} / test {}) -> {}",
                dataset.samples.len(),
                dataset.train.len(),
                dataset.val.len(),
                dataset.test.len(),
                out.display()
            );
        }
        Command::PretrainMm { config, data, out } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = load_dataset(&data)?;
            let ckpt = train::pretrain_mm(&dataset, &run)?;
            ckpt.save(&out)?;
            write_snapshot(&out, &run)?;
            std::fs::write(out.join("loss_history.csv"), ckpt.loss_history_csv())?;
            let last = ckpt.loss_history.last().unwrap();
            println!(
                "stage-1 done ({} epochs, {}): final l_total {:.6} -> {}",
                ckpt.epoch,
                run.train.mm_strategy,
                last[3],
                out.display()
            );
        }
        Command::PretrainMl {
            config,
            data,
            ckpt,
            out,
        } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = load_dataset(&data)?;
            let stage1 = Checkpoint::load(&ckpt)?;
            let ckpt2 = train::pretrain_ml(&dataset, &stage1, &run)?;
            ckpt2.save(&out)?;
            write_snapshot(&out, &run)?;
            std::fs::write(out.join("loss_history.csv"), ckpt2.loss_history_csv())?;
            let last = ckpt2.loss_history.last().unwrap();
            println!(
                "stage-2 done ({} epochs, {}): final l_ce {:.6} -> {}",
                ckpt2.epoch,
                run.train.ml_strategy,
                last[0],
                out.display()
            );
        }
        Command::Probe {
            config,
            data,
            ckpt,
            out,
        } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = load_dataset(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = eval::linear_probe(&dataset, &ckpt, &run)?;
            write_report(&out, serde_json::to_value(&report)?, &report.to_csv())?;
            write_snapshot(&out, &run)?;
            println!(
                "probe: macro-AUC {} -> {}",
                fmt_opt(report.macro_auc),
                out.display()
            );
        }
        Command::Finetune {
            config,
            data,
            ckpt,
            out,
        } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = load_dataset(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = eval::finetune(&dataset, &ckpt, &run)?;
            write_report(&out, serde_json::to_value(&report)?, &report.to_csv())?;
            write_snapshot(&out, &run)?;
            println!(
                "finetune: macro-AUC {} -> {}",
                fmt_opt(report.macro_auc),
                out.display()
            );
        }
        Command::EvalPairmatch {
            config,
            data,
            ckpt,
            out,
        } => {
            let run = config.resolve()?;
            let out = out_path(&out);
            let dataset = load_dataset(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = eval::eval_pairmatch(&dataset, &ckpt, &dataset.test)?;
            let csv = format!(
                "n,acc_at_1,acc_at_5,avg_rank\n{},{},{},{}\n",
                report.n, report.acc_at_1, report.acc_at_5, report.avg_rank
            );
            write_report(&out, serde_json::to_value(&report)?, &csv)?;
            write_snapshot(&out, &run)?;
            println!(
                "pair matching (M={}): Acc@1 {:.4}, Acc@5 {:.4}, avg rank {:.2} -> {}",
                report.n,
                report.acc_at_1,
                report.acc_at_5,
                report.avg_rank,
                out.display()
            );
        }
        Command::Report { inputs, out } => {
            let out = out_path(&out);
            let mut rows = Vec::new();
            for spec in &inputs {
                let (name, path) = spec.split_once('=').ok_or_else(|| {
                    Error::Config(format!("--input must be name=path, got {spec:?}"))
                })?;
                let path = Path::new(path);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path.to_path_buf()));
                }
                let value: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| {
                        Error::Format {
                            path: path.to_path_buf(),
                            reason: e.to_string(),
                        }
                    })?;
                rows.push((name.to_string(), value));
            }
            let table = eval::comparison_table(&rows);
            let csv = comparison_csv(&rows, &table);
            let json = serde_json::json!({
                "runs": rows.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
                "metrics": table,
            });
            write_report(&out, json, &csv)?;
            println!("report over {} runs -> {}", rows.len(), out.display());
            print!("{csv}");
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// One row per run, one column per metric present in any input.
fn comparison_csv(
    rows: &[(String, serde_json::Value)],
    table: &BTreeMap<String, BTreeMap<String, f64>>,
) -> String {
    let metrics: Vec<&String> = table.keys().collect();
    let mut out = String::from("run");
    for m in &metrics {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for (name, _) in rows {
        out.push_str(name);
        for m in &metrics {
            out.push(',');
            if let Some(v) = table[*m].get(name) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
