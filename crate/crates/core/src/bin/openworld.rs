use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use openworld::checkpoint;
use openworld::data::{make_split, SplitManifest};
use openworld::models::Model;
use openworld::runner::{
    gradcheck_suite, load_dataset, run_eval, run_pipeline, train_stage1, RunConfig,
};
use openworld::stage2::train_stage2;

/// Open-world semi-supervised learning: novel-class discovery followed by
/// closed-world training over rebuilt label sets.
#[derive(Parser)]
#[command(name = "openworld", version)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the assumed number of novel classes (classifier head width).
    #[arg(long, global = true)]
    novel_classes: Option<usize>,
    /// Zero wall-clock fields so artifacts are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the open-world split and write its manifest.
    Split,
    /// Run the discovery stage and write its checkpoint.
    Stage1,
    /// Run the closed-world stage from the discovery checkpoint.
    Stage2,
    /// Run the full pipeline: split, both stages, final evaluation.
    Run,
    /// Score the latest checkpoint against the sealed labels.
    Eval,
    /// Run the differentiation and assignment oracle suite.
    Gradcheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this subcommand")?;
    let mut cfg = RunConfig::from_path(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(n) = cli.novel_classes {
        cfg.override_novel_classes(n);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gradcheck => {
            let results = gradcheck_suite();
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<40} {}", r.name, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", results.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} checks passed", results.len());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Split => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg.data)?;
            let split = make_split(&dataset, &cfg.split)?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("split.json");
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(&path)?),
                &SplitManifest::from_split(&split),
            )?;
            println!(
                "wrote {} ({} labeled, {} unlabeled)",
                path.display(),
                split.labeled.len(),
                split.unlabeled.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stage1 => {
            let cfg = load_config(cli)?;
            let dataset = load_dataset(&cfg.data)?;
            let split = make_split(&dataset, &cfg.split)?;
            let model = Model::new(cfg.model.clone());
            let init = model.init_params(cfg.seed);
            let result = train_stage1(
                &model,
                &init,
                &dataset,
                &split,
                &cfg.stage1,
                &cfg.augment,
                cfg.seed,
            )?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("checkpoint-stage1.bin");
            checkpoint::save(&path, &result.params, None, serde_json::to_value(&cfg.model)?)?;
            if result.aborted {
                bail!("discovery stage diverged; wrote last finite checkpoint to {}", path.display());
            }
            if let Some(last) = result.history.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stage2 => {
            let cfg = load_config(cli)?;
            let ckpt = cli.out.join("checkpoint-stage1.bin");
            if !ckpt.exists() {
                bail!("{} not found; run the stage1 subcommand first", ckpt.display());
            }
            let (start, _, _) = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&cfg.data)?;
            let split = make_split(&dataset, &cfg.split)?;
            let model = Model::new(cfg.model.clone());
            let result = train_stage2(&model, &start, &dataset, &split, &cfg.stage2, &cfg.augment)?;
            let path = cli.out.join("checkpoint-stage2.bin");
            checkpoint::save(&path, &result.params, None, serde_json::to_value(&cfg.model)?)?;
            if result.aborted {
                bail!("closed-world stage diverged; wrote last finite checkpoint to {}", path.display());
            }
            if let Some(last) = result.history.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run => {
            let cfg = load_config(cli)?;
            let report = run_pipeline(&cfg, &cli.out, cli.deterministic)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            if report.stage1_aborted || report.stage2_aborted {
                bail!("a training stage diverged; see report.json");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval => {
            let cfg = load_config(cli)?;
            let metrics = run_eval(&cfg, &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
