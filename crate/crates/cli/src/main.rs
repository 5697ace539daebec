use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lfprobe::pipeline::{self, plan, PipelineConfig, Stage};

/// Learned-feedback-pattern probing on a toy transformer.
#[derive(Parser, Debug)]
#[command(name = "lfprobe", version, about)]
struct Cli {
    /// Pipeline config (TOML). Not needed for `init-config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print what would run without touching the filesystem.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the base model and PPO fine-tune it.
    Finetune,
    /// Select layers and record their MLP activations.
    SampleActivations,
    /// Train two autoencoders per selected layer and report MMCS.
    TrainSae,
    /// Compute contrastive deltas and fit the linear and logistic probes.
    Probe,
    /// Write the JSON summary and analysis CSVs.
    Report,
    /// Describe and classify top features through the configured LLM.
    Explain,
    /// Zero-ablate the reward-related features and compare rewards.
    Ablate,
    /// Write the lexicon TSV and contrastive JSONL interchange files.
    ExportFormats,
    /// Run every stage in order.
    All,
    /// Print the desk-scale config with the given working directory.
    InitConfig {
        #[arg(long, default_value = "lfprobe-out")]
        work_dir: PathBuf,
    },
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Finetune => vec![Stage::Finetune],
            Command::SampleActivations => vec![Stage::SampleActivations],
            Command::TrainSae => vec![Stage::TrainSae],
            Command::Probe => vec![Stage::Probe],
            Command::Report => vec![Stage::Report],
            Command::Explain => vec![Stage::Explain],
            Command::Ablate => vec![Stage::Ablate],
            Command::ExportFormats => vec![Stage::ExportFormats],
            Command::All => vec![
                Stage::Finetune,
                Stage::SampleActivations,
                Stage::TrainSae,
                Stage::Probe,
                Stage::Explain,
                Stage::ExportFormats,
                Stage::Report,
            ],
            Command::InitConfig { .. } => vec![],
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::InitConfig { work_dir } = &cli.command {
        let mut cfg = PipelineConfig::desk(work_dir);
        if let Some(seed) = cli.seed {
            cfg.run.seed = seed;
        }
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let path = cli.config.as_ref().context("--config is required")?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    for stage in cli.command.stages() {
        if cli.dry_run {
            print!("{}", plan(&cfg, stage));
            continue;
        }
        log::info!("running {}", stage.name());
        print_result(&cfg, stage)?;
    }
    Ok(())
}

fn print_result(cfg: &PipelineConfig, stage: Stage) -> anyhow::Result<()> {
    match stage {
        Stage::Finetune => {
            let out = pipeline::finetune(cfg)?;
            if let Ok(d) = pipeline::reward_deciles(&out.reward_trace) {
                println!(
                    "finetune: {} PPO steps, mean reward {:.3} -> {:.3}",
                    d.steps, d.first_decile_mean, d.last_decile_mean
                );
            } else {
                println!("finetune: no PPO steps; tuned model equals base");
            }
        }
        Stage::SampleActivations => {
            let s = pipeline::sample_activations(cfg)?;
            println!(
                "sample-activations: layers {:?}, {} rows each",
                s.selected_layers, s.rows_per_layer
            );
        }
        Stage::TrainSae => {
            for r in pipeline::train_saes(cfg)? {
                println!(
                    "train-sae: layer {} mmcs(h{}, h{}) = {:.4}",
                    r.layer, r.small, r.large, r.mmcs
                );
            }
        }
        Stage::Probe => {
            let p = pipeline::probe(cfg)?;
            println!(
                "probe: {} samples, {} held-out triples",
                p.samples.len(),
                p.split.test_triples.len()
            );
        }
        Stage::Report => {
            let s = pipeline::report(cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Stage::Explain => {
            for e in pipeline::explain(cfg)? {
                println!(
                    "explain: layer {} feature {} related={} {}",
                    e.layer, e.feature, e.related, e.description
                );
            }
        }
        Stage::Ablate => {
            let a = pipeline::ablate(cfg)?;
            println!(
                "ablate: mean reward {:.4} -> {:.4} over {} completions",
                a.before, a.after, a.n_completions
            );
        }
        Stage::ExportFormats => {
            let e = pipeline::export_formats(cfg)?;
            println!(
                "export-formats: {} lexicon entries, {} triples",
                e.lexicon_entries, e.triples
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
