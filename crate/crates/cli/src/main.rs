//! Command-line harness: train, eval, gradcheck, corpus validation, and
//! episode inspection over the core library.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmfsod_core::episodes::sample_episode;
use mmfsod_core::harness::{
    evaluate, gradcheck, metrics_to_ndjson, train, validate_corpus_file, Checkpoint, RunConfig,
};

#[derive(Parser)]
#[command(name = "mmfsod", version, about = "Multi-modal few-shot detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodic training and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (no parameter updates, rectifier inactive).
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Module selector: aggregate | rectification_loss | task_encoding | full
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corpus utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Episode utilities.
    Episode {
        #[command(subcommand)]
        command: EpisodeCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Schema + invariant check with per-variant token-length statistics.
    Validate {
        #[arg(long)]
        path: PathBuf,
    },
}

#[derive(Subcommand)]
enum EpisodeCommand {
    /// Sample one episode and dump it as JSON for inspection.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus overrides. `--set key=value` accepts any RunConfig field
/// with a JSON-encoded value (bare strings also work).
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Drop the language branch (vision-only prototypes).
    #[arg(long, default_value_t = false)]
    no_language: bool,
    /// Drop the rectification loss.
    #[arg(long, default_value_t = false)]
    no_rectify: bool,
    /// Use a separately initialized attention layer for the language branch.
    #[arg(long, default_value_t = false)]
    decoupled_attention: bool,
    /// Generic override, repeatable: --set k=1 --set text_variant=llm
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut value: serde_json::Value = match &self.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&raw).with_context(|| "parsing config JSON")?
            }
            None => serde_json::json!({}),
        };
        let obj = value
            .as_object_mut()
            .context("config must be a JSON object")?;
        for kv in &self.sets {
            let (key, raw) = kv
                .split_once('=')
                .with_context(|| format!("--set needs KEY=VALUE, got '{kv}'"))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(key.to_string(), parsed);
        }
        if let Some(seed) = self.seed {
            obj.insert("seed".into(), serde_json::json!(seed));
        }
        if let Some(steps) = self.steps {
            obj.insert("steps".into(), serde_json::json!(steps));
        }
        if self.no_language {
            obj.insert("no_language".into(), serde_json::json!(true));
        }
        if self.no_rectify {
            obj.insert("no_rectify".into(), serde_json::json!(true));
        }
        if self.decoupled_attention {
            obj.insert("decoupled_attention".into(), serde_json::json!(true));
        }
        let cfg = RunConfig::from_json(&value.to_string())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// Metrics log output path (newline-delimited JSON).
    #[arg(long, default_value = "metrics.ndjson")]
    metrics: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional JSON-lines dump of every detection.
    #[arg(long)]
    dump_detections: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let config = args.config.build()?;
            let out = train(&config)?;
            out.checkpoint.save(&args.checkpoint)?;
            std::fs::write(&args.metrics, metrics_to_ndjson(&out.metrics))?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "trained {} steps: loss_det {:.4}, loss_rect {:.4}, acc {:.3}, map {:.3}",
                    out.metrics.len(),
                    last.loss_det,
                    last.loss_rect,
                    last.acc,
                    last.map
                );
            } else {
                println!("trained 0 steps (checkpoint is the initialization)");
            }
            println!(
                "checkpoint -> {}, metrics -> {}",
                args.checkpoint.display(),
                args.metrics.display()
            );
        }
        Command::Eval(args) => {
            let config = args.config.build()?;
            let checkpoint = Checkpoint::load(&args.checkpoint)?;
            let (report, detections) = evaluate(&checkpoint, &config)?;
            if let Some(path) = args.dump_detections {
                let mut lines = String::new();
                for d in &detections {
                    lines.push_str(&serde_json::to_string(d)?);
                    lines.push('\n');
                }
                std::fs::write(&path, lines)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { module, seed } => {
            let report = gradcheck(&module, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                bail!(
                    "gradient check failed: max rel err {} > {}",
                    report.max_rel_err,
                    report.threshold
                );
            }
        }
        Command::Corpus { command } => match command {
            CorpusCommand::Validate { path } => {
                let report = validate_corpus_file(&path);
                println!("{}", serde_json::to_string_pretty(&report)?);
                if !report.ok() {
                    bail!("corpus validation found {} error(s)", report.errors.len());
                }
            }
        },
        Command::Episode { command } => match command {
            EpisodeCommand::Sample {
                config,
                episode_seed,
                out,
            } => {
                let config = config.build()?;
                let data = mmfsod_core::harness::train::load_run_data(&config)?;
                let spec = mmfsod_core::harness::train::episode_spec(&config);
                let episode = sample_episode(&data.catalog, &data.corpus, &spec, episode_seed)?;
                let json = serde_json::to_string_pretty(&episode)?;
                match out {
                    Some(path) => std::fs::write(path, json)?,
                    None => println!("{json}"),
                }
            }
        },
    }
    Ok(())
}
