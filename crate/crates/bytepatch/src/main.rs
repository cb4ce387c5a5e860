use std::path::PathBuf;
use std::process::ExitCode;

use bytepatch::config::PipelineConfig;
use bytepatch::error::{Error, Result};
use bytepatch::pipeline::{gradcheck_components, ModelChoice, PatchOverrides, Pipeline};
use bytepatch_core::gradcheck::Component;
use bytepatch_core::model::{SampleMode, StrategyKind};
use bytepatch_core::train::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Byte-level patch adapters around a pretrained transformer body.
#[derive(Parser, Debug)]
#[command(name = "bytepatch", version, about = "Byte-level patch adapters around a pretrained transformer body")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; relative paths inside it resolve against
    /// its directory.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set stage_a.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress progress lines on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Which trained model to load.
    #[arg(long, value_enum, default_value = "stage-b")]
    model: ModelArg,
    /// Checkpoint path, overriding the configured location.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelArg {
    StageA,
    StageB,
    Teacher,
}

impl From<ModelArg> for ModelChoice {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::StageA => ModelChoice::StageA,
            ModelArg::StageB => ModelChoice::StageB,
            ModelArg::Teacher => ModelChoice::Teacher,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StageArg {
    A,
    B,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::A => Stage::A,
            StageArg::B => Stage::B,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StrategyArg {
    Entropy,
    Fixed,
    Whitespace,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Entropy => StrategyKind::Entropy,
            StrategyArg::Fixed => StrategyKind::Fixed,
            StrategyArg::Whitespace => StrategyKind::Whitespace,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the BPE vocabulary on the Stage A corpus.
    TrainBpe(Common),
    /// Pretrain the toy transformer body as a token LM (Stage 0).
    PretrainBody(Common),
    /// Train the small byte LM used for entropy patching.
    TrainEntropyLm(Common),
    /// Train the adapter (stage A) or the body attention (stage B).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, ignore_case = true)]
        stage: StageArg,
        /// Continue from the optimizer state saved in this stage's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Held-out BPB and multiple-choice accuracy; writes an EvalReport.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Task files (JSON lines of {prompt, choices, gold}) added to the
        /// configured ones.
        #[arg(long = "task", value_name = "FILE")]
        tasks: Vec<PathBuf>,
        /// Also write a plain-text summary table here.
        #[arg(long, value_name = "FILE")]
        summary: Option<PathBuf>,
    },
    /// Segment files and print patch statistics as JSON.
    PatchStats {
        #[command(flatten)]
        common: Common,
        /// Input files, each read as one document of raw bytes.
        #[arg(required = true, value_name = "FILE")]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Fixed stride.
        #[arg(long)]
        k: Option<usize>,
        /// Entropy threshold in nats; calibrated on the inputs when unset.
        #[arg(long)]
        threshold: Option<f64>,
        /// Longest patch; 0 disables the cap.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Continue a prompt byte by byte.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// UTF-8 prompt.
        #[arg(long, conflicts_with = "prompt_hex")]
        prompt: Option<String>,
        /// Prompt as hex bytes.
        #[arg(long)]
        prompt_hex: Option<String>,
        #[arg(long)]
        max_bytes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-choice scores of multiple-choice items as JSON lines.
    ScoreMc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "task", value_name = "FILE")]
        tasks: Vec<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Component to check; all when omitted.
        #[arg(long)]
        component: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter groups with counts and trainable flags for a stage.
    PartitionReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, ignore_case = true)]
        stage: StageArg,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let cfg = PipelineConfig::load(c.config.as_deref(), &c.overrides)?;
    let mut p = Pipeline::new(cfg);
    p.verbose = !c.quiet;
    Ok(p)
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|source| Error::Json { context: "output".into(), source })?;
    println!("{s}");
    Ok(())
}

fn parse_hex(s: &str) -> Result<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !s.len().is_multiple_of(2) {
        return Err(Error::Config("hex prompt has an odd number of digits".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Config(format!("bad hex byte {:?}", &s[i..i + 2]))))
        .collect()
}

fn summary_table(r: &bytepatch_core::eval::EvalReport) -> String {
    let mut out = format!("model {} config {}\n", r.model_tag, r.config_hash);
    if let Some(b) = r.bpb {
        out += &format!("bpb {b:.4}\n");
    }
    if let Some(m) = r.mean_patch_size {
        out += &format!("mean patch {m:.3}\n");
    }
    out += &format!("{:<32} {:>6} {:>8} {:>9}\n", "task", "items", "correct", "accuracy");
    for t in &r.tasks {
        out += &format!("{:<32} {:>6} {:>8} {:>9.4}\n", t.name, t.items, t.correct, t.accuracy);
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBpe(c) => print(&pipeline(&c)?.train_bpe()?),
        Command::PretrainBody(c) => print(&pipeline(&c)?.pretrain_body()?),
        Command::TrainEntropyLm(c) => print(&pipeline(&c)?.train_entropy_lm()?),
        Command::Train { common, stage, resume } => print(&pipeline(&common)?.train_stage(stage.into(), resume)?),
        Command::Eval { common, model, tasks, summary } => {
            let p = pipeline(&common)?;
            let r = p.eval(model.model.into(), model.checkpoint.as_deref(), &tasks)?;
            let table = summary_table(&r);
            if let Some(path) = summary {
                std::fs::write(&path, &table).map_err(|source| Error::Io { path: path.clone(), source })?;
            }
            eprint!("{table}");
            print(&r)
        }
        Command::PatchStats { common, inputs, strategy, k, threshold, max_len } => {
            let p = pipeline(&common)?;
            let o = PatchOverrides { strategy: strategy.map(Into::into), k, threshold, max_len };
            print(&p.patch_stats(&inputs, o)?)
        }
        Command::Generate { common, model, prompt, prompt_hex, max_bytes, mode, temperature, seed } => {
            let p = pipeline(&common)?;
            let g = &p.cfg.generate;
            let prompt = match (prompt, prompt_hex) {
                (_, Some(h)) => parse_hex(&h)?,
                (Some(s), None) => s.into_bytes(),
                (None, None) => g.prompt.clone().into_bytes(),
            };
            let temperature = temperature.unwrap_or(g.temperature);
            let seed = seed.unwrap_or(g.seed);
            let mode = match mode {
                Some(ModeArg::Greedy) => SampleMode::Greedy,
                Some(ModeArg::Sample) => SampleMode::Sample { temperature, seed },
                None if temperature > 0.0 => SampleMode::Sample { temperature, seed },
                None => SampleMode::Greedy,
            };
            print(&p.generate(model.model.into(), model.checkpoint.as_deref(), &prompt, max_bytes.unwrap_or(g.max_bytes), mode)?)
        }
        Command::ScoreMc { common, model, tasks } => {
            let p = pipeline(&common)?;
            for s in p.score_mc(model.model.into(), model.checkpoint.as_deref(), &tasks)? {
                println!("{}", serde_json::to_string(&s).map_err(|source| Error::Json { context: "score".into(), source })?);
            }
            Ok(())
        }
        Command::Gradcheck { common, component, tolerance, seed } => {
            PipelineConfig::load(common.config.as_deref(), &common.overrides)?;
            let components = match component {
                Some(c) => vec![Component::parse(&c)?],
                None => Component::ALL.to_vec(),
            };
            let reports = gradcheck_components(&components, tolerance, seed)?;
            print(&reports)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.component.name()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Config(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::PartitionReport { common, stage, checkpoint } => {
            let p = pipeline(&common)?;
            print(&p.partition_report(stage.into(), checkpoint.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

