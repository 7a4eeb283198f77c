use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diagvqa::harness::{self, RunConfig, Variant};
use diagvqa::model::load_checkpoint;
use diagvqa::pipeline::score_video;
use diagvqa::train::{Stage, StageReport};
use diagvqa::{Error, FrameSequence, Result};

#[derive(Parser)]
#[command(name = "diagvqa", version, about = "Diagnostic video quality assessment: synthesis, training, inference, evaluation")]
struct Cli {
    /// JSON run configuration; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root holding corpora/, checkpoints/, logs/ and reports/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ablation variant tag(s); comma-separated or repeated for `ablate`.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Artifact detection threshold in (0, 1).
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Stage-1/2/3 corpora under <out>/corpora.
    Synth,
    /// Train one stage (with its prerequisite checkpoint) or all stages.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: Option<u8>,
    },
    /// Score a video (raw file or PNG directory); FR iff a reference is given.
    Infer {
        distorted: PathBuf,
        reference: Option<PathBuf>,
        /// Checkpoint directory; defaults to the latest final checkpoint under <out>.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Correlation and detection tables on the corpus splits.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train variants over the configured seeds and tabulate held-out SROCC.
    Ablate,
    /// Corpus counts, last-epoch metrics, checkpoint and reports present.
    Summarize,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    if !matches!(cli.command, Command::Ablate) {
        match cli.variant.as_slice() {
            [] => {}
            [v] => cfg.variant = *v,
            _ => return Err(Error::Config("only `ablate` takes several variants".into())),
        }
    }
    cfg.validate()?;
    cfg.out_dir()?;
    Ok(cfg)
}

fn checkpoint(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => harness::latest_checkpoint(&cfg.checkpoints_dir()?),
    }
}

fn write_report(dir: &Path, name: &str, json: &str, text: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, json)?;
    if let Some(t) = text {
        fs::write(dir.join(format!("{name}.txt")), t)?;
    }
    Ok(path)
}

fn print_stage(r: &StageReport) {
    let last = r.last();
    let metrics: Vec<String> = last.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{} epoch {}: {}", r.stage, last.epoch, metrics.join(" "));
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Synth => {
            let corpus = harness::synth(&cfg)?;
            println!("wrote {}", cfg.corpora_dir()?.display());
            print!("{}", corpus.summary());
        }
        Command::Train { stage } => {
            let stage = stage.map(|n| Stage::from_number(n)).transpose()?;
            for r in harness::train(&cfg, stage)? {
                print_stage(&r);
            }
        }
        Command::Infer { distorted, reference, checkpoint: ckpt } => {
            let (model, _) = load_checkpoint(&checkpoint(&cfg, ckpt)?)?;
            let dist = FrameSequence::load(distorted)?;
            let reference = reference.as_deref().map(FrameSequence::load).transpose()?;
            let report = score_video(&dist, reference.as_ref(), &model)?.with_verdicts(cfg.threshold)?;
            let stem = distorted.file_stem().map_or("video".into(), |s| s.to_string_lossy().into_owned());
            let path = write_report(&cfg.reports_dir()?, &format!("infer-{stem}"), &serde_json::to_string_pretty(&report)?, None)?;
            println!("q_video {:.4}", report.q_video);
            let flagged = report.flagged();
            println!("flagged {}", if flagged.is_empty() { "none".to_string() } else { flagged.join(", ") });
            println!("report {}", path.display());
        }
        Command::Eval { checkpoint: ckpt } => {
            let (model, _) = load_checkpoint(&checkpoint(&cfg, ckpt)?)?;
            let corpus = harness::load_corpus(&cfg)?;
            let report = harness::evaluate(&model, &corpus, cfg.threshold)?;
            let text = report.render();
            write_report(&cfg.reports_dir()?, "eval", &serde_json::to_string_pretty(&report)?, Some(&text))?;
            print!("{text}");
        }
        Command::Ablate => {
            let variants = if cli.variant.is_empty() { vec![Variant::Full, Variant::V1SingleExpert] } else { cli.variant.clone() };
            print!("{}", harness::ablate(&cfg, &variants)?.render());
        }
        Command::Summarize => print!("{}", harness::summarize(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
