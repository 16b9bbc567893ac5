use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nedict::biasdec::BiasMethod;
use nedict::corpus::Split;
use nedict::detector::DetectorFeature;
use nedict::pipeline::{self, BiasFrom, Layout, RunConfig, FULL, OUT_ENV};

/// Dictionary-based named-entity detection and contextual biasing for
/// direct speech translation, on a synthetic corpus.
#[derive(Parser, Debug)]
#[command(name = "nedict", version)]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for all artifacts.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads for per-utterance work (overrides the config).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Corpus generation seed (overrides the config); training stages
    /// take their seeds from their own config sections.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Parallel,
    Sequential,
}

impl From<MethodArg> for BiasMethod {
    fn from(m: MethodArg) -> BiasMethod {
        match m {
            MethodArg::Parallel => BiasMethod::Parallel,
            MethodArg::Sequential => BiasMethod::Sequential,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BiasArg {
    /// Entities flagged by the full detector.
    Detector,
    /// Gold entities of each utterance.
    Oracle,
    /// CLAS model with only the no-bias vector.
    Empty,
    /// The base model without bias attention.
    None,
}

impl From<BiasArg> for BiasFrom {
    fn from(b: BiasArg) -> BiasFrom {
        match b {
            BiasArg::Detector => BiasFrom::Detector,
            BiasArg::Oracle => BiasFrom::Oracle,
            BiasArg::Empty => BiasFrom::Empty,
            BiasArg::None => BiasFrom::None,
        }
    }
}

#[derive(Args, Debug)]
struct SplitOpt {
    /// Corpus split to process.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and save the synthetic corpus.
    GenData,
    /// Jointly train the shared encoder and the base translation model.
    TrainEncoder {
        /// Number of epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export text/speech cosine-similarity heatmaps (CSV and PGM).
    Heatmap {
        #[command(flatten)]
        split: SplitOpt,
        /// Number of utterances to export.
        #[arg(long, default_value_t = 3)]
        count: usize,
    },
    /// Train the entity detector on frozen encoder features.
    TrainDetector {
        /// Name of the saved detector.
        #[arg(long, default_value = FULL)]
        name: String,
        /// Features to switch off (repeatable).
        #[arg(long = "without", value_parser = parse_feature)]
        without: Vec<DetectorFeature>,
        /// Number of epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score every dictionary entry against every utterance and threshold.
    Detect {
        /// Detector name, or `cosine` for the similarity baseline.
        #[arg(long, default_value = FULL)]
        detector: String,
        #[command(flatten)]
        split: SplitOpt,
        /// Detection threshold (overrides the config).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Recall and retrieved counts over a threshold grid.
    SweepThreshold {
        /// Detector name, or `cosine` for the similarity baseline.
        #[arg(long, default_value = FULL)]
        detector: String,
        #[command(flatten)]
        split: SplitOpt,
        /// Lowest threshold.
        #[arg(long, default_value_t = 0.05)]
        from: f64,
        /// Highest threshold.
        #[arg(long, default_value_t = 0.95)]
        to: f64,
        /// Number of thresholds.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Fine-tune a CLAS model from the base model.
    TrainClas {
        /// Bias attention placement.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Number of epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Beam-decode a split, optionally with bias lists.
    Translate {
        /// Source of the bias list.
        #[arg(long, value_enum, default_value = "detector")]
        bias_from: BiasArg,
        /// CLAS model to use.
        #[arg(long, value_enum, default_value = "parallel")]
        method: MethodArg,
        /// Beam width (overrides the config).
        #[arg(long)]
        beam: Option<usize>,
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Base-model beam search with class/generic LM shallow fusion.
    DecodeFused {
        /// Fusion weight.
        #[arg(long)]
        clm_lambda: Option<f64>,
        /// Beam width (overrides the config).
        #[arg(long)]
        beam: Option<usize>,
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Score a hypothesis file (BLEU and entity accuracy).
    Evaluate {
        /// Hypothesis file name under `hyps/`, without extension.
        #[arg(long)]
        hyps: String,
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Train and evaluate every cumulative detector configuration.
    Ablate {
        #[command(flatten)]
        split: SplitOpt,
    },
}

fn parse_feature(s: &str) -> std::result::Result<DetectorFeature, String> {
    s.parse().map_err(|e: nedict::Error| {
        let all: Vec<&str> = DetectorFeature::ALL.iter().map(|f| f.as_str()).collect();
        format!("{e}; expected one of {}", all.join(", "))
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let layout = Layout::resolve(cli.out.clone());
    match cli.command {
        Command::GenData => {
            let corpus = pipeline::gen_data(&cfg, &layout)?;
            println!(
                "corpus: {} train / {} dev / {} test utterances, {} dictionary entries, {} text pairs",
                corpus.splits.train.len(),
                corpus.splits.dev.len(),
                corpus.splits.test.len(),
                corpus.dictionary.len(),
                corpus.mt.len()
            );
            for (name, hash) in pipeline::corpus_hashes(&layout)? {
                println!("{hash}  {name}");
            }
        }
        Command::TrainEncoder { epochs } => {
            if let Some(e) = epochs {
                cfg.joint.epochs = e;
            }
            let (_, report) = pipeline::train_encoder(&cfg, &layout)?;
            println!(
                "dev loss {:.4}, dev alignment margin {:.3}",
                report.final_dev_loss, report.dev_alignment_margin
            );
        }
        Command::Heatmap { split, count } => {
            for h in pipeline::export_heatmaps(&layout, split.split.into(), count)? {
                println!("{}: margin {:.3} -> {}", h.utterance_id, h.margin, h.pgm.display());
            }
        }
        Command::TrainDetector { name, without, epochs } => {
            if let Some(e) = epochs {
                cfg.detector_train.epochs = e;
            }
            let (mut m, mut t) = (cfg.detector.clone(), cfg.detector_train.clone());
            for f in without {
                (m, t) = f.disable(&m, &t);
            }
            let (_, report) = pipeline::train_detector_variant(&cfg, &layout, &name, &m, &t)?;
            if let Some(last) = report.epochs.last() {
                println!("{last:?}");
            }
            println!("saved {}", layout.detector_model(&name).display());
        }
        Command::Detect { detector, split, threshold } => {
            let t = threshold.unwrap_or(cfg.threshold);
            let report = pipeline::detect_split(&cfg, &layout, &detector, split.split.into(), t)?;
            println!("{report}");
        }
        Command::SweepThreshold {
            detector,
            split,
            from,
            to,
            steps,
        } => {
            anyhow::ensure!(steps >= 1 && from <= to, "need steps >= 1 and from <= to");
            let ts: Vec<f64> = (0..steps)
                .map(|i| if steps == 1 { from } else { from + (to - from) * i as f64 / (steps - 1) as f64 })
                .collect();
            for r in pipeline::sweep_thresholds(&cfg, &layout, &detector, split.split.into(), &ts)? {
                println!(
                    "{:.3}: micro recall {}, retrieved {:.3}",
                    r.threshold,
                    r.micro_recall.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v)),
                    r.retrieved
                );
            }
        }
        Command::TrainClas { method, epochs } => {
            if let Some(m) = method {
                cfg.clas.method = m.into();
            }
            if let Some(e) = epochs {
                cfg.clas.epochs = e;
            }
            let model = pipeline::train_clas_stage(&cfg, &layout)?;
            println!("saved {}", layout.clas_model(model.method).display());
        }
        Command::Translate {
            bias_from,
            method,
            beam,
            split,
        } => {
            if let Some(b) = beam {
                cfg.beam.beam = b;
            }
            let hyps = pipeline::translate_split(&cfg, &layout, split.split.into(), bias_from.into(), method.into())?;
            println!("{} hypotheses written", hyps.len());
        }
        Command::DecodeFused { clm_lambda, beam, split } => {
            if let Some(b) = beam {
                cfg.beam.beam = b;
            }
            let lambda = clm_lambda.unwrap_or(cfg.fusion.lambda);
            let (hyps, counters) = pipeline::decode_fused_split(&cfg, &layout, split.split.into(), lambda)?;
            println!(
                "{} hypotheses written ({} class-LM and {} generic-LM consultations)",
                hyps.len(),
                counters.class_lm,
                counters.generic_lm
            );
        }
        Command::Evaluate { hyps, split } => {
            let report = pipeline::evaluate_hypotheses(&layout, &hyps, split.split.into())?;
            println!("{hyps}: {report}");
        }
        Command::Ablate { split } => {
            for row in pipeline::ablate(&cfg, &layout, split.split.into())? {
                println!(
                    "{:<16} {} | retrieved at matched recall {}",
                    row.name,
                    row.report,
                    row.retrieved_at_matched.map_or("n/a".to_string(), |v| format!("{v:.2}"))
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use nedict::pipeline::COSINE;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn cosine_is_a_valid_detector_name() {
        let cli = Cli::try_parse_from(["nedict", "detect", "--detector", COSINE, "--split", "dev"]).unwrap();
        assert!(matches!(cli.command, Command::Detect { .. }));
    }

    #[test]
    fn unknown_feature_is_rejected() {
        assert!(Cli::try_parse_from(["nedict", "train-detector", "--without", "bogus"]).is_err());
        assert!(Cli::try_parse_from(["nedict", "train-detector", "--without", "margin"]).is_ok());
    }
}
