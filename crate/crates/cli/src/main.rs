//! `pommix`: the mixture-distance pipeline as subcommands.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pommix::chemix::{AttentionKind, HeadKind};
use pommix::datasets::SplitSpec;
use pommix::descriptors::{read_descriptors, DescriptorTable};
use pommix::pipeline::{self, Encoder, Init, MixtureData, MixtureStage, Prepared, RunConfig, TrainedRun};
use pommix::{Error, Result};

use output::{Output, RunRecord};

#[derive(Parser)]
#[command(name = "pommix", version, about = "Odor-mixture perceptual distance models")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default, serde::Serialize)]
struct Opts {
    /// TOML run configuration laid over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Raw inputs for prepare-data, prepared data otherwise.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    descriptors: Option<PathBuf>,
    #[arg(long, global = true)]
    splits: Option<PathBuf>,
    /// Checkpoint or run directory; evaluate accepts several.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, global = true)]
    head: Option<Head>,
    #[arg(long, global = true)]
    attention: Option<Attention>,
    #[arg(long, global = true)]
    zero_bias: bool,
    #[arg(long, global = true)]
    augment_jaccard: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
enum Head {
    ScaledCosine,
    Cosine,
    MeanLinear,
    ConcatLinear,
    PnaLinear,
}

impl From<Head> for HeadKind {
    fn from(h: Head) -> Self {
        match h {
            Head::ScaledCosine => HeadKind::ScaledCosine,
            Head::Cosine => HeadKind::Cosine,
            Head::MeanLinear => HeadKind::MeanLinear,
            Head::ConcatLinear => HeadKind::ConcatLinear,
            Head::PnaLinear => HeadKind::PnaLinear,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
enum Attention {
    Softmax,
    Sigmoidal,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    /// Filter the odor-label table and compile the mixture corpus.
    PrepareData,
    /// Write cross-validation, leave-molecules-out and size-threshold splits.
    MakeSplits,
    /// Pre-train the molecule encoder on odor labels.
    PretrainPom,
    /// Train the mixture model per fold on frozen encoder embeddings.
    TrainChemix,
    /// Train encoder and mixture model together per fold.
    TrainPommix,
    /// Score trained runs on the test side of each fold.
    Evaluate,
    /// Descriptor-selection baseline per fold.
    BaselineSnitz,
    /// Post-hoc analyses of a trained run.
    Analyze {
        #[arg(value_enum)]
        kind: Analysis,
    },
    /// Write encoder embeddings of every known molecule.
    ExportEmbeddings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Analysis {
    WhiteNoise,
    Bias,
    Attention,
}

impl Command {
    fn name(self) -> String {
        match self {
            Command::PrepareData => "prepare-data".into(),
            Command::MakeSplits => "make-splits".into(),
            Command::PretrainPom => "pretrain-pom".into(),
            Command::TrainChemix => "train-chemix".into(),
            Command::TrainPommix => "train-pommix".into(),
            Command::Evaluate => "evaluate".into(),
            Command::BaselineSnitz => "baseline-snitz".into(),
            Command::Analyze { kind } => format!("analyze {}", kind.to_possible_value().expect("named").get_name()),
            Command::ExportEmbeddings => "export-embeddings".into(),
        }
    }
}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = value.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))?;
    if !p.exists() {
        return Err(Error::Config(format!("--{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

fn checkpoints(opts: &Opts) -> Result<&[PathBuf]> {
    if opts.checkpoint.is_empty() {
        return Err(Error::Config("--checkpoint is required".into()));
    }
    if let Some(p) = opts.checkpoint.iter().find(|p| !p.exists()) {
        return Err(Error::Config(format!("--checkpoint {} does not exist", p.display())));
    }
    Ok(&opts.checkpoint)
}

fn single_checkpoint(opts: &Opts) -> Result<&Path> {
    match checkpoints(opts)? {
        [one] => Ok(one),
        _ => Err(Error::Config("exactly one --checkpoint is expected".into())),
    }
}

fn resolve_config(opts: &Opts) -> Result<RunConfig> {
    let mut c = match &opts.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        c.seed = s;
    }
    if let Some(h) = opts.head {
        c.chemix.head = h.into();
    }
    if let Some(a) = opts.attention {
        c.chemix.attention = match a {
            Attention::Softmax => AttentionKind::Softmax,
            Attention::Sigmoidal => AttentionKind::Sigmoidal,
        };
    }
    c.chemix.zero_bias |= opts.zero_bias;
    c.augment_jaccard |= opts.augment_jaccard;
    c.validate()?;
    Ok(c)
}

struct Inputs {
    prepared: Option<Prepared>,
    table: Option<DescriptorTable>,
    splits: Option<SplitSpec>,
}

impl Inputs {
    fn prepared(&self) -> Result<&Prepared> {
        self.prepared.as_ref().ok_or_else(|| Error::Config("--data is required".into()))
    }

    fn table(&self) -> Result<&DescriptorTable> {
        self.table.as_ref().ok_or_else(|| Error::Config("--descriptors is required".into()))
    }

    fn splits(&self) -> Result<&SplitSpec> {
        self.splits.as_ref().ok_or_else(|| Error::Config("--splits is required".into()))
    }
}

/// Validates every path the command needs and reads the small inputs.
fn load_inputs(command: Command, opts: &Opts) -> Result<Inputs> {
    let (data, descriptors, splits, checkpoint) = match command {
        Command::PrepareData => (true, false, false, false),
        Command::MakeSplits => (true, false, false, false),
        Command::PretrainPom => (true, true, false, false),
        Command::TrainChemix | Command::TrainPommix => (true, true, true, true),
        Command::Evaluate | Command::BaselineSnitz => (true, true, true, command == Command::Evaluate),
        Command::Analyze { kind: Analysis::Bias } => (true, false, false, true),
        Command::Analyze { kind: Analysis::WhiteNoise } => (true, true, true, true),
        Command::Analyze { kind: Analysis::Attention } => (true, true, false, true),
        Command::ExportEmbeddings => (true, true, false, true),
    };
    if data {
        need(&opts.data, "data")?;
    }
    if checkpoint {
        checkpoints(opts)?;
    }
    let table = match (descriptors, &opts.descriptors) {
        (true, _) => Some(read_descriptors(need(&opts.descriptors, "descriptors")?)?),
        (false, Some(p)) if command == Command::PrepareData => Some(read_descriptors(p)?),
        _ => None,
    };
    let splits = if splits { Some(SplitSpec::read(need(&opts.splits, "splits")?)?) } else { None };
    let prepared = if data && command != Command::PrepareData {
        Some(Prepared::load(need(&opts.data, "data")?)?)
    } else {
        None
    };
    Ok(Inputs { prepared, table, splits })
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let opts = &cli.opts;
    let config = resolve_config(opts)?;
    let inputs = load_inputs(cli.command, opts)?;
    let out = Output::begin(need_out(opts)?)?;
    let dir = out.path();
    match cli.command {
        Command::PrepareData => {
            pipeline::prepare_data(need(&opts.data, "data")?, dir, inputs.table.as_ref())?;
        }
        Command::MakeSplits => {
            let corpus = inputs.prepared()?.corpus()?;
            for spec in pipeline::make_splits(corpus, &config.splits, config.seed)? {
                spec.write(&dir.join(pipeline::split_file_name(spec.kind)))?;
            }
        }
        Command::PretrainPom => {
            let mono = inputs.prepared()?.mono()?;
            pipeline::pretrain_encoder(mono, inputs.table()?, &config)?.save(dir)?;
        }
        Command::TrainChemix | Command::TrainPommix => {
            let prepared = inputs.prepared()?;
            let corpus = prepared.corpus()?;
            let source = single_checkpoint(opts)?;
            let stage = if cli.command == Command::TrainChemix { MixtureStage::Chemix } else { MixtureStage::Pommix };
            let from_folds = !source.join(pommix::checkpoint::MANIFEST).exists();
            if from_folds && stage == MixtureStage::Chemix {
                return Err(Error::Config(format!("{} is not an encoder checkpoint", source.display())));
            }
            let encoder = Encoder::load(&if from_folds { pipeline::fold_dir(source, 0) } else { source.to_path_buf() })?;
            let data = MixtureData::new(corpus, prepared.mono.as_ref(), inputs.table()?, &encoder.norm)?;
            let init = if from_folds { Init::Folds(source) } else { Init::Encoder(&encoder) };
            pipeline::train_folds(stage, &data, &init, inputs.splits()?, &config, Some(dir))?.write(dir)?;
        }
        Command::Evaluate => {
            let corpus = inputs.prepared()?.corpus()?;
            let mut results = Vec::new();
            for path in checkpoints(opts)? {
                let run = TrainedRun::load(path)?;
                let data = run.data(corpus, inputs.table()?)?;
                results.push(run.evaluate(&data, inputs.splits()?)?);
            }
            pipeline::write_evaluation(dir, &results)?;
        }
        Command::BaselineSnitz => {
            let corpus = inputs.prepared()?.corpus()?;
            let run = pipeline::snitz_run(corpus, inputs.table()?, inputs.splits()?, &config)?;
            run.write(dir)?;
            pipeline::write_evaluation(dir, &[pipeline::RunResult { metrics: run.metrics, predictions: vec![] }])?;
        }
        Command::Analyze { kind } => {
            let corpus = inputs.prepared()?.corpus()?;
            let run = TrainedRun::load(single_checkpoint(opts)?)?;
            match kind {
                Analysis::Bias => pipeline::write_bias(dir, &pipeline::bias_run(&run, corpus))?,
                Analysis::WhiteNoise => {
                    let data = run.data(corpus, inputs.table()?)?;
                    pipeline::write_white_noise(dir, &pipeline::white_noise_run(&run, &data, inputs.splits()?)?)?
                }
                Analysis::Attention => {
                    let data = run.data(corpus, inputs.table()?)?;
                    pipeline::write_attention(dir, &pipeline::attention_run(&run, &data, 0)?)?
                }
            }
        }
        Command::ExportEmbeddings => {
            let prepared = inputs.prepared()?;
            let path = single_checkpoint(opts)?;
            let path = if path.join(pommix::checkpoint::MANIFEST).exists() {
                path.to_path_buf()
            } else {
                pipeline::fold_dir(path, 0)
            };
            let encoder = Encoder::load(&path)?;
            let mut smiles: Vec<String> = Vec::new();
            if let Some(m) = &prepared.mono {
                smiles.extend(m.records.iter().map(|r| r.smiles.clone()));
            }
            if let Some(c) = &prepared.corpus {
                let known: std::collections::HashSet<String> = smiles.iter().cloned().collect();
                smiles.extend(c.molecules().into_iter().filter(|s| !known.contains(s)));
            }
            let emb = encoder.embed(&smiles, inputs.table()?)?;
            pipeline::write_embeddings(&dir.join("embeddings.csv"), &smiles, &emb)?;
        }
    }
    let record = RunRecord::new(&cli.command.name(), &config, opts, start.elapsed().as_secs_f64());
    out.finish(&config, &record)
}

fn need_out(opts: &Opts) -> Result<&Path> {
    opts.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace(['\n', '\r'], " "));
            ExitCode::from(1)
        }
    }
}
