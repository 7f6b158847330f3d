//! Command-line entry point.

mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{parse_override, ExperimentConfig};
use crate::container::write_file;
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_MEASUREMENT_REQUIRED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "protoabstain", version, about = "Cost-aware multimodal prototype classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable (`cal.lr=0.05`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory for all artifacts.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Dataset manifest; synthetic data is generated when omitted.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample and per-α parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Genetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Cal,
    Alp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality dataset and split it.
    Synth,
    /// One-hot encode nucleotide sequences from a `sample_id,sequence` CSV.
    Encode {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sub_rate: f64,
        #[arg(long, default_value_t = 0)]
        insertions: usize,
        #[arg(long, default_value_t = 0)]
        deletions: usize,
        #[arg(long, default_value_t = 0.0)]
        positional_strength: f64,
        #[arg(long, default_value_t = crate::data::MAX_WIDTH)]
        max_width: usize,
    },
    /// Stratified train/validation/test split of a dataset.
    Split,
    TrainProtopnet {
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
    },
    TrainPrototree {
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
    },
    /// Train CAL; trains both ProtoPNets first unless checkpoints are given.
    TrainCal {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        genetic: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train ALP; trains both ProtoTrees first unless checkpoints are given.
    TrainAlp {
        #[arg(long)]
        image_tree: Option<PathBuf>,
        #[arg(long)]
        genetic_tree: Option<PathBuf>,
    },
    /// Conformal band for a CAL checkpoint on the validation split.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Per-sample predictions with genetic reads only where required.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        band: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "sample-id")]
        sample_ids: Vec<u64>,
        /// Treat genetic measurements as unavailable.
        #[arg(long)]
        no_genetic: bool,
    },
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        band: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    SweepAlpha {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    Ablate {
        #[arg(long, value_enum)]
        which: AblationKind,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Most similar prototypes for one sample.
    AnalyzeLocal {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample_id: u64,
    },
    /// Nearest training patches for one prototype.
    AnalyzeGlobal {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prototype: usize,
        #[arg(long, value_enum, default_value = "image")]
        modality: ModalityArg,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Summarize a checkpoint, band or dataset manifest.
    Inspect { path: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Encode { .. } => "encode",
            Command::Split => "split",
            Command::TrainProtopnet { .. } => "train-protopnet",
            Command::TrainPrototree { .. } => "train-prototree",
            Command::TrainCal { .. } => "train-cal",
            Command::TrainAlp { .. } => "train-alp",
            Command::Calibrate { .. } => "calibrate",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::SweepAlpha { .. } => "sweep-alpha",
            Command::Ablate { .. } => "ablate",
            Command::AnalyzeLocal { .. } => "analyze-local",
            Command::AnalyzeGlobal { .. } => "analyze-global",
            Command::Inspect { .. } => "inspect",
        }
    }
}

/// Maps errors to exit codes: bad input is a validation failure, a missing
/// genetic measurement has its own code, everything else is a runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MeasurementRequired(_) | Error::GeneticRequired { .. } => EXIT_MEASUREMENT_REQUIRED,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::SplitOverlap(_)
        | Error::LabelOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::TopologyMismatch(_)
        | Error::EmptyCalibration
        | Error::EmptyDataset { .. }
        | Error::SequenceOverflow { .. }
        | Error::InvalidBase(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Json(_) => EXIT_VALIDATION,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// One `key=value` log line on stderr.
pub fn log(event: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        let v = if v.contains(char::is_whitespace) { format!("{v:?}") } else { v.clone() };
        line.push_str(&format!(" {k}={v}"));
    }
    eprintln!("{line}");
}

/// The output directory plus the list of artifacts written to it.
pub struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Path for a new artifact, recorded in the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.artifact(name);
        write_file(&path, bytes)?;
        Ok(path)
    }

    /// Records the command in `manifest.json`: config, hash, seed, version
    /// and artifact digests, one entry per command. No timestamps, so
    /// reruns produce identical bytes.
    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.artifacts.sort();
        self.artifacts.dedup();
        let mut digests = serde_json::Map::new();
        for name in &self.artifacts {
            let path = self.root.join(name);
            if let Ok(bytes) = std::fs::read(&path) {
                digests.insert(name.clone(), json!(hex::encode(Sha256::digest(&bytes))));
            }
        }
        let entry = json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "artifacts": digests,
        });
        let path = self.root.join("manifest.json");
        let mut manifest: serde_json::Map<String, serde_json::Value> = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        manifest.insert(command.to_string(), entry);
        write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let mut overrides = g.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(o) = &g.output {
        overrides.push(("output_dir".into(), toml_string(&o.to_string_lossy())));
    }
    if let Some(d) = &g.dataset {
        overrides.push(("dataset".into(), toml_string(&d.to_string_lossy())));
    }
    if let Some(s) = g.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    ExperimentConfig::resolve(g.config.as_deref(), &env, &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            log("error", &[("code", code.to_string()), ("message", e.to_string())]);
            code
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A pool that is already configured keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let name = cli.command.name();
    if let Command::Inspect { path } = &cli.command {
        commands::inspect(path)?;
        return Ok(EXIT_OK);
    }
    let mut run = RunDir::new(&cfg.output_dir)?;
    log(
        "start",
        &[
            ("command", name.to_string()),
            ("config_hash", cfg.hash()),
            ("seed", cfg.seed.to_string()),
        ],
    );
    let code = commands::dispatch(&cli.command, &cfg, &mut run)?;
    run.finish(name, &cfg)?;
    log("done", &[("command", name.to_string()), ("exit", code.to_string())]);
    Ok(code)
}
