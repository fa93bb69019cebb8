use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paln::corpus::{generate_corpus, read_corpus, write_corpus};
use paln::eval::{format_table, metrics_csv};
use paln::experiment::{
    evaluate_model, load_spec, prepare, project_features, train_model, ExperimentConfig, ExperimentError,
};
use paln::lstmp::ReceiverKind;
use paln::networks::{load_checkpoint, save_checkpoint, Heads, ModelBundle, Preset};
use paln::viz::emit_scatter;

/// Phone-aware LSTM language identification on synthetic corpora.
///
/// Set PALN_THREADS to bound the number of worker threads.
#[derive(Parser)]
#[command(name = "paln", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSON lines).
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Corpus spec JSON; the built-in four-language spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt and train_log.csv into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        preset: Option<Preset>,
        /// phones_only, languages_only or multi_task
        #[arg(long)]
        heads: Option<Heads>,
        /// none, input_gate, forget_gate, output_gate or g_function
        #[arg(long)]
        receiver: Option<ReceiverKind>,
        /// Checkpoint of the frozen phonetic model.
        #[arg(long)]
        phonetic: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score the test split; writes the metrics CSV to --out.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Row label; defaults to the checkpoint's parent directory name.
        #[arg(long)]
        name: Option<String>,
        /// Directory for frame and utterance trial dumps.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// PCA scatter of phonetic features; writes x,y,language CSV to --out.
    Project {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Phonetic model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test utterances per language.
        #[arg(long)]
        utterances: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated corpus language indices, e.g. 2,3
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<usize>>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        if self.languages.is_some() {
            cfg.languages = self.languages.clone();
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_bundle(path: &Path) -> Result<ModelBundle, ExperimentError> {
    load_checkpoint(path).map_err(|source| ExperimentError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn load_data(cfg: &ExperimentConfig) -> Result<paln::experiment::PreparedData, ExperimentError> {
    let path = cfg.require(&cfg.corpus, "corpus")?;
    let corpus = read_corpus(path)?;
    prepare(&corpus, cfg.languages.as_deref(), cfg.split, cfg.split_seed)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenCorpus { common, spec } => {
            let mut cfg = common.load()?;
            if spec.is_some() {
                cfg.spec = spec;
            }
            let out = cfg.require(&cfg.out, "out")?;
            let spec = load_spec(cfg.spec.as_deref(), cfg.seed)?;
            let corpus = generate_corpus(&spec)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            write_corpus(out, &corpus)?;
            for (l, lang) in spec.languages.iter().enumerate() {
                let n = corpus.iter().filter(|u| u.language == l).count();
                println!("{} ({l}): {n} utterances", lang.name);
            }
        }
        Command::Train {
            common,
            data,
            preset,
            heads,
            receiver,
            phonetic,
            epochs,
            learning_rate,
            batch_size,
        } => {
            let mut cfg = common.load()?;
            data.apply(&mut cfg);
            if let Some(p) = preset {
                cfg.preset = p;
            }
            if let Some(h) = heads {
                cfg.heads = h;
            }
            if let Some(r) = receiver {
                cfg.receiver = r;
            }
            if phonetic.is_some() {
                cfg.phonetic_checkpoint = phonetic;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(s) = cfg.seed {
                cfg.train.seed = s;
            }
            let out = cfg.require(&cfg.out, "out")?.to_path_buf();
            let phonetic = match (&cfg.phonetic_checkpoint, cfg.receiver.is_none()) {
                (Some(p), false) => Some(load_bundle(p)?),
                _ => None,
            };
            let data = load_data(&cfg)?;
            let (bundle, log) = train_model(&cfg, &data, phonetic.as_ref())?;
            let ckpt = out.join("model.ckpt");
            write(&out.join("train_log.csv"), log.to_csv())?;
            if let Some(dir) = ckpt.parent() {
                fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            save_checkpoint(&bundle, &ckpt).map_err(|source| ExperimentError::Checkpoint {
                path: ckpt.clone(),
                source,
            })?;
            if let Some(best) = log.epochs.iter().min_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss)) {
                println!("best dev loss {:.6} at epoch {}", best.dev_loss, best.epoch);
            }
            println!("wrote {}", ckpt.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            name,
            trials,
        } => {
            let mut cfg = common.load()?;
            data.apply(&mut cfg);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if name.is_some() {
                cfg.model_name = name;
            }
            let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
            let out = cfg.require(&cfg.out, "out")?;
            let bundle = load_bundle(ckpt)?;
            let data = load_data(&cfg)?;
            let name = cfg.model_name.clone().unwrap_or_else(|| {
                ckpt.parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".into())
            });
            let (row, frame, utt) = evaluate_model(&bundle, &data, &name)?;
            write(out, metrics_csv(std::slice::from_ref(&row)))?;
            if let Some(dir) = trials {
                write(&dir.join("frame_trials.csv"), frame.to_csv())?;
                write(&dir.join("utt_trials.csv"), utt.to_csv())?;
            }
            print!("{}", format_table(&[row]));
        }
        Command::Project {
            common,
            data,
            checkpoint,
            utterances,
        } => {
            let mut cfg = common.load()?;
            data.apply(&mut cfg);
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(n) = utterances {
                cfg.project_utterances = n;
            }
            let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
            let out = cfg.require(&cfg.out, "out")?;
            let bundle = load_bundle(ckpt)?;
            if !bundle.receiver.is_none() {
                return Err(ExperimentError::Usage(
                    "project needs a phonetic model checkpoint without injection".into(),
                ));
            }
            let data = load_data(&cfg)?;
            let proj = project_features(
                &bundle.lid_model,
                &data.test_utterances,
                &data.languages,
                cfg.project_utterances,
                cfg.seed.unwrap_or(0),
            )?;
            let labels: Vec<String> = proj.languages.iter().map(|l| l.to_string()).collect();
            write(out, "")?;
            emit_scatter(&proj.points, &labels, out)?;
            println!(
                "{} frames, explained variance {:.6} {:.6}",
                proj.points.len(),
                proj.basis.explained_variance[0],
                proj.basis.explained_variance[1]
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("PALN_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: PALN_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
