//! Experiment wiring shared by the command-line tool: config files, language
//! subsets, data preparation, and the train / eval / project steps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{mix_seed, splice, split_dataset, CorpusError, SynthSpec, Utterance};
use crate::eval::{report, score_dataset, EvalError, MetricsRow, TrialSet};
use crate::lstmp::ReceiverKind;
use crate::math::Vector;
use crate::networks::CheckpointError;
use crate::networks::{extract_phonetic_features, Heads, ModelBundle, Network, NetworkConfig, NetworkError, Preset};
use crate::training::{train, LossSpec, Sample, TrainConfig, TrainError, TrainLog};
use crate::viz::{pca_fit, pca_project, PcaBasis, VizError};

/// Frames of context on each side when splicing.
pub const SPLICE_CONTEXT: usize = 2;

const STREAM_PROJECT: u64 = 21;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("spec not found: {0}")]
    SpecNotFound(PathBuf),
    #[error("config not found: {0}")]
    ConfigNotFound(PathBuf),
    #[error("invalid config {path}: {msg}")]
    BadConfig { path: PathBuf, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("language {language} has {have} test utterances, {need} required ({} short)", need - have)]
    Shortfall { language: usize, have: usize, need: usize },
}

impl ExperimentError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Usage(_)
            | ExperimentError::SpecNotFound(_)
            | ExperimentError::ConfigNotFound(_)
            | ExperimentError::BadConfig { .. }
            | ExperimentError::Corpus(CorpusError::Invalid(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a command may need. Every field can also be given on the
/// command line, and flags win over the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic corpus spec (gen-corpus input). Absent means the built-in
    /// four-language spec.
    pub spec: Option<PathBuf>,
    /// Generated corpus file (JSON lines).
    pub corpus: Option<PathBuf>,
    pub preset: Preset,
    pub heads: Heads,
    /// Defaults to the weights matching `heads`.
    pub loss: Option<LossSpec>,
    pub receiver: ReceiverKind,
    pub phonetic_checkpoint: Option<PathBuf>,
    /// Model to evaluate or project with.
    pub checkpoint: Option<PathBuf>,
    /// Corpus languages used, in head order. Absent means all of them.
    pub languages: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Overrides the corpus seed (gen-corpus), the training seed (train), or
    /// the utterance selection seed (project).
    pub seed: Option<u64>,
    /// Utterances per language fed to PCA.
    pub project_utterances: usize,
    pub model_name: Option<String>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spec: None,
            corpus: None,
            preset: Preset::Desk,
            heads: Heads::LanguagesOnly,
            loss: None,
            receiver: ReceiverKind::None,
            phonetic_checkpoint: None,
            checkpoint: None,
            languages: None,
            train: TrainConfig::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            seed: None,
            project_utterances: 20,
            model_name: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ExperimentError::ConfigNotFound(path.to_path_buf()),
            _ => io_err(path)(e),
        })?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::BadConfig {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn loss_spec(&self) -> LossSpec {
        self.loss.unwrap_or(match self.heads {
            Heads::PhonesOnly => LossSpec::PHONES,
            Heads::LanguagesOnly => LossSpec::LANGUAGES,
            Heads::MultiTask => LossSpec::JOINT,
        })
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, ExperimentError> {
        field
            .as_deref()
            .ok_or_else(|| ExperimentError::Usage(format!("missing --{name} (or \"{name}\" in the config file)")))
    }
}

/// Loads a corpus spec, or the built-in one when `path` is `None`.
pub fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SynthSpec, ExperimentError> {
    let mut spec = match path {
        None => SynthSpec::default_with_seed(seed.unwrap_or(0)),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => ExperimentError::SpecNotFound(p.to_path_buf()),
                _ => io_err(p)(e),
            })?;
            SynthSpec::from_json(&text).map_err(|e| match e {
                CorpusError::Json(j) => ExperimentError::BadConfig {
                    path: p.to_path_buf(),
                    msg: j.to_string(),
                },
                other => other.into(),
            })?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

/// Validated language subset; defaults to every corpus language.
pub fn language_subset(requested: Option<&[usize]>, num_languages: usize) -> Result<Vec<usize>, ExperimentError> {
    let Some(req) = requested else {
        return Ok((0..num_languages).collect());
    };
    if req.is_empty() {
        return Err(ExperimentError::Usage("language subset is empty".into()));
    }
    for (i, &l) in req.iter().enumerate() {
        if l >= num_languages {
            return Err(ExperimentError::Usage(format!(
                "language {l} is not in the corpus ({num_languages} languages)"
            )));
        }
        if req[..i].contains(&l) {
            return Err(ExperimentError::Usage(format!("language {l} listed twice")));
        }
    }
    Ok(req.to_vec())
}

/// Spliced samples for the utterances whose language is in `subset`; the
/// label is the language's position in `subset`.
pub fn to_samples(utterances: &[Utterance], subset: &[usize]) -> Result<Vec<Sample>, ExperimentError> {
    utterances
        .par_iter()
        .filter_map(|u| {
            let lang = subset.iter().position(|&l| l == u.language)?;
            Some(splice(&u.frames, SPLICE_CONTEXT).map(|frames| Sample {
                id: u.id.clone(),
                frames,
                phone_labels: u.phone_labels.clone(),
                language: Some(lang),
            }))
        })
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

/// Samples ready for training and scoring.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub languages: Vec<usize>,
    pub num_phones: usize,
    pub input_dim: usize,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Raw test utterances of the subset, for feature projection.
    pub test_utterances: Vec<Utterance>,
}

/// Splits the whole corpus first so that every subset sees the same
/// partition of each language, then keeps the subset.
pub fn prepare(
    corpus: &[Utterance],
    languages: Option<&[usize]>,
    fractions: [f64; 3],
    split_seed: u64,
) -> Result<PreparedData, ExperimentError> {
    let first = corpus.first().ok_or(CorpusError::Empty)?;
    let num_languages = corpus.iter().map(|u| u.language + 1).max().unwrap_or(0);
    let num_phones = corpus
        .iter()
        .flat_map(|u| u.phone_labels.iter())
        .max()
        .map_or(0, |m| m + 1);
    let frame_dim = first.frames.first().map_or(0, |f| f.len());
    let languages = language_subset(languages, num_languages)?;
    let split = split_dataset(corpus, fractions, split_seed)?;
    Ok(PreparedData {
        num_phones,
        input_dim: frame_dim * (2 * SPLICE_CONTEXT + 1),
        train: to_samples(&split.train, &languages)?,
        dev: to_samples(&split.dev, &languages)?,
        test: to_samples(&split.test, &languages)?,
        test_utterances: split.test.into_iter().filter(|u| languages.contains(&u.language)).collect(),
        languages,
    })
}

/// Trains the model described by `cfg`. The phonetic bundle's LID network,
/// when given, is the frozen feature extractor.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    phonetic: Option<&ModelBundle>,
) -> Result<(ModelBundle, TrainLog), ExperimentError> {
    let extractor = match (cfg.receiver.is_none(), phonetic) {
        (true, _) => None,
        (false, None) => {
            return Err(ExperimentError::Usage(format!(
                "receiver {} needs a phonetic checkpoint",
                cfg.receiver
            )))
        }
        (false, Some(b)) => {
            if !b.receiver.is_none() {
                return Err(ExperimentError::Usage(
                    "the phonetic checkpoint must be a model without injection".into(),
                ));
            }
            Some(&b.lid_model)
        }
    };
    let net_cfg = NetworkConfig::from_preset(
        cfg.preset,
        data.input_dim,
        data.num_phones,
        data.languages.len(),
        cfg.heads,
    )
    .with_receiver(cfg.receiver, extractor.map_or(0, |n| n.config.rec_dim));
    Ok(train(
        &cfg.train,
        &net_cfg,
        &cfg.loss_spec(),
        &data.train,
        &data.dev,
        extractor,
    )?)
}

/// Metrics row plus the frame and utterance trial sets behind it.
pub fn evaluate_model(
    bundle: &ModelBundle,
    data: &PreparedData,
    name: &str,
) -> Result<(MetricsRow, TrialSet, TrialSet), ExperimentError> {
    let (frame, utt) = score_dataset(bundle, &data.test, data.languages.len())?;
    let row = report(name, &frame, &utt)?;
    Ok((row, frame, utt))
}

/// Phonetic features of `per_language` seeded test utterances per language.
/// Returns the pooled per-frame features and each frame's corpus language.
pub fn select_features(
    phonetic: &Network,
    test_utterances: &[Utterance],
    languages: &[usize],
    per_language: usize,
    seed: u64,
) -> Result<(Vec<Vector>, Vec<usize>), ExperimentError> {
    let mut chosen: Vec<&Utterance> = Vec::new();
    for &lang in languages {
        let mut pool: Vec<&Utterance> = test_utterances.iter().filter(|u| u.language == lang).collect();
        if pool.len() < per_language {
            return Err(ExperimentError::Shortfall {
                language: lang,
                have: pool.len(),
                need: per_language,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, STREAM_PROJECT), lang as u64));
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(per_language));
    }
    let per_utt: Vec<Vec<Vector>> = chosen
        .par_iter()
        .map(|u| {
            let frames = splice(&u.frames, SPLICE_CONTEXT)?;
            Ok(extract_phonetic_features(phonetic, &frames)?)
        })
        .collect::<Result<_, ExperimentError>>()?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (u, f) in chosen.iter().zip(per_utt) {
        labels.extend(std::iter::repeat_n(u.language, f.len()));
        feats.extend(f);
    }
    Ok((feats, labels))
}

/// 2-D PCA scatter of the selected features.
pub struct Projection {
    pub basis: PcaBasis,
    pub points: Vec<Vector>,
    pub languages: Vec<usize>,
}

pub fn project_features(
    phonetic: &Network,
    test_utterances: &[Utterance],
    languages: &[usize],
    per_language: usize,
    seed: u64,
) -> Result<Projection, ExperimentError> {
    let (feats, labels) = select_features(phonetic, test_utterances, languages, per_language, seed)?;
    let basis = pca_fit(&feats, 2)?;
    let points = pca_project(&basis, &feats)?;
    Ok(Projection {
        basis,
        points,
        languages: labels,
    })
}
