//! Full-sequence BPTT training with phone, language and joint cross-entropy
//! objectives, optimized by SGD with momentum.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::mix_seed;
use crate::lstmp::LstmParams;
use crate::math::{cross_entropy, softmax, Vector};
use crate::networks::{extract_phonetic_features, ModelBundle, Network, NetworkConfig, NetworkError};

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("utterance {id}: missing {head} labels")]
    MissingLabels { id: String, head: &'static str },
    #[error("utterance {id}: {head} label {label} out of range for {targets} targets")]
    LabelOutOfRange {
        id: String,
        head: &'static str,
        label: usize,
        targets: usize,
    },
    #[error("loss weights the {0} head but the network has none")]
    HeadInactive(&'static str),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("parameter/gradient shape mismatch")]
    ShapeMismatch,
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Weights of the phone and language cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub lambda_phone: f64,
    pub lambda_lang: f64,
}

impl LossSpec {
    pub const PHONES: LossSpec = LossSpec {
        lambda_phone: 1.0,
        lambda_lang: 0.0,
    };
    pub const LANGUAGES: LossSpec = LossSpec {
        lambda_phone: 0.0,
        lambda_lang: 1.0,
    };
    pub const JOINT: LossSpec = LossSpec {
        lambda_phone: 1.0,
        lambda_lang: 1.0,
    };

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda_phone) || !ok(self.lambda_lang) || self.lambda_phone + self.lambda_lang <= 0.0 {
            return Err(TrainError::BadConfig(format!(
                "loss weights must be >= 0 with a positive sum, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Utterances per update.
    pub batch_size: usize,
    /// Halve the learning rate after `patience` epochs without a dev-loss
    /// improvement.
    pub lr_halving: bool,
    pub patience: usize,
    pub seed: u64,
    /// Global L2 norm bound on each update's gradient.
    pub gradient_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 10,
            batch_size: 8,
            lr_halving: true,
            patience: 1,
            seed: 0,
            gradient_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.gradient_clip > 0.0) {
            return bad(format!("gradient_clip {}", self.gradient_clip));
        }
        Ok(())
    }
}

/// One training sequence: network-ready (spliced) frames plus labels.
/// `language` is the index within the model's language head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub frames: Vec<Vector>,
    pub phone_labels: Vec<usize>,
    pub language: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc_phone: Option<f64>,
    pub dev_acc_lang: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,dev_loss,dev_acc_phone,dev_acc_lang,lr";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.dev_loss,
                opt(e.dev_acc_phone),
                opt(e.dev_acc_lang),
                e.lr
            );
        }
        s
    }
}

fn check_sample(config: &NetworkConfig, loss: &LossSpec, s: &Sample) -> Result<(), TrainError> {
    if loss.lambda_phone > 0.0 {
        if !config.heads.has_phone() {
            return Err(TrainError::HeadInactive("phone"));
        }
        if s.phone_labels.len() != s.frames.len() {
            return Err(TrainError::MissingLabels {
                id: s.id.clone(),
                head: "phone",
            });
        }
        if let Some(&bad) = s.phone_labels.iter().find(|&&p| p >= config.phone_targets) {
            return Err(TrainError::LabelOutOfRange {
                id: s.id.clone(),
                head: "phone",
                label: bad,
                targets: config.phone_targets,
            });
        }
    }
    if loss.lambda_lang > 0.0 {
        if !config.heads.has_language() {
            return Err(TrainError::HeadInactive("language"));
        }
        let lang = s.language.ok_or_else(|| TrainError::MissingLabels {
            id: s.id.clone(),
            head: "language",
        })?;
        if lang >= config.language_targets {
            return Err(TrainError::LabelOutOfRange {
                id: s.id.clone(),
                head: "language",
                label: lang,
                targets: config.language_targets,
            });
        }
    }
    Ok(())
}

/// Loss and logit gradients of one sequence. The loss is
/// `λ_phone · mean_t CE_phone + λ_lang · mean_t CE_lang`.
fn loss_and_logit_grads(
    config: &NetworkConfig,
    logits: &[Vector],
    sample: &Sample,
    loss: &LossSpec,
) -> Result<(f64, Vec<Vector>), TrainError> {
    let t_count = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = vec![vec![0.0; config.out_dim()]; logits.len()];
    let heads = [
        (loss.lambda_phone, config.phone_range()),
        (loss.lambda_lang, config.language_range()),
    ];
    for (h, (lambda, range)) in heads.into_iter().enumerate() {
        let Some(range) = range else { continue };
        if lambda == 0.0 {
            continue;
        }
        let w = lambda / t_count;
        for (t, (y, g)) in logits.iter().zip(grads.iter_mut()).enumerate() {
            let target = if h == 0 {
                sample.phone_labels[t]
            } else {
                sample.language.expect("checked")
            };
            let probs = softmax(&y[range.clone()]).map_err(NetworkError::from)?;
            total += w * cross_entropy(&probs, target).map_err(NetworkError::from)?;
            for (k, p) in probs.iter().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                g[range.start + k] = w * (p - onehot);
            }
        }
    }
    Ok((total, grads))
}

/// Loss of one sequence and its BPTT gradient, accumulated into `grads`.
pub fn accumulate_loss_and_grads(
    net: &Network,
    sample: &Sample,
    phon_feats: Option<&[Vector]>,
    loss: &LossSpec,
    grads: &mut LstmParams,
) -> Result<f64, TrainError> {
    check_sample(&net.config, loss, sample)?;
    let trace = net.forward(&sample.frames, phon_feats)?;
    let (value, grad_logits) = loss_and_logit_grads(&net.config, &trace.logits, sample, loss)?;
    net.backward(&trace, &grad_logits, grads)?;
    Ok(value)
}

/// Loss of one sequence and its exact BPTT gradient with respect to the LID
/// network's parameters. The phonetic network, if any, is treated as fixed.
pub fn sequence_loss_and_grads(
    model: &ModelBundle,
    sample: &Sample,
    loss: &LossSpec,
) -> Result<(f64, LstmParams), TrainError> {
    loss.validate()?;
    let feats = model.phonetic_features(&sample.frames)?;
    let mut grads = model.lid_model.params.zeros_like();
    let value = accumulate_loss_and_grads(&model.lid_model, sample, feats.as_deref(), loss, &mut grads)?;
    Ok((value, grads))
}

/// Loss only, for evaluation and finite-difference checks.
pub fn sequence_loss(
    net: &Network,
    sample: &Sample,
    phon_feats: Option<&[Vector]>,
    loss: &LossSpec,
) -> Result<f64, TrainError> {
    check_sample(&net.config, loss, sample)?;
    let trace = net.forward(&sample.frames, phon_feats)?;
    Ok(loss_and_logit_grads(&net.config, &trace.logits, sample, loss)?.0)
}

/// Mean gradient over a batch. Per-utterance gradients are computed in
/// parallel and summed in batch order.
pub fn batch_loss_and_grads(
    net: &Network,
    samples: &[&Sample],
    feats: &[Option<&[Vector]>],
    loss: &LossSpec,
) -> Result<(f64, LstmParams), TrainError> {
    let parts: Vec<Result<(f64, LstmParams), TrainError>> = samples
        .par_iter()
        .zip(feats.par_iter())
        .map(|(s, f)| {
            let mut g = net.params.zeros_like();
            let v = accumulate_loss_and_grads(net, s, *f, loss, &mut g)?;
            Ok((v, g))
        })
        .collect();
    let mut total = net.params.zeros_like();
    let mut value = 0.0;
    for part in parts {
        let (v, g) = part?;
        value += v;
        total.add_scaled(1.0, &g);
    }
    let scale = 1.0 / samples.len() as f64;
    total.scale(scale);
    Ok((value * scale, total))
}

/// One SGD-with-momentum update with global-norm clipping:
/// `v ← μ v + clip(g)`, `p ← p − lr v`.
pub fn sgd_step(
    params: &mut LstmParams,
    grads: &LstmParams,
    velocity: &mut LstmParams,
    lr: f64,
    momentum: f64,
    clip: f64,
) -> Result<(), TrainError> {
    let same = |a: &LstmParams, b: &LstmParams| {
        a.dims() == b.dims()
            && a.receiver() == b.receiver()
            && a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.data.len() == y.data.len())
    };
    if !same(params, grads) || !same(params, velocity) {
        return Err(TrainError::ShapeMismatch);
    }
    let norm = grads.sq_norm().sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((pv, gv), vv) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
            *vv = momentum * *vv + scale * gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Per-head frame accuracy and mean loss over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevStats {
    pub loss: f64,
    pub acc_phone: Option<f64>,
    pub acc_lang: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

pub fn evaluate(
    net: &Network,
    samples: &[Sample],
    feats: &[Option<Vec<Vector>>],
    loss: &LossSpec,
) -> Result<DevStats, TrainError> {
    let per: Vec<Result<(f64, usize, usize, usize), TrainError>> = samples
        .par_iter()
        .zip(feats.par_iter())
        .map(|(s, f)| {
            check_sample(&net.config, loss, s)?;
            let trace = net.forward(&s.frames, f.as_deref())?;
            let (value, _) = loss_and_logit_grads(&net.config, &trace.logits, s, loss)?;
            let mut ok_phone = 0;
            let mut ok_lang = 0;
            for (t, y) in trace.logits.iter().enumerate() {
                if let Some(r) = net.config.phone_range() {
                    if s.phone_labels.get(t) == Some(&argmax(&y[r])) {
                        ok_phone += 1;
                    }
                }
                if let Some(r) = net.config.language_range() {
                    if s.language == Some(argmax(&y[r])) {
                        ok_lang += 1;
                    }
                }
            }
            Ok((value, ok_phone, ok_lang, trace.logits.len()))
        })
        .collect();
    let (mut value, mut okp, mut okl, mut frames) = (0.0, 0, 0, 0);
    for p in per {
        let (v, a, b, n) = p?;
        value += v;
        okp += a;
        okl += b;
        frames += n;
    }
    let frac = |k: usize| k as f64 / frames.max(1) as f64;
    Ok(DevStats {
        loss: value / samples.len().max(1) as f64,
        acc_phone: net.config.heads.has_phone().then(|| frac(okp)),
        acc_lang: net.config.heads.has_language().then(|| frac(okl)),
    })
}

fn precompute_features(
    phonetic: Option<&Network>,
    samples: &[Sample],
) -> Result<Vec<Option<Vec<Vector>>>, TrainError> {
    samples
        .par_iter()
        .map(|s| match phonetic {
            Some(ph) => Ok(Some(extract_phonetic_features(ph, &s.frames)?)),
            None => Ok(None),
        })
        .collect()
}

/// Trains a network from a seeded initialization and returns the parameters
/// with the lowest dev loss. The frozen phonetic network, when given, only
/// supplies features and is copied unchanged into the bundle.
pub fn train(
    config: &TrainConfig,
    net_config: &NetworkConfig,
    loss: &LossSpec,
    train_set: &[Sample],
    dev_set: &[Sample],
    frozen_phonetic: Option<&Network>,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    config.validate()?;
    loss.validate()?;
    net_config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyDataset("dev"));
    }
    for s in train_set.iter().chain(dev_set) {
        check_sample(net_config, loss, s)?;
    }
    let phonetic = if net_config.receiver.is_none() {
        None
    } else {
        Some(frozen_phonetic.ok_or(NetworkError::MissingPhonetic(net_config.receiver))?)
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_INIT));
    let mut net = Network::new(net_config.clone(), &mut init_rng)?;
    // Validates dimensions between the two networks up front.
    ModelBundle::new(net.clone(), phonetic.cloned())?;

    let train_feats = precompute_features(phonetic, train_set)?;
    let dev_feats = precompute_features(phonetic, dev_set)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_SHUFFLE));
    let mut velocity = net.params.zeros_like();
    let mut lr = config.learning_rate;
    let mut best = net.params.clone();
    let mut best_dev = f64::INFINITY;
    let mut stale = 0;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let feats: Vec<Option<&[Vector]>> = chunk.iter().map(|&i| train_feats[i].as_deref()).collect();
            let (value, grads) = batch_loss_and_grads(&net, &samples, &feats, loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            epoch_loss += value * chunk.len() as f64;
            sgd_step(&mut net.params, &grads, &mut velocity, lr, config.momentum, config.gradient_clip)?;
        }
        let dev = evaluate(&net, dev_set, &dev_feats, loss)?;
        if !dev.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: order.len().div_ceil(config.batch_size),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            dev_loss: dev.loss,
            dev_acc_phone: dev.acc_phone,
            dev_acc_lang: dev.acc_lang,
            lr,
        });
        if dev.loss < best_dev {
            best_dev = dev.loss;
            best = net.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if config.lr_halving && stale >= config.patience.max(1) {
                lr *= 0.5;
                stale = 0;
            }
        }
    }
    if config.epochs > 0 {
        net.params = best;
    }
    let bundle = ModelBundle::new(net, phonetic.cloned())?;
    Ok((bundle, log))
}
