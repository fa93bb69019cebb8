//! Single-layer networks built from the projected LSTM cell: phone
//! recognizers, language classifiers, multi-task models, and the composite
//! where a frozen phonetic network feeds its recurrent projection into a
//! language network.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstmp::{
    cell_backward_into, cell_forward, output_backward, output_forward, CellState, LstmDims,
    LstmError, LstmParams, ReceiverKind, StepCache,
};
use crate::math::{softmax, MathError, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("frame {frame} has dimension {got}, expected {expected}")]
    FrameDim {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("receiver is {0} but no phonetic model is attached")]
    MissingPhonetic(ReceiverKind),
    #[error("phonetic feature dimension {got} does not match injection width {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("{got} phonetic feature rows for {expected} frames")]
    FeatureCount { expected: usize, got: usize },
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("frame posteriors have inconsistent widths")]
    RaggedPosteriors,
    #[error("invalid network config: {0}")]
    Config(String),
}

/// Which softmax groups sit on top of the shared projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    PhonesOnly,
    LanguagesOnly,
    MultiTask,
}

impl Heads {
    pub fn has_phone(self) -> bool {
        matches!(self, Heads::PhonesOnly | Heads::MultiTask)
    }

    pub fn has_language(self) -> bool {
        matches!(self, Heads::LanguagesOnly | Heads::MultiTask)
    }
}

impl std::str::FromStr for Heads {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phones_only" => Ok(Heads::PhonesOnly),
            "languages_only" => Ok(Heads::LanguagesOnly),
            "multi_task" => Ok(Heads::MultiTask),
            _ => Err(format!("unknown heads '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 1,024 cells, 256-dimensional projections.
    Paper,
    /// 64 cells, 16-dimensional projections.
    Desk,
}

impl Preset {
    /// `(cell_dim, rec_dim, proj_dim)`
    pub fn sizes(self) -> (usize, usize, usize) {
        match self {
            Preset::Paper => (1024, 256, 256),
            Preset::Desk => (64, 16, 16),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(format!("unknown preset '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub cell_dim: usize,
    pub rec_dim: usize,
    pub proj_dim: usize,
    pub phone_targets: usize,
    pub language_targets: usize,
    pub heads: Heads,
    pub receiver: ReceiverKind,
    /// Width of the injected feature; 0 when `receiver` is `None`.
    pub injection_dim: usize,
}

impl NetworkConfig {
    pub fn from_preset(
        preset: Preset,
        input_dim: usize,
        phone_targets: usize,
        language_targets: usize,
        heads: Heads,
    ) -> Self {
        let (cell_dim, rec_dim, proj_dim) = preset.sizes();
        NetworkConfig {
            input_dim,
            cell_dim,
            rec_dim,
            proj_dim,
            phone_targets,
            language_targets,
            heads,
            receiver: ReceiverKind::None,
            injection_dim: 0,
        }
    }

    pub fn with_receiver(mut self, receiver: ReceiverKind, injection_dim: usize) -> Self {
        self.receiver = receiver;
        self.injection_dim = if receiver.is_none() { 0 } else { injection_dim };
        self
    }

    pub fn phone_range(&self) -> Option<Range<usize>> {
        self.heads.has_phone().then(|| 0..self.phone_targets)
    }

    pub fn language_range(&self) -> Option<Range<usize>> {
        let start = if self.heads.has_phone() {
            self.phone_targets
        } else {
            0
        };
        self.heads
            .has_language()
            .then(|| start..start + self.language_targets)
    }

    pub fn out_dim(&self) -> usize {
        self.phone_range().map_or(0, |r| r.len()) + self.language_range().map_or(0, |r| r.len())
    }

    pub fn dims(&self) -> LstmDims {
        LstmDims {
            input_dim: self.input_dim,
            cell_dim: self.cell_dim,
            rec_dim: self.rec_dim,
            proj_dim: self.proj_dim,
            out_dim: self.out_dim(),
        }
    }

    fn injection(&self) -> Option<(ReceiverKind, usize)> {
        (!self.receiver.is_none()).then_some((self.receiver, self.injection_dim))
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.input_dim == 0 || self.cell_dim == 0 || self.rec_dim == 0 || self.proj_dim == 0 {
            return bad("all layer sizes must be positive");
        }
        if self.heads.has_phone() && self.phone_targets == 0 {
            return bad("phone head needs at least one target");
        }
        if self.heads.has_language() && self.language_targets == 0 {
            return bad("language head needs at least one target");
        }
        if !self.receiver.is_none() && self.injection_dim == 0 {
            return bad("active receiver needs a positive injection_dim");
        }
        if self.receiver.is_none() && self.injection_dim != 0 {
            return bad("injection_dim must be 0 without a receiver");
        }
        Ok(())
    }
}

/// One LSTM layer plus its output head(s).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: LstmParams,
}

/// Per-step caches and logits of a forward pass, kept for BPTT.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub caches: Vec<StepCache>,
    pub logits: Vec<Vector>,
}

impl Network {
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self, NetworkError> {
        config.validate()?;
        let params = LstmParams::init_uniform(config.dims(), config.injection(), rng);
        Ok(Network { config, params })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let params = LstmParams::zeros(config.dims(), config.injection());
        Ok(Network { config, params })
    }

    fn check_frames(&self, frames: &[Vector]) -> Result<(), NetworkError> {
        for (t, f) in frames.iter().enumerate() {
            if f.len() != self.config.input_dim {
                return Err(NetworkError::FrameDim {
                    frame: t,
                    expected: self.config.input_dim,
                    got: f.len(),
                });
            }
        }
        Ok(())
    }

    /// Runs the sequence from a zero state, keeping every step cache.
    pub fn forward(
        &self,
        frames: &[Vector],
        phon_feats: Option<&[Vector]>,
    ) -> Result<ForwardTrace, NetworkError> {
        self.check_frames(frames)?;
        match (self.params.inj.as_ref(), phon_feats) {
            (Some(inj), Some(feats)) => {
                if feats.len() != frames.len() {
                    return Err(NetworkError::FeatureCount {
                        expected: frames.len(),
                        got: feats.len(),
                    });
                }
                if let Some(f) = feats.iter().find(|f| f.len() != inj.feat_dim()) {
                    return Err(NetworkError::FeatureDim {
                        expected: inj.feat_dim(),
                        got: f.len(),
                    });
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(NetworkError::MissingPhonetic(self.config.receiver)),
            (None, Some(_)) => return Err(LstmError::InjectionMismatch.into()),
        }
        let dims = self.params.dims();
        let mut state = CellState::zeros(&dims);
        let mut caches = Vec::with_capacity(frames.len());
        let mut logits = Vec::with_capacity(frames.len());
        for (t, x) in frames.iter().enumerate() {
            let feat = phon_feats.map(|f| f[t].as_slice());
            let (next, p, cache) = cell_forward(&self.params, x, &state, feat)?;
            logits.push(output_forward(&self.params, &next.r, &p)?);
            caches.push(cache);
            state = next;
        }
        Ok(ForwardTrace { caches, logits })
    }

    /// Full backpropagation through time given per-frame logit gradients.
    /// Parameter gradients are accumulated into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[Vector],
        grads: &mut LstmParams,
    ) -> Result<(), NetworkError> {
        assert_eq!(trace.caches.len(), grad_logits.len());
        let dims = self.params.dims();
        let mut dr_next = vec![0.0; dims.rec_dim];
        let mut dc_next = vec![0.0; dims.cell_dim];
        for (cache, gy) in trace.caches.iter().zip(grad_logits).rev() {
            let (mut gr, gp) = output_backward(&self.params, &cache.r, &cache.p, gy, grads);
            for (a, b) in gr.iter_mut().zip(&dr_next) {
                *a += b;
            }
            let inp = cell_backward_into(&self.params, cache, &gr, &dc_next, &gp, grads, false)?;
            dr_next = inp.grad_prev_r;
            dc_next = inp.grad_prev_c;
        }
        Ok(())
    }

    /// Per-frame recurrent projection `r_t`.
    pub fn recurrent_projections(
        &self,
        frames: &[Vector],
        phon_feats: Option<&[Vector]>,
    ) -> Result<Vec<Vector>, NetworkError> {
        let trace = self.forward(frames, phon_feats)?;
        Ok(trace.caches.into_iter().map(|c| c.r).collect())
    }
}

/// Phonetic features of a (non-injected) network: its per-frame recurrent
/// projection output.
pub fn extract_phonetic_features(
    model: &Network,
    frames: &[Vector],
) -> Result<Vec<Vector>, NetworkError> {
    model.recurrent_projections(frames, None)
}

/// Language network plus the optional frozen phonetic network feeding it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub lid_model: Network,
    pub phonetic_model: Option<Network>,
    pub receiver: ReceiverKind,
    pub format_version: u32,
}

impl ModelBundle {
    pub fn new(lid_model: Network, phonetic_model: Option<Network>) -> Result<Self, NetworkError> {
        let receiver = lid_model.config.receiver;
        if let Some(ph) = &phonetic_model {
            if !ph.config.receiver.is_none() {
                return Err(NetworkError::Config(
                    "phonetic model must not itself receive injected features".into(),
                ));
            }
        }
        if !receiver.is_none() {
            let ph = phonetic_model
                .as_ref()
                .ok_or(NetworkError::MissingPhonetic(receiver))?;
            if ph.config.rec_dim != lid_model.config.injection_dim {
                return Err(NetworkError::FeatureDim {
                    expected: lid_model.config.injection_dim,
                    got: ph.config.rec_dim,
                });
            }
            if ph.config.input_dim != lid_model.config.input_dim {
                return Err(NetworkError::Config(format!(
                    "phonetic input_dim {} differs from LID input_dim {}",
                    ph.config.input_dim, lid_model.config.input_dim
                )));
            }
        }
        Ok(ModelBundle {
            lid_model,
            phonetic_model,
            receiver,
            format_version: FORMAT_VERSION,
        })
    }

    /// Bundle with no phonetic model.
    pub fn plain(lid_model: Network) -> Result<Self, NetworkError> {
        ModelBundle::new(lid_model, None)
    }

    /// Phonetic features the LID cell consumes, or `None` without injection.
    pub fn phonetic_features(&self, frames: &[Vector]) -> Result<Option<Vec<Vector>>, NetworkError> {
        if self.receiver.is_none() {
            return Ok(None);
        }
        let ph = self
            .phonetic_model
            .as_ref()
            .ok_or(NetworkError::MissingPhonetic(self.receiver))?;
        extract_phonetic_features(ph, frames).map(Some)
    }
}

/// Logits of every active head for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub phone_logits: Option<Vec<Vector>>,
    pub language_logits: Option<Vec<Vector>>,
    pub phonetic_features: Option<Vec<Vector>>,
}

/// Splits full output rows into the configured heads.
pub fn split_heads(config: &NetworkConfig, logits: &[Vector]) -> (Option<Vec<Vector>>, Option<Vec<Vector>>) {
    let take = |r: Range<usize>| logits.iter().map(|y| y[r.clone()].to_vec()).collect();
    (
        config.phone_range().map(take),
        config.language_range().map(take),
    )
}

/// Runs the phonetic network (when injection is active) and then the LID
/// network over `frames`.
pub fn run_sequence(model: &ModelBundle, frames: &[Vector]) -> Result<SequenceOutput, NetworkError> {
    model.lid_model.check_frames(frames)?;
    let feats = model.phonetic_features(frames)?;
    let trace = model.lid_model.forward(frames, feats.as_deref())?;
    let (phone_logits, language_logits) = split_heads(&model.lid_model.config, &trace.logits);
    Ok(SequenceOutput {
        phone_logits,
        language_logits,
        phonetic_features: feats,
    })
}

/// Row-wise softmax of per-frame logits.
pub fn frame_posteriors(logits: &[Vector]) -> Result<Vec<Vector>, NetworkError> {
    logits
        .iter()
        .map(|y| softmax(y).map_err(NetworkError::from))
        .collect()
}

/// Mean of frame posteriors in the probability domain.
pub fn utterance_posterior(frame_posteriors: &[Vector]) -> Result<Vector, NetworkError> {
    let first = frame_posteriors.first().ok_or(NetworkError::EmptyUtterance)?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for row in frame_posteriors {
        if row.len() != dim {
            return Err(NetworkError::RaggedPosteriors);
        }
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = frame_posteriors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::lstmp::InjectionParams;
    use crate::math::Matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(heads: Heads) -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            cell_dim: 5,
            rec_dim: 2,
            proj_dim: 2,
            phone_targets: 4,
            language_targets: 2,
            heads,
            receiver: ReceiverKind::None,
            injection_dim: 0,
        }
    }

    fn frames(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn presets_and_layout() {
        let c = NetworkConfig::from_preset(Preset::Paper, 115, 20, 2, Heads::MultiTask);
        assert_eq!((c.cell_dim, c.rec_dim, c.proj_dim), (1024, 256, 256));
        assert_eq!(c.phone_range(), Some(0..20));
        assert_eq!(c.language_range(), Some(20..22));
        let c = NetworkConfig::from_preset(Preset::Desk, 115, 20, 2, Heads::LanguagesOnly);
        assert_eq!((c.cell_dim, c.rec_dim, c.proj_dim), (64, 16, 16));
        assert_eq!(c.language_range(), Some(0..2));
        assert_eq!(c.phone_range(), None);
        assert_eq!(c.out_dim(), 2);
    }

    #[test]
    fn empty_sequence_gives_empty_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(small_config(Heads::MultiTask), &mut rng).unwrap();
        let out = run_sequence(&ModelBundle::plain(net).unwrap(), &[]).unwrap();
        assert_eq!(out.phone_logits.unwrap().len(), 0);
        assert_eq!(out.language_logits.unwrap().len(), 0);
    }

    #[test]
    fn no_receiver_ignores_attached_phonetic_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lid = Network::new(small_config(Heads::LanguagesOnly), &mut rng).unwrap();
        let ph = Network::new(small_config(Heads::PhonesOnly), &mut rng).unwrap();
        let xs = frames(6, 3, 2);
        let a = run_sequence(&ModelBundle::plain(lid.clone()).unwrap(), &xs).unwrap();
        let b = run_sequence(&ModelBundle::new(lid, Some(ph)).unwrap(), &xs).unwrap();
        assert_eq!(a.language_logits, b.language_logits);
        assert!(b.phonetic_features.is_none());
    }

    #[test]
    fn three_frame_scalar_model_matches_hand_chaining() {
        let cfg = NetworkConfig {
            input_dim: 1,
            cell_dim: 1,
            rec_dim: 1,
            proj_dim: 1,
            phone_targets: 1,
            language_targets: 1,
            heads: Heads::LanguagesOnly,
            receiver: ReceiverKind::None,
            injection_dim: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::new(cfg, &mut rng).unwrap();
        net.params.scale(20.0);
        let xs = vec![vec![0.5], vec![-1.0], vec![2.0]];
        let out = run_sequence(&ModelBundle::plain(net.clone()).unwrap(), &xs).unwrap();
        let mut state = CellState::zeros(&net.params.dims());
        for (t, x) in xs.iter().enumerate() {
            let (s, p, _) = cell_forward(&net.params, x, &state, None).unwrap();
            let y = output_forward(&net.params, &s.r, &p).unwrap();
            assert_eq!(out.language_logits.as_ref().unwrap()[t], y);
            state = s;
        }
    }

    #[test]
    fn disabling_a_head_keeps_the_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let multi = Network::new(small_config(Heads::MultiTask), &mut rng).unwrap();
        let xs = frames(5, 3, 8);
        let full = run_sequence(&ModelBundle::plain(multi.clone()).unwrap(), &xs).unwrap();

        let mut lang_only = Network::zeros(small_config(Heads::LanguagesOnly)).unwrap();
        let mut src = multi.params.clone();
        let rows: Vec<usize> = multi.config.language_range().unwrap().collect();
        let pick = |m: &Matrix| Matrix::from_fn(rows.len(), m.cols(), |r, c| m.get(rows[r], c));
        lang_only.params.w_yr = pick(&src.w_yr);
        lang_only.params.w_yp = pick(&src.w_yp);
        lang_only.params.b_y = rows.iter().map(|&r| src.b_y[r]).collect();
        src.w_yr = lang_only.params.w_yr.clone();
        src.w_yp = lang_only.params.w_yp.clone();
        src.b_y = lang_only.params.b_y.clone();
        lang_only.params = src;
        let part = run_sequence(&ModelBundle::plain(lang_only).unwrap(), &xs).unwrap();
        assert_eq!(full.language_logits, part.language_logits);
    }

    #[test]
    fn zero_phonetic_and_zero_injection_match_plain_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plain = Network::new(small_config(Heads::LanguagesOnly), &mut rng).unwrap();
        let mut injected = plain.clone();
        injected.config = injected.config.with_receiver(ReceiverKind::GFunction, 2);
        injected.params.inj = Some(InjectionParams {
            receiver: ReceiverKind::GFunction,
            w_inj: Matrix::zeros(5, 2),
        });
        let ph = Network::zeros(small_config(Heads::PhonesOnly)).unwrap();
        let xs = frames(7, 3, 12);
        let a = run_sequence(&ModelBundle::plain(plain).unwrap(), &xs).unwrap();
        let b = run_sequence(&ModelBundle::new(injected, Some(ph)).unwrap(), &xs).unwrap();
        assert_eq!(a.language_logits, b.language_logits);
        assert!(b.phonetic_features.unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn receiver_without_phonetic_model_is_rejected() {
        let cfg = small_config(Heads::LanguagesOnly).with_receiver(ReceiverKind::OutputGate, 2);
        let lid = Network::zeros(cfg).unwrap();
        assert_eq!(
            ModelBundle::new(lid.clone(), None).unwrap_err(),
            NetworkError::MissingPhonetic(ReceiverKind::OutputGate)
        );
        let mut wide = small_config(Heads::PhonesOnly);
        wide.rec_dim = 3;
        let ph = Network::zeros(wide).unwrap();
        assert!(matches!(
            ModelBundle::new(lid, Some(ph)),
            Err(NetworkError::FeatureDim { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn frame_dim_mismatch() {
        let net = Network::zeros(small_config(Heads::PhonesOnly)).unwrap();
        let err = run_sequence(&ModelBundle::plain(net).unwrap(), &[vec![0.0; 3], vec![0.0; 4]])
            .unwrap_err();
        assert_eq!(
            err,
            NetworkError::FrameDim {
                frame: 1,
                expected: 3,
                got: 4
            }
        );
    }

    #[test]
    fn phonetic_feature_laws() {
        let zero = Network::zeros(small_config(Heads::PhonesOnly)).unwrap();
        let xs = frames(9, 3, 3);
        let f = extract_phonetic_features(&zero, &xs).unwrap();
        assert_eq!(f.len(), 9);
        assert!(f.iter().all(|v| v.len() == 2 && v.iter().all(|&x| x == 0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::new(small_config(Heads::MultiTask), &mut rng).unwrap();
        for n in [1, 4, 13] {
            let xs = frames(n, 3, n as u64);
            let a = extract_phonetic_features(&net, &xs).unwrap();
            let b = extract_phonetic_features(&net, &xs).unwrap();
            assert_eq!(a.len(), n);
            let bits = |v: &[Vector]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn utterance_posterior_examples() {
        let p = utterance_posterior(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] - 0.3).abs() < 1e-15);
        assert_eq!(utterance_posterior(&[vec![0.1, 0.9]]).unwrap(), vec![0.1, 0.9]);
        let row = vec![0.25, 0.5, 0.25];
        let p = utterance_posterior(&vec![row.clone(); 100]).unwrap();
        for (a, b) in p.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(utterance_posterior(&[]), Err(NetworkError::EmptyUtterance));
    }

    proptest! {
        #[test]
        fn utterance_posterior_is_order_invariant(
            logits in proptest::collection::vec(proptest::collection::vec(-5f64..5.0, 3), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let post = frame_posteriors(&logits).unwrap();
            let a = utterance_posterior(&post).unwrap();
            let mut shuffled = post.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = utterance_posterior(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
