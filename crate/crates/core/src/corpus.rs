//! Synthetic multi-language corpus.
//!
//! Every language draws phone sequences from its own Markov chain over a
//! shared phone inventory. Each phone occupies a random number of frames,
//! and each frame is a Gaussian sample around the phone's codebook vector
//! plus a small per-language channel offset. The codebook is shared by all
//! languages, so a phone recognizer trained on some languages transfers to
//! the others.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Matrix, Vector};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("empty input")]
    Empty,
    #[error("language {language} has {have} utterances, need at least {need}")]
    TooFewUtterances {
        language: usize,
        have: usize,
        need: usize,
    },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corpus line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    /// num_phones × num_phones, row-stochastic.
    pub transition: Matrix,
    pub initial: Vector,
    pub channel_offset: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub format_version: u32,
    pub num_phones: usize,
    pub frame_dim: usize,
    pub languages: Vec<LanguageSpec>,
    /// Inclusive `[min, max]` frames per phone.
    pub frames_per_phone: [usize; 2],
    /// Inclusive `[min, max]` phones per utterance.
    pub utterance_phones: [usize; 2],
    pub utterances_per_language: usize,
    pub emission_stddev: f64,
    pub seed: u64,
}

/// Knobs for building language definitions from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageGen {
    pub num_languages: usize,
    /// Dirichlet concentration of each transition row; smaller is peakier.
    pub concentration: f64,
    /// Channel offsets are uniform in `[-offset_scale, offset_scale]`.
    pub offset_scale: f64,
    /// `(base, derived, weight)`: language `derived` becomes
    /// `weight * base + (1 - weight) * own` for transitions and offsets.
    pub similar_pair: Option<(usize, usize, f64)>,
    /// Sinkhorn-balance each chain so every phone is equally frequent and
    /// languages differ only in phone order.
    pub balanced: bool,
}

impl Default for LanguageGen {
    fn default() -> Self {
        LanguageGen {
            num_languages: 4,
            concentration: 0.3,
            offset_scale: 0.01,
            similar_pair: Some((0, 2, 0.7)),
            balanced: true,
        }
    }
}

/// One utterance before splicing.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: usize,
    pub frames: Vec<Vector>,
    pub phone_labels: Vec<usize>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_LANGUAGES: u64 = 1;
const STREAM_CODEBOOK: u64 = 2;
const STREAM_UTTERANCES: u64 = 3;
const STREAM_SPLIT: u64 = 4;

fn dirichlet_row<R: Rng>(n: usize, skip: Option<usize>, alpha: f64, rng: &mut R) -> Vector {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut row: Vector = (0..n)
        .map(|k| if Some(k) == skip { 0.0 } else { gamma.sample(rng).max(1e-300) })
        .collect();
    let s: f64 = row.iter().sum();
    for v in &mut row {
        *v /= s;
    }
    row
}

/// Alternately normalizes columns and rows of a square matrix until it is
/// doubly stochastic; rows are normalized last.
fn sinkhorn(m: &mut [f64], n: usize) {
    for _ in 0..1000 {
        let mut worst = 0.0f64;
        for c in 0..n {
            let s: f64 = (0..n).map(|r| m[r * n + c]).sum();
            worst = worst.max((s - 1.0).abs());
            for r in 0..n {
                m[r * n + c] /= s;
            }
        }
        for row in m.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        if worst < 1e-12 {
            break;
        }
    }
}

impl SynthSpec {
    /// Four balanced languages where language 2 is a 70/30 blend of
    /// language 0 and its own random chain. Utterances are short (4 to 10
    /// phones) so utterance-level errors stay measurable.
    pub fn default_with_seed(seed: u64) -> Self {
        let mut spec = SynthSpec::generated(seed, 20, 23, &LanguageGen::default(), 5000, 1.0);
        spec.utterance_phones = [4, 10];
        spec
    }

    /// Builds language definitions deterministically from `seed`.
    pub fn generated(
        seed: u64,
        num_phones: usize,
        frame_dim: usize,
        gen: &LanguageGen,
        utterances_per_language: usize,
        emission_stddev: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_LANGUAGES));
        let mut languages: Vec<LanguageSpec> = (0..gen.num_languages)
            .map(|l| {
                let mut rows: Vec<f64> = (0..num_phones)
                    .flat_map(|k| dirichlet_row(num_phones, Some(k), gen.concentration, &mut rng))
                    .collect();
                if gen.balanced {
                    sinkhorn(&mut rows, num_phones);
                }
                let offset = (0..frame_dim)
                    .map(|_| rng.random_range(-gen.offset_scale..=gen.offset_scale))
                    .collect();
                LanguageSpec {
                    name: format!("lang{l}"),
                    transition: Matrix::from_vec(num_phones, num_phones, rows).unwrap(),
                    initial: vec![1.0 / num_phones as f64; num_phones],
                    channel_offset: offset,
                }
            })
            .collect();
        if let Some((base, derived, w)) = gen.similar_pair {
            if base < languages.len() && derived < languages.len() && base != derived {
                let b = languages[base].clone();
                let d = &mut languages[derived];
                for (dv, bv) in d.transition.data_mut().iter_mut().zip(b.transition.data()) {
                    *dv = w * bv + (1.0 - w) * *dv;
                }
                for (dv, bv) in d.channel_offset.iter_mut().zip(&b.channel_offset) {
                    *dv = w * bv + (1.0 - w) * *dv;
                }
            }
        }
        SynthSpec {
            format_version: CORPUS_FORMAT_VERSION,
            num_phones,
            frame_dim,
            languages,
            frames_per_phone: [3, 10],
            utterance_phones: [10, 30],
            utterances_per_language,
            emission_stddev,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut errs = Vec::new();
        if self.format_version != CORPUS_FORMAT_VERSION {
            errs.push(format!("unsupported format_version {}", self.format_version));
        }
        if self.num_phones == 0 {
            errs.push("num_phones must be positive".into());
        }
        if self.frame_dim == 0 {
            errs.push("frame_dim must be positive".into());
        }
        if self.languages.is_empty() {
            errs.push("at least one language required".into());
        }
        for (name, [lo, hi]) in [
            ("frames_per_phone", self.frames_per_phone),
            ("utterance_phones", self.utterance_phones),
        ] {
            if lo == 0 || lo > hi {
                errs.push(format!("{name} must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
            }
        }
        if !(self.emission_stddev >= 0.0 && self.emission_stddev.is_finite()) {
            errs.push(format!("emission_stddev must be finite and >= 0, got {}", self.emission_stddev));
        }
        let n = self.num_phones;
        for (l, lang) in self.languages.iter().enumerate() {
            let tag = format!("language {l} ({})", lang.name);
            if lang.transition.shape() != (n, n) {
                errs.push(format!("{tag}: transition is {:?}, expected ({n}, {n})", lang.transition.shape()));
            } else {
                for r in 0..n {
                    let row = lang.transition.row(r);
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
                        errs.push(format!("{tag}: transition row {r} is not stochastic (sum {s})"));
                    }
                }
            }
            let s: f64 = lang.initial.iter().sum();
            if lang.initial.len() != n
                || lang.initial.iter().any(|v| !(*v >= 0.0))
                || (s - 1.0).abs() > 1e-9
            {
                errs.push(format!("{tag}: initial distribution is not on the simplex"));
            }
            if lang.channel_offset.len() != self.frame_dim {
                errs.push(format!(
                    "{tag}: channel_offset has {} entries, expected {}",
                    lang.channel_offset.len(),
                    self.frame_dim
                ));
            }
            if lang.channel_offset.iter().any(|v| !(v.abs() <= 1.0)) {
                errs.push(format!("{tag}: channel_offset entries must lie in [-1, 1]"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CorpusError::Invalid(errs))
        }
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let spec: SynthSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Phone codebook shared by all languages: `num_phones × frame_dim`
/// standard-normal entries drawn from the corpus seed.
pub fn phone_codebook(spec: &SynthSpec) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, STREAM_CODEBOOK));
    Matrix::from_fn(spec.num_phones, spec.frame_dim, |_, _| {
        StandardNormal.sample(&mut rng)
    })
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a phone sequence of `len` phones from a language's chain.
pub fn sample_phones<R: Rng>(lang: &LanguageSpec, len: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return out;
    }
    let mut cur = sample_index(&lang.initial, rng);
    out.push(cur);
    for _ in 1..len {
        cur = sample_index(lang.transition.row(cur), rng);
        out.push(cur);
    }
    out
}

fn generate_utterance(spec: &SynthSpec, codebook: &Matrix, language: usize, index: usize) -> Utterance {
    let lang = &spec.languages[language];
    let unit = (language * spec.utterances_per_language + index) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, STREAM_UTTERANCES), unit));
    let [pmin, pmax] = spec.utterance_phones;
    let [fmin, fmax] = spec.frames_per_phone;
    let n_phones = rng.random_range(pmin..=pmax);
    let phones = sample_phones(lang, n_phones, &mut rng);
    let noise = Normal::new(0.0, spec.emission_stddev).expect("validated stddev");
    let mut frames = Vec::new();
    let mut phone_labels = Vec::new();
    for &ph in &phones {
        let dur = rng.random_range(fmin..=fmax);
        for _ in 0..dur {
            let frame: Vector = codebook
                .row(ph)
                .iter()
                .zip(&lang.channel_offset)
                .map(|(e, o)| {
                    let v = e + o + noise.sample(&mut rng);
                    // Frames are stored as f32 on disk; keep memory identical.
                    v as f32 as f64
                })
                .collect();
            frames.push(frame);
            phone_labels.push(ph);
        }
    }
    Utterance {
        id: format!("{}-{index:05}", lang.name),
        language,
        frames,
        phone_labels,
    }
}

/// Generates `utterances_per_language` utterances for every language,
/// ordered by language then index. Each utterance draws from its own seed
/// stream, so the result does not depend on the thread count.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Vec<Utterance>, CorpusError> {
    spec.validate()?;
    let codebook = phone_codebook(spec);
    let units: Vec<(usize, usize)> = (0..spec.languages.len())
        .flat_map(|l| (0..spec.utterances_per_language).map(move |i| (l, i)))
        .collect();
    Ok(units
        .par_iter()
        .map(|&(l, i)| generate_utterance(spec, &codebook, l, i))
        .collect())
}

/// Concatenates each frame with `context` neighbours on both sides,
/// replicating the edge frames at the boundaries.
pub fn splice(frames: &[Vector], context: usize) -> Result<Vec<Vector>, CorpusError> {
    if frames.is_empty() {
        return Err(CorpusError::Empty);
    }
    let last = frames.len() - 1;
    let dim = frames[0].len();
    Ok((0..frames.len())
        .map(|t| {
            let mut out = Vec::with_capacity(dim * (2 * context + 1));
            for k in 0..=2 * context {
                let src = (t + k).saturating_sub(context).min(last);
                out.extend_from_slice(&frames[src]);
            }
            out
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Stratified train/dev/test split with a seeded shuffle per language.
pub fn split_dataset(dataset: &[Utterance], fractions: [f64; 3], seed: u64) -> Result<Split, CorpusError> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(fractions));
    }
    let num_lang = dataset.iter().map(|u| u.language + 1).max().unwrap_or(0);
    let mut split = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for lang in 0..num_lang {
        let mut group: Vec<&Utterance> = dataset.iter().filter(|u| u.language == lang).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len();
        if n < 3 {
            return Err(CorpusError::TooFewUtterances {
                language: lang,
                have: n,
                need: 3,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, STREAM_SPLIT), lang as u64));
        group.shuffle(&mut rng);
        let mut n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
        let mut n_dev = ((fractions[1] * n as f64).round() as usize).max(1);
        while n_train + n_dev > n - 1 {
            if n_dev > 1 {
                n_dev -= 1;
            } else {
                n_train -= 1;
            }
        }
        split.train.extend(group[..n_train].iter().map(|u| (*u).clone()));
        split.dev.extend(group[n_train..n_train + n_dev].iter().map(|u| (*u).clone()));
        split.test.extend(group[n_train + n_dev..].iter().map(|u| (*u).clone()));
    }
    if split.train.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(split)
}

#[derive(Serialize, Deserialize)]
struct Record {
    format_version: u32,
    id: String,
    language: usize,
    frame_dim: usize,
    /// base64 of little-endian f32, row-major frames
    frames: String,
    phone_labels: Vec<usize>,
}

pub fn write_corpus(path: impl AsRef<Path>, dataset: &[Utterance]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in dataset {
        let frame_dim = u.frames.first().map_or(0, |f| f.len());
        let mut bytes = Vec::with_capacity(u.frames.len() * frame_dim * 4);
        for v in u.frames.iter().flatten() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let rec = Record {
            format_version: CORPUS_FORMAT_VERSION,
            id: u.id.clone(),
            language: u.language,
            frame_dim,
            frames: B64.encode(&bytes),
            phone_labels: u.phone_labels.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Utterance>, CorpusError> {
    let rd = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in rd.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| CorpusError::Format { line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.format_version != CORPUS_FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", rec.format_version)));
        }
        let bytes = B64.decode(rec.frames.as_bytes()).map_err(|e| bad(e.to_string()))?;
        let n = rec.phone_labels.len();
        if n == 0 || rec.frame_dim == 0 || bytes.len() != n * rec.frame_dim * 4 {
            return Err(bad(format!(
                "payload of {} bytes does not hold {n} frames of dim {}",
                bytes.len(),
                rec.frame_dim
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(Utterance {
            id: rec.id,
            language: rec.language,
            frames: values.chunks(rec.frame_dim).map(|c| c.to_vec()).collect(),
            phone_labels: rec.phone_labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec(per_lang: usize) -> SynthSpec {
        let mut s = SynthSpec::default_with_seed(7);
        s.utterances_per_language = per_lang;
        s
    }

    #[test]
    fn default_spec_shape() {
        let s = SynthSpec::default_with_seed(1);
        s.validate().unwrap();
        assert_eq!(s.languages.len(), 4);
        assert_eq!(s.frame_dim, 23);
        assert_eq!(s.num_phones, 20);
        assert_eq!(s.frames_per_phone, [3, 10]);
        assert_eq!(s.utterance_phones, [4, 10]);
        assert_eq!(s.utterances_per_language, 5000);
    }

    #[test]
    fn balanced_chains_are_doubly_stochastic() {
        let s = SynthSpec::default_with_seed(3);
        let n = s.num_phones;
        for lang in &s.languages {
            for k in 0..n {
                assert_eq!(lang.transition.get(k, k), 0.0);
                let col: f64 = (0..n).map(|r| lang.transition.get(r, k)).sum();
                assert!((col - 1.0).abs() < 1e-9, "{} column {k} sums to {col}", lang.name);
            }
        }
        let gen = LanguageGen {
            balanced: false,
            ..LanguageGen::default()
        };
        let raw = SynthSpec::generated(3, n, 23, &gen, 10, 1.0);
        let t = &raw.languages[0].transition;
        let worst = (0..n)
            .map(|c| ((0..n).map(|r| t.get(r, c)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst > 0.1);
    }

    #[test]
    fn two_languages_ten_each() {
        let mut s = small_spec(10);
        s.languages.truncate(2);
        let data = generate_corpus(&s).unwrap();
        assert_eq!(data.len(), 20);
        assert!(data.iter().all(|u| u.language < 2));
        assert!(data.iter().flat_map(|u| &u.phone_labels).all(|&p| p < 20));
        assert!(data.iter().all(|u| u.frames.len() == u.phone_labels.len() && !u.is_empty()));
        let ids: BTreeSet<_> = data.iter().map(|u| u.id.clone()).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let s = small_spec(6);
        let a = generate_corpus(&s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_corpus(&s).unwrap());
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path().join("a.jsonl"), &a).unwrap();
        write_corpus(dir.path().join("b.jsonl"), &b).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.jsonl")).unwrap(),
            std::fs::read(dir.path().join("b.jsonl")).unwrap()
        );
    }

    #[test]
    fn zero_noise_frames_are_codebook_plus_offset() {
        let mut s = small_spec(3);
        s.emission_stddev = 0.0;
        let cb = phone_codebook(&s);
        for u in generate_corpus(&s).unwrap() {
            let off = &s.languages[u.language].channel_offset;
            for (f, &ph) in u.frames.iter().zip(&u.phone_labels) {
                for d in 0..s.frame_dim {
                    assert_eq!(f[d], (cb.get(ph, d) + off[d]) as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn codebook_is_shared_across_languages() {
        let s = small_spec(1);
        let mut other = s.clone();
        other.languages.reverse();
        other.languages.truncate(2);
        assert_eq!(phone_codebook(&s), phone_codebook(&other));
    }

    #[test]
    fn invalid_spec_lists_violations() {
        let mut s = small_spec(2);
        s.languages[1].transition.set(0, 1, 5.0);
        s.languages[3].channel_offset[0] = 2.0;
        s.frames_per_phone = [4, 2];
        let CorpusError::Invalid(v) = generate_corpus(&s).unwrap_err() else {
            panic!("expected Invalid");
        };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn splice_examples() {
        let f = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(
            splice(&f, 1).unwrap(),
            vec![vec![1.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 3.0]]
        );
        assert_eq!(splice(&f, 0).unwrap(), f);
        let wide = vec![vec![0.5; 23]; 4];
        assert!(splice(&wide, 2).unwrap().iter().all(|v| v.len() == 115));
        assert!(matches!(splice(&[], 2), Err(CorpusError::Empty)));
    }

    #[test]
    fn split_counts_and_partition() {
        let data = generate_corpus(&small_spec(100)).unwrap();
        let split = split_dataset(&data, [0.8, 0.1, 0.1], 3).unwrap();
        for l in 0..4 {
            let c = |v: &[Utterance]| v.iter().filter(|u| u.language == l).count();
            assert_eq!((c(&split.train), c(&split.dev), c(&split.test)), (80, 10, 10));
        }
        let all: BTreeSet<_> = data.iter().map(|u| u.id.clone()).collect();
        let parts: Vec<_> = split
            .train
            .iter()
            .chain(&split.dev)
            .chain(&split.test)
            .map(|u| u.id.clone())
            .collect();
        assert_eq!(parts.len(), all.len());
        assert_eq!(parts.into_iter().collect::<BTreeSet<_>>(), all);

        let other = split_dataset(&data, [0.8, 0.1, 0.1], 4).unwrap();
        assert_ne!(
            split.train.iter().map(|u| &u.id).collect::<Vec<_>>(),
            other.train.iter().map(|u| &u.id).collect::<Vec<_>>()
        );
        assert_eq!(other.dev.len(), split.dev.len());
    }

    #[test]
    fn split_errors() {
        let data = generate_corpus(&small_spec(2)).unwrap();
        assert!(matches!(
            split_dataset(&data, [0.8, 0.1, 0.1], 0),
            Err(CorpusError::TooFewUtterances { have: 2, .. })
        ));
        assert!(matches!(
            split_dataset(&data, [0.8, 0.3, 0.1], 0),
            Err(CorpusError::BadFractions(_))
        ));
    }

    #[test]
    fn spec_json_round_trip_keeps_rows_stochastic() {
        let s = SynthSpec::default_with_seed(99);
        let back = SynthSpec::from_json(&s.to_json()).unwrap();
        for lang in &back.languages {
            for r in 0..back.num_phones {
                let sum: f64 = lang.transition.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(back, s);
    }

    #[test]
    fn corpus_file_round_trip() {
        let data = generate_corpus(&small_spec(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&p, &data).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), data);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), data.len());
    }

    #[test]
    fn bigram_frequencies_match_transition_matrix() {
        let s = small_spec(1);
        let lang = &s.languages[1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = sample_phones(lang, 40_001, &mut rng);
        let n = s.num_phones;
        let mut counts = vec![0usize; n * n];
        let mut from = vec![0usize; n];
        for w in seq.windows(2) {
            counts[w[0] * n + w[1]] += 1;
            from[w[0]] += 1;
        }
        for a in 0..n {
            if from[a] < 200 {
                continue;
            }
            for b in 0..n {
                let emp = counts[a * n + b] as f64 / from[a] as f64;
                assert!((emp - lang.transition.get(a, b)).abs() < 0.05, "{a}->{b}");
            }
        }
    }
}
