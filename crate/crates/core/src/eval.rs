//! Detection metrics for language identification: pooled equal error rate
//! and average detection cost, at frame and utterance level.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::{frame_posteriors, run_sequence, utterance_posterior, ModelBundle, NetworkError};
use crate::training::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("model has no language head")]
    NoLanguageHead,
    #[error("dataset has {dataset} languages but the model scores {model}")]
    LanguageCount { dataset: usize, model: usize },
    #[error("utterance {0} has no usable language label")]
    BadLabel(String),
    #[error("trial pool needs at least one target and one non-target trial")]
    OneSidedPool,
    #[error("no trials for language pair (hypothesis {hyp}, truth {truth})")]
    EmptyLanguage { hyp: usize, truth: usize },
    #[error("cavg needs at least two languages")]
    TooFewLanguages,
    #[error("malformed metrics csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Frame,
    Utterance,
}

/// One detection decision: does unit `unit` belong to `hypothesized_language`?
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub score: f64,
    pub is_target: bool,
    pub hypothesized_language: usize,
    pub true_language: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub num_languages: usize,
    pub level: Level,
    /// Name of each scored unit, indexed by `Trial::unit`.
    pub unit_ids: Vec<String>,
}

impl TrialSet {
    /// One trial per hypothesized language for each posterior row.
    pub fn from_posteriors(
        level: Level,
        rows: impl IntoIterator<Item = (String, usize, Vec<f64>)>,
        num_languages: usize,
    ) -> Self {
        let mut trials = Vec::new();
        let mut unit_ids = Vec::new();
        for (unit, (id, truth, post)) in rows.into_iter().enumerate() {
            debug_assert_eq!(post.len(), num_languages);
            for (hyp, &score) in post.iter().enumerate() {
                trials.push(Trial {
                    score,
                    is_target: hyp == truth,
                    hypothesized_language: hyp,
                    true_language: truth,
                    unit,
                });
            }
            unit_ids.push(id);
        }
        TrialSet {
            trials,
            num_languages,
            level,
            unit_ids,
        }
    }

    /// Plain trials without unit structure, as used by metric tests.
    pub fn from_trials(trials: Vec<Trial>, num_languages: usize, level: Level) -> Self {
        let units = trials.iter().map(|t| t.unit + 1).max().unwrap_or(0);
        TrialSet {
            trials,
            num_languages,
            level,
            unit_ids: (0..units).map(|u| u.to_string()).collect(),
        }
    }

    /// Trial dump: `score,is_target,hyp,true,unit_id`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("score,is_target,hyp,true,unit_id\n");
        for t in &self.trials {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.score,
                u8::from(t.is_target),
                t.hypothesized_language,
                t.true_language,
                self.unit_ids.get(t.unit).map_or("", String::as_str)
            );
        }
        s
    }
}

/// Frame- and utterance-level trials for every sample. Utterance
/// posteriors are the mean of the frame posteriors.
pub fn score_dataset(
    model: &ModelBundle,
    dataset: &[Sample],
    num_languages: usize,
) -> Result<(TrialSet, TrialSet), EvalError> {
    let cfg = &model.lid_model.config;
    if !cfg.heads.has_language() {
        return Err(EvalError::NoLanguageHead);
    }
    if num_languages != cfg.language_targets {
        return Err(EvalError::LanguageCount {
            dataset: num_languages,
            model: cfg.language_targets,
        });
    }
    type Scored = (Vec<Vec<f64>>, Vec<f64>);
    let scored: Vec<Result<Scored, EvalError>> = dataset
        .par_iter()
        .map(|s| {
            match s.language {
                Some(l) if l < num_languages => {}
                _ => return Err(EvalError::BadLabel(s.id.clone())),
            }
            let out = run_sequence(model, &s.frames)?;
            let post = frame_posteriors(&out.language_logits.expect("language head"))?;
            let utt = utterance_posterior(&post)?;
            Ok((post, utt))
        })
        .collect();
    let mut frame_rows = Vec::new();
    let mut utt_rows = Vec::new();
    for (s, r) in dataset.iter().zip(scored) {
        let (post, utt) = r?;
        let truth = s.language.expect("checked");
        for (t, p) in post.into_iter().enumerate() {
            frame_rows.push((format!("{}:{t}", s.id), truth, p));
        }
        utt_rows.push((s.id.clone(), truth, utt));
    }
    Ok((
        TrialSet::from_posteriors(Level::Frame, frame_rows, num_languages),
        TrialSet::from_posteriors(Level::Utterance, utt_rows, num_languages),
    ))
}

/// Pooled equal error rate.
///
/// Thresholds sweep the distinct scores plus `+∞`. At threshold `θ` the
/// false-rejection rate counts targets scoring below `θ` and the
/// false-acceptance rate counts non-targets scoring at or above `θ`. The
/// result is the crossing of the two rates, interpolated linearly between
/// the adjacent ROC vertices that bracket it.
pub fn eer(trials: &TrialSet) -> Result<f64, EvalError> {
    eer_of(trials.trials.iter())
}

fn eer_of<'a>(trials: impl Iterator<Item = &'a Trial>) -> Result<f64, EvalError> {
    let mut tgt = Vec::new();
    let mut non = Vec::new();
    for t in trials {
        if t.is_target {
            tgt.push(t.score);
        } else {
            non.push(t.score);
        }
    }
    if tgt.is_empty() || non.is_empty() {
        return Err(EvalError::OneSidedPool);
    }
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let (nt, nn) = (tgt.len() as f64, non.len() as f64);

    let mut thresholds: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    // Targets below θ and non-targets below θ, advanced monotonically.
    let (mut it, mut inn) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    for &th in &thresholds {
        while it < tgt.len() && tgt[it] < th {
            it += 1;
        }
        while inn < non.len() && non[inn] < th {
            inn += 1;
        }
        let frr = it as f64 / nt;
        let far = (non.len() - inn) as f64 / nn;
        if frr >= far {
            return Ok(match prev {
                None => frr,
                Some(_) if frr == far => frr,
                Some((frr0, far0)) => {
                    let lambda = (far0 - frr0) / ((frr - frr0) - (far - far0));
                    frr0 + lambda * (frr - frr0)
                }
            });
        }
        prev = Some((frr, far));
    }
    unreachable!("the +inf threshold rejects every target");
}

/// EER restricted to trials hypothesizing each language.
pub fn per_language_eer(trials: &TrialSet) -> Vec<Option<f64>> {
    (0..trials.num_languages)
        .map(|l| eer_of(trials.trials.iter().filter(|t| t.hypothesized_language == l)).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavgParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Acceptance threshold on posteriors; `None` means `1 / num_languages`.
    pub threshold: Option<f64>,
}

impl Default for CavgParams {
    fn default() -> Self {
        CavgParams {
            p_target: 0.5,
            c_miss: 1.0,
            c_fa: 1.0,
            threshold: None,
        }
    }
}

/// Average detection cost with hard decisions `score >= threshold`:
///
/// ```text
/// Cavg = 1/N Σ_L [ c_miss p_target P_miss(L)
///                  + 1/(N-1) Σ_{L'≠L} c_fa (1 - p_target) P_fa(L, L') ]
/// ```
pub fn cavg(trials: &TrialSet, params: &CavgParams) -> Result<f64, EvalError> {
    let n = trials.num_languages;
    if n < 2 {
        return Err(EvalError::TooFewLanguages);
    }
    let thr = params.threshold.unwrap_or(1.0 / n as f64);
    // counts[hyp][truth] and errors[hyp][truth]; the diagonal holds misses.
    let mut counts = vec![vec![0usize; n]; n];
    let mut errors = vec![vec![0usize; n]; n];
    for t in &trials.trials {
        let (h, l) = (t.hypothesized_language, t.true_language);
        counts[h][l] += 1;
        let accepted = t.score >= thr;
        if (h == l && !accepted) || (h != l && accepted) {
            errors[h][l] += 1;
        }
    }
    let mut total = 0.0;
    for h in 0..n {
        for l in 0..n {
            if counts[h][l] == 0 {
                return Err(EvalError::EmptyLanguage { hyp: h, truth: l });
            }
        }
        let p_miss = errors[h][h] as f64 / counts[h][h] as f64;
        let fa: f64 = (0..n)
            .filter(|&l| l != h)
            .map(|l| params.c_fa * (1.0 - params.p_target) * errors[h][l] as f64 / counts[h][l] as f64)
            .sum();
        total += params.c_miss * params.p_target * p_miss + fa / (n - 1) as f64;
    }
    Ok(total / n as f64)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub cavg_frame: f64,
    pub cavg_utt: f64,
    pub eer_frame: f64,
    pub eer_utt: f64,
}

pub const METRICS_HEADER: &str = "model,cavg_frame,cavg_utt,eer_frame,eer_utt";

pub fn report(model: &str, frame_trials: &TrialSet, utt_trials: &TrialSet) -> Result<MetricsRow, EvalError> {
    let p = CavgParams::default();
    Ok(MetricsRow {
        model: model.to_string(),
        cavg_frame: cavg(frame_trials, &p)?,
        cavg_utt: cavg(utt_trials, &p)?,
        eer_frame: eer(frame_trials)?,
        eer_utt: eer(utt_trials)?,
    })
}

/// Full-precision CSV; `f64` display output round-trips exactly.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.model, r.cavg_frame, r.cavg_utt, r.eer_frame, r.eer_utt
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(EvalError::Csv("missing header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(EvalError::Csv(format!("expected 5 fields in '{l}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Csv(e.to_string()));
            Ok(MetricsRow {
                model: f[0].to_string(),
                cavg_frame: num(f[1])?,
                cavg_utt: num(f[2])?,
                eer_frame: num(f[3])?,
                eer_utt: num(f[4])?,
            })
        })
        .collect()
}

/// Human-readable table with EER in percent.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$} | {:>8} {:>8} | {:>7} {:>7}\n",
        "model", "Cavg Fr", "Cavg Utt", "EER% Fr", "EER% Ut"
    );
    let _ = writeln!(s, "{}", "-".repeat(width + 38));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$} | {:>8.4} {:>8.4} | {:>7.2} {:>7.2}",
            r.model,
            r.cavg_frame,
            r.cavg_utt,
            100.0 * r.eer_frame,
            100.0 * r.eer_utt
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(targets: &[f64], nontargets: &[f64]) -> TrialSet {
        let mut trials = Vec::new();
        for (k, &s) in targets.iter().enumerate() {
            trials.push(Trial {
                score: s,
                is_target: true,
                hypothesized_language: 0,
                true_language: 0,
                unit: k,
            });
        }
        for (k, &s) in nontargets.iter().enumerate() {
            trials.push(Trial {
                score: s,
                is_target: false,
                hypothesized_language: 0,
                true_language: 1,
                unit: targets.len() + k,
            });
        }
        TrialSet::from_trials(trials, 2, Level::Utterance)
    }

    fn two_class(posteriors: &[(usize, f64)]) -> TrialSet {
        TrialSet::from_posteriors(
            Level::Utterance,
            posteriors
                .iter()
                .enumerate()
                .map(|(i, &(truth, p0))| (i.to_string(), truth, vec![p0, 1.0 - p0])),
            2,
        )
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&binary(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(eer(&binary(&[0.3, 0.7, 0.7], &[0.7, 0.3, 0.7])).unwrap(), 0.5);
        assert_eq!(eer(&binary(&[0.4], &[0.4])).unwrap(), 0.5);
        let v = eer(&binary(&[0.9, 0.7, 0.6], &[0.65, 0.2, 0.1])).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(eer(&binary(&[0.9], &[])), Err(EvalError::OneSidedPool));
    }

    #[test]
    fn eer_interpolates_between_vertices() {
        // Vertices (FRR, FAR): (0,1) (0,0.5) (0.5,0.5)... crossing lands on a
        // vertex; shift one target to force a segment crossing.
        let v = eer(&binary(&[0.5, 0.9], &[0.6, 0.1, 0.2])).unwrap();
        // θ=0.6: FRR 1/2, FAR 1/3; θ=0.5: FRR 0, FAR 1/3 -> cross between
        // (0, 1/3) and (1/2, 1/3) at FAR = 1/3.
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cavg_examples() {
        let perfect = two_class(&[(0, 1.0), (1, 0.0), (0, 1.0), (1, 0.0)]);
        assert_eq!(cavg(&perfect, &CavgParams::default()).unwrap(), 0.0);
        let uniform = two_class(&[(0, 0.5), (1, 0.5), (0, 0.5), (1, 0.5)]);
        assert_eq!(cavg(&uniform, &CavgParams::default()).unwrap(), 0.5);

        let mixed = two_class(&[(0, 0.9), (0, 0.4), (1, 0.3), (1, 0.6), (1, 0.55)]);
        let base = cavg(&mixed, &CavgParams::default()).unwrap();
        let scaled = cavg(
            &mixed,
            &CavgParams {
                c_miss: 3.0,
                c_fa: 3.0,
                ..CavgParams::default()
            },
        )
        .unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-15);
    }

    #[test]
    fn cavg_two_language_symmetric_is_mean_of_error_rates() {
        let set = two_class(&[(0, 0.9), (0, 0.4), (1, 0.3), (1, 0.6), (0, 0.7), (1, 0.2)]);
        let p = cavg(&set, &CavgParams::default()).unwrap();
        let thr = 0.5;
        let tgt: Vec<_> = set.trials.iter().filter(|t| t.is_target).collect();
        let non: Vec<_> = set.trials.iter().filter(|t| !t.is_target).collect();
        let miss = tgt.iter().filter(|t| t.score < thr).count() as f64 / tgt.len() as f64;
        let fa = non.iter().filter(|t| t.score >= thr).count() as f64 / non.len() as f64;
        assert!((p - 0.5 * (miss + fa)).abs() < 1e-15);
    }

    #[test]
    fn cavg_errors() {
        let only_zero = two_class(&[(0, 0.7), (0, 0.2)]);
        assert!(matches!(
            cavg(&only_zero, &CavgParams::default()),
            Err(EvalError::EmptyLanguage { .. })
        ));
        let one = TrialSet::from_trials(vec![], 1, Level::Frame);
        assert_eq!(cavg(&one, &CavgParams::default()), Err(EvalError::TooFewLanguages));
    }

    #[test]
    fn report_csv_round_trip_and_table() {
        let rows = vec![
            MetricsRow {
                model: "lid".into(),
                cavg_frame: 0.1 + 0.2,
                cavg_utt: 1.0 / 3.0,
                eer_frame: std::f64::consts::PI / 10.0,
                eer_utt: 0.0,
            },
            MetricsRow {
                model: "mlt".into(),
                cavg_frame: 1e-17,
                cavg_utt: 0.5,
                eer_frame: 0.123456789012345,
                eer_utt: 2.0 / 7.0,
            },
        ];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("model,cavg_frame,cavg_utt,eer_frame,eer_utt\n"));
        assert_eq!(parse_metrics_csv(&csv).unwrap(), rows);
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 4);

        let perfect = two_class(&[(0, 1.0), (1, 0.0)]);
        let r = report("p", &perfect, &perfect).unwrap();
        assert_eq!((r.cavg_frame, r.cavg_utt, r.eer_frame, r.eer_utt), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn trial_dump_has_one_row_per_trial() {
        let set = two_class(&[(0, 0.8), (1, 0.3)]);
        let csv = set.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.lines().nth(1).unwrap().ends_with(",1,0,0,0"));
    }

    proptest! {
        #[test]
        fn eer_invariant_under_monotone_maps_and_duplication(
            pts in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let tg: Vec<f64> = pts.iter().filter(|p| p.1).map(|p| p.0).collect();
            let nt: Vec<f64> = pts.iter().filter(|p| !p.1).map(|p| p.0).collect();
            prop_assume!(!tg.is_empty() && !nt.is_empty());
            let base = eer(&binary(&tg, &nt)).unwrap();
            let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
            let mapped = eer(&binary(&f(&tg), &f(&nt))).unwrap();
            prop_assert!((base - mapped).abs() < 1e-12);
            let dup = |v: &Vec<f64>| v.iter().chain(v).copied().collect::<Vec<_>>();
            let doubled = eer(&binary(&dup(&tg), &dup(&nt))).unwrap();
            prop_assert!((base - doubled).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn cavg_unchanged_by_duplication(
            rows in proptest::collection::vec((0usize..3, proptest::collection::vec(0.01f64..1.0, 3)), 6..30)
        ) {
            let rows: Vec<(String, usize, Vec<f64>)> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (truth, w))| {
                    let s: f64 = w.iter().sum();
                    (i.to_string(), truth, w.iter().map(|x| x / s).collect())
                })
                .collect();
            let set = TrialSet::from_posteriors(Level::Frame, rows.clone(), 3);
            let twice = TrialSet::from_posteriors(Level::Frame, rows.iter().chain(&rows).cloned(), 3);
            match cavg(&set, &CavgParams::default()) {
                Ok(a) => {
                    let b = cavg(&twice, &CavgParams::default()).unwrap();
                    prop_assert!((a - b).abs() < 1e-12);
                }
                Err(e) => {
                    let empty = matches!(e, EvalError::EmptyLanguage { .. });
                    prop_assert!(empty);
                }
            }
        }
    }
}
