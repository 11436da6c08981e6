//! Equal error rate and score files.
//!
//! For a threshold `t`, a trial is accepted when `score >= t`:
//! `FRR(t)` is the fraction of bonafide trials with `score < t` and `FAR(t)`
//! the fraction of spoof trials with `score >= t`. Candidate thresholds are
//! every distinct score plus `±∞`. The EER is `(FAR + FRR) / 2` at the
//! candidate minimizing `|FAR − FRR|`, ties broken by smaller `FAR + FRR`
//! and then by smaller threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEntry<S> {
    pub utt_id: String,
    pub label: Label,
    pub score: S,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet<S> {
    pub entries: Vec<ScoreEntry<S>>,
}

impl<S: Scalar> ScoreSet<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, utt_id: impl Into<String>, label: Label, score: S) {
        self.entries.push(ScoreEntry {
            utt_id: utt_id.into(),
            label,
            score,
        });
    }

    pub fn from_parts(bonafide: &[S], spoof: &[S]) -> Self {
        let mut set = Self::new();
        for (i, &s) in bonafide.iter().enumerate() {
            set.push(format!("b{i}"), Label::Bonafide, s);
        }
        for (i, &s) in spoof.iter().enumerate() {
            set.push(format!("s{i}"), Label::Spoof, s);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult<S> {
    pub eer: S,
    pub threshold: S,
    pub far: S,
    pub frr: S,
}

/// Sweeps thresholds in ascending score order; `O(n log n)`.
pub fn compute_eer<S: Scalar>(scores: &ScoreSet<S>) -> Result<EerResult<S>> {
    let mut bona: Vec<S> = Vec::new();
    let mut spoof: Vec<S> = Vec::new();
    for e in &scores.entries {
        if !e.score.is_finite() {
            return Err(Error::NonFinite(format!("score of {}", e.utt_id)));
        }
        match e.label {
            Label::Bonafide => bona.push(e.score),
            Label::Spoof => spoof.push(e.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Validation(
            "EER needs at least one bonafide and one spoof score".into(),
        ));
    }
    let cmp = |a: &S, b: &S| a.partial_cmp(b).unwrap();
    bona.sort_by(cmp);
    spoof.sort_by(cmp);
    let nb = S::of_usize(bona.len());
    let ns = S::of_usize(spoof.len());

    let mut thresholds: Vec<S> = Vec::with_capacity(bona.len() + spoof.len() + 2);
    thresholds.push(S::neg_infinity());
    thresholds.extend(bona.iter().chain(&spoof).copied());
    thresholds.push(S::infinity());
    thresholds.sort_by(cmp);
    thresholds.dedup();

    let mut best: Option<(S, S, EerResult<S>)> = None;
    // Count of scores strictly below the current threshold, per class.
    let (mut bi, mut si) = (0usize, 0usize);
    for &t in &thresholds {
        while bi < bona.len() && bona[bi] < t {
            bi += 1;
        }
        while si < spoof.len() && spoof[si] < t {
            si += 1;
        }
        let frr = S::of_usize(bi) / nb;
        let far = S::of_usize(spoof.len() - si) / ns;
        let gap = (far - frr).abs();
        let total = far + frr;
        let better = match &best {
            None => true,
            Some((g, s, _)) => gap < *g || (gap == *g && total < *s),
        };
        if better {
            best = Some((
                gap,
                total,
                EerResult {
                    eer: total / S::lit(2.0),
                    threshold: t,
                    far,
                    frr,
                },
            ));
        }
    }
    Ok(best.expect("thresholds always include the sentinels").2)
}

pub fn mean_eer<S: Scalar>(results: &[EerResult<S>]) -> Result<S> {
    if results.is_empty() {
        return Err(Error::Validation("mean of zero EER results".into()));
    }
    Ok(mean(results.iter().map(|r| r.eer)))
}

/// Left-to-right arithmetic mean.
pub fn mean<S: Scalar>(values: impl IntoIterator<Item = S>) -> S {
    let mut total = S::zero();
    let mut n = 0usize;
    for v in values {
        total += v;
        n += 1;
    }
    total / S::of_usize(n)
}

/// `utt_id label score` lines, score with six decimals.
pub fn format_scores<S: Scalar>(scores: &ScoreSet<S>) -> String {
    let mut out = String::with_capacity(scores.len() * 32);
    for e in &scores.entries {
        writeln!(
            out,
            "{} {} {:.6}",
            e.utt_id,
            e.label,
            e.score.to_f64().unwrap()
        )
        .unwrap();
    }
    out
}

pub fn write_scores<S: Scalar>(scores: &ScoreSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn parse_scores<S: Scalar>(text: &str, source: &str) -> Result<ScoreSet<S>> {
    let mut set = ScoreSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [utt, label, score] = fields.as_slice() else {
            return Err(err(format!("expected `utt_id label score`, got {line:?}")));
        };
        let label: Label = label.parse().map_err(err)?;
        let value: f64 = score
            .parse()
            .map_err(|_| err(format!("score {score:?} is not a number")))?;
        if !value.is_finite() {
            return Err(err(format!("score {score:?} is not finite")));
        }
        set.push(*utt, label, S::lit(value));
    }
    Ok(set)
}

pub fn read_scores<S: Scalar>(path: impl AsRef<Path>) -> Result<ScoreSet<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, &path.display().to_string())
}

/// One row of the `dataset,seed,layers,backend,eer` report.
#[derive(Clone, Debug, PartialEq)]
pub struct EerReportRow {
    pub dataset: String,
    pub seed: u64,
    pub layers: usize,
    pub backend: String,
    pub eer: f64,
}

pub fn write_eer_report(rows: &[EerReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("dataset,seed,layers,backend,eer\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            r.dataset, r.seed, r.layers, r.backend, r.eer
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let r = compute_eer(&ScoreSet::from_parts(&[0.9f64, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.2 && r.threshold <= 0.8);
    }

    #[test]
    fn inverted_detector() {
        let r = compute_eer(&ScoreSet::from_parts(&[0.1f64, 0.2], &[0.9, 0.8])).unwrap();
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn four_point_set() {
        let r = compute_eer(&ScoreSet::from_parts(&[0.8f64, 0.4], &[0.6, 0.2])).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.threshold, 0.6);
        assert_eq!((r.far, r.frr), (0.5, 0.5));
    }

    #[test]
    fn needs_both_classes() {
        assert!(compute_eer(&ScoreSet::from_parts(&[0.5f32], &[])).is_err());
        assert!(compute_eer(&ScoreSet::from_parts(&[], &[0.5f32])).is_err());
        assert!(compute_eer(&ScoreSet::from_parts(&[f32::NAN], &[0.5])).is_err());
    }

    #[test]
    fn mean_eer_examples() {
        let r = |eer: f64| EerResult {
            eer,
            threshold: 0.0,
            far: eer,
            frr: eer,
        };
        assert_eq!(mean_eer(&[r(0.0)]).unwrap(), 0.0);
        assert!((mean_eer(&[r(0.02), r(0.04), r(0.06)]).unwrap() - 0.04).abs() < 1e-15);
        assert!(mean_eer::<f64>(&[]).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let mut set = ScoreSet::<f32>::new();
        set.push("u1", Label::Bonafide, 0.5);
        set.push("u2", Label::Spoof, -1.25);
        set.push("u3", Label::Bonafide, 3.0);
        assert_eq!(parse_scores::<f32>(&format_scores(&set), "x").unwrap(), set);
    }

    #[test]
    fn malformed_score_line() {
        let err = parse_scores::<f32>("u1 bonafide abc\n", "s.txt").unwrap_err();
        assert!(err.to_string().starts_with("s.txt:1:"), "{err}");
        assert!(parse_scores::<f32>("u1 bonafide\n", "s").is_err());
        assert!(parse_scores::<f32>("u1 maybe 1.0\n", "s").is_err());
    }
}
