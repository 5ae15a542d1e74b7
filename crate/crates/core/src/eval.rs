//! Alignment precision / recall / F1, span-restricted scoring, threshold
//! sweeps, and token-level tag F1 for projected annotations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentSet, Span, TaggedSentence, OUTSIDE};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Mean of per-sentence scores.
    #[default]
    Macro,
    /// Corpus-level link counts.
    Micro,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(ScoreMode::Macro),
            "micro" => Ok(ScoreMode::Micro),
            other => Err(Error::invalid(format!("unknown score mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Macro => "macro",
            ScoreMode::Micro => "micro",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Prf {
        if predicted == 0 && gold == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mode: ScoreMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_scores: Prf,
    pub micro_scores: Prf,
    pub sentences: Vec<SentenceScore>,
    /// Set when span restriction was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_restricted: Option<SpanRestriction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRestriction {
    pub spans: usize,
    /// No links survived on either side; the perfect score is vacuous.
    pub vacuous: bool,
}

impl ScoreReport {
    pub fn total_predicted(&self) -> usize {
        self.sentences.iter().map(|s| s.predicted).sum()
    }

    pub fn total_gold(&self) -> usize {
        self.sentences.iter().map(|s| s.gold).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\tP\tR\tF1\n");
        for (mode, s) in [(ScoreMode::Macro, &self.macro_scores), (ScoreMode::Micro, &self.micro_scores)] {
            let mark = if mode == self.mode { "*" } else { "" };
            let _ = writeln!(out, "{mode}{mark}\t{:.4}\t{:.4}\t{:.4}", s.precision, s.recall, s.f1);
        }
        out
    }
}

pub fn score(pred: &[AlignmentSet], gold: &[AlignmentSet], mode: ScoreMode) -> Result<ScoreReport> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted sentences vs {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let sentences: Vec<SentenceScore> = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let correct = p.intersection(g).len();
            SentenceScore {
                correct,
                predicted: p.len(),
                gold: g.len(),
                prf: Prf::from_counts(correct, p.len(), g.len()),
            }
        })
        .collect();

    let n = sentences.len().max(1) as f64;
    let macro_scores = if sentences.is_empty() {
        Prf::from_counts(0, 0, 0)
    } else {
        Prf {
            precision: sentences.iter().map(|s| s.prf.precision).sum::<f64>() / n,
            recall: sentences.iter().map(|s| s.prf.recall).sum::<f64>() / n,
            f1: sentences.iter().map(|s| s.prf.f1).sum::<f64>() / n,
        }
    };
    let (c, p, g) = sentences
        .iter()
        .fold((0, 0, 0), |(c, p, g), s| (c + s.correct, p + s.predicted, g + s.gold));
    let micro_scores = Prf::from_counts(c, p, g);
    let sel = match mode {
        ScoreMode::Macro => macro_scores,
        ScoreMode::Micro => micro_scores,
    };
    Ok(ScoreReport {
        mode,
        precision: sel.precision,
        recall: sel.recall,
        f1: sel.f1,
        macro_scores,
        micro_scores,
        sentences,
        span_restricted: None,
    })
}

/// Keeps links whose source index lies in one of `spans`.
pub fn restrict_to_spans(set: &AlignmentSet, spans: &[Span]) -> AlignmentSet {
    set.iter().filter(|&(i, _)| spans.iter().any(|s| s.contains(i))).collect()
}

/// Scores only links whose source token lies inside a span of that sentence.
/// `source_lens` bounds-checks the spans.
pub fn score_span_restricted(
    pred: &[AlignmentSet],
    gold: &[AlignmentSet],
    spans: &[Vec<Span>],
    source_lens: &[usize],
    mode: ScoreMode,
) -> Result<ScoreReport> {
    if spans.len() != pred.len() || source_lens.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} span lines / {} lengths for {} sentences",
            spans.len(),
            source_lens.len(),
            pred.len()
        )));
    }
    for (k, (ss, &n)) in spans.iter().zip(source_lens).enumerate() {
        if let Some(bad) = ss.iter().find(|s| s.start >= s.end || s.end > n) {
            return Err(Error::invalid(format!(
                "span {}..{} invalid for sentence {} of length {n}",
                bad.start,
                bad.end,
                k + 1
            )));
        }
    }
    let fp: Vec<AlignmentSet> = pred.iter().zip(spans).map(|(p, s)| restrict_to_spans(p, s)).collect();
    let fg: Vec<AlignmentSet> = gold.iter().zip(spans).map(|(g, s)| restrict_to_spans(g, s)).collect();
    let mut report = score(&fp, &fg, mode)?;
    report.span_restricted = Some(SpanRestriction {
        spans: spans.iter().map(Vec::len).sum(),
        vacuous: report.total_predicted() == 0 && report.total_gold() == 0,
    });
    Ok(report)
}

/// Links with probability at least `alpha`.
pub fn threshold(probs: &Matrix, alpha: f64) -> AlignmentSet {
    let mut out = AlignmentSet::new();
    for i in 0..probs.rows() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            if p >= alpha {
                out.insert(i, j);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: ScoreMode,
    pub rows: Vec<SweepRow>,
    pub best_alpha: f64,
    pub best_f1: f64,
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("alpha\tP\tR\tF1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}", r.alpha, r.precision, r.recall, r.f1);
        }
        out
    }
}

/// `steps + 1` evenly spaced values from `lo` to `hi`.
pub fn alpha_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            let a = lo + (hi - lo) * k as f64 / steps.max(1) as f64;
            (a * 1e9).round() / 1e9
        })
        .collect()
}

/// Decodes every matrix at each threshold and scores against `gold`.
/// The best row is the first one reaching the maximum F1.
pub fn sweep_threshold(
    probs: &[Matrix],
    gold: &[AlignmentSet],
    grid: &[f64],
    mode: ScoreMode,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    if grid.iter().any(|a| !(0.0..=1.0).contains(a)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("threshold grid must be ascending within [0, 1]"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let pred: Vec<AlignmentSet> = probs.iter().map(|p| threshold(p, alpha)).collect();
        let r = score(&pred, gold, mode)?;
        rows.push(SweepRow {
            alpha,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        });
    }
    let best = rows
        .iter()
        .fold(rows[0], |b, r| if r.f1 > b.f1 { *r } else { b });
    Ok(SweepReport {
        mode,
        best_alpha: best.alpha,
        best_f1: best.f1,
        rows,
    })
}

/// Token-level tag agreement over non-`O` labels.
pub fn tag_f1(pred: &[TaggedSentence], gold: &[TaggedSentence]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!("{} vs {} tagged sentences", pred.len(), gold.len())));
    }
    let (mut correct, mut predicted, mut expected) = (0, 0, 0);
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!("sentence {}: tag lengths differ", k + 1)));
        }
        for (pt, gt) in p.tags.iter().zip(&g.tags) {
            let pn = pt != OUTSIDE;
            let gn = gt != OUTSIDE;
            predicted += pn as usize;
            expected += gn as usize;
            correct += (pn && gn && pt == gt) as usize;
        }
    }
    Ok(Prf::from_counts(correct, predicted, expected))
}
