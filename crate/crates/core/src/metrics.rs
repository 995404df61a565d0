//! Evaluation metrics: greedy CTC decoding, CER, LID accuracy, EER, minDCF.

use serde::{Deserialize, Serialize};

use crate::decoders::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Best-path decoding: per-frame argmax (ties to the lowest index), collapse
/// repeats, drop blanks.
pub fn greedy_decode<F: Real>(log_probs: &Tensor<F>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.rows() {
        let best = crate::conditioner::argmax(log_probs.row_slice(r));
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

pub fn cer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedReference);
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level CER: total edits over total reference length.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64> {
    let (mut edits, mut total) = (0usize, 0usize);
    for (h, r) in pairs {
        edits += levenshtein(h, r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::UndefinedReference);
    }
    Ok(edits as f64 / total as f64)
}

pub fn lid_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("lid_accuracy"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

/// `(P_miss, P_fa)` at each candidate threshold in increasing order. A trial
/// is accepted when its score is `>= θ`; the candidates are every distinct
/// score followed by `+∞`.
fn operating_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    if scores.target.is_empty() || scores.nontarget.is_empty() {
        return Err(Error::EmptyInput("score set"));
    }
    let mut tagged: Vec<(f64, bool)> = scores
        .target
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nontarget.iter().map(|&s| (s, false)))
        .collect();
    if tagged.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (scores.target.len() as f64, scores.nontarget.len() as f64);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut points = Vec::with_capacity(tagged.len() + 1);
    let mut i = 0;
    while i < tagged.len() {
        let theta = tagged[i].0;
        points.push((below_t as f64 / nt, 1.0 - below_n as f64 / nn));
        while i < tagged.len() && tagged[i].0 == theta {
            if tagged[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push((1.0, 0.0));
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two adjacent
/// operating points where `P_miss − P_fa` changes sign.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let pts = operating_points(scores)?;
    let i = pts.iter().position(|&(m, f)| m >= f).expect("last point has P_miss = 1");
    if i == 0 {
        return Ok(pts[0].0);
    }
    let (m0, f0) = pts[i - 1];
    let (m1, f1) = pts[i];
    let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    Ok(m0 + t * (m1 - m0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Normalized minimum detection cost over all thresholds.
pub fn min_dcf(scores: &ScoreSet, p: DcfParams) -> Result<f64> {
    let pts = operating_points(scores)?;
    let a = p.p_target * p.c_miss;
    let b = (1.0 - p.p_target) * p.c_fa;
    let best = pts.iter().map(|&(m, f)| a * m + b * f).fold(f64::INFINITY, f64::min);
    Ok(best / a.min(b))
}
