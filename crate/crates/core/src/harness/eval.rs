use serde::{Deserialize, Serialize};

use crate::conditioner::{argmax, Provenance, Task};
use crate::encoder::{self, RunInput};
use crate::error::{Error, Result};
use crate::metrics::{self, DcfParams, ScoreSet};
use crate::model::{self, ModelConfig};
use crate::params::{ParamStore, Scope};
use crate::synthdata::{Corpus, Trial, Utterance};

/// Held-out metrics. Error rates and accuracy are fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub cer_normal: f64,
    pub cer_fewshot: f64,
    pub lid_acc: f64,
    pub eer: f64,
    pub min_dcf: f64,
}

impl Report {
    pub const METRICS: [&'static str; 5] = ["cer_normal", "cer_fewshot", "lid_acc", "eer", "min_dcf"];

    pub fn max_abs_diff(&self, other: &Report) -> f64 {
        [
            self.cer_normal - other.cer_normal,
            self.cer_fewshot - other.cer_fewshot,
            self.lid_acc - other.lid_acc,
            self.eer - other.eer,
            self.min_dcf - other.min_dcf,
        ]
        .iter()
        .fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Outputs of one inference pass over an utterance.
pub struct Inference {
    pub hypothesis: Vec<usize>,
    pub language: usize,
    pub sv_embedding: Option<Vec<f64>>,
}

pub fn infer(store: &ParamStore<f32>, m: &ModelConfig, u: &Utterance, want_asr: bool, want_sv: bool) -> Result<Inference> {
    let mut s = Scope::new(store);
    let mut input = RunInput::new(&u.features);
    input.language = u.language;
    if m.conditioning.lid_provenance == Provenance::GroundTruth && u.language.is_none() {
        input.dropped[Task::Lid as usize] = true;
    }
    let mut out = encoder::encode(&mut s, m, &input)?;
    let hypothesis = if want_asr {
        let lp = model::asr_head(&mut s, m, &out)?;
        metrics::greedy_decode(s.g.value(lp))
    } else {
        vec![]
    };
    let lid = model::lid_head(&mut s, m, &mut out)?;
    let language = argmax(s.g.value(lid.posteriors).data());
    let sv_embedding = if want_sv {
        let sv = model::sv_head(&mut s, m, &mut out)?;
        let e: Vec<f64> = s.g.value(sv.embedding).data().iter().map(|&v| v as f64).collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Some(e.into_iter().map(|v| v / n).collect())
    } else {
        None
    };
    Ok(Inference {
        hypothesis,
        language,
        sv_embedding,
    })
}

fn split_cer(store: &ParamStore<f32>, m: &ModelConfig, utts: &[Utterance], preds: &mut Vec<usize>, labels: &mut Vec<usize>) -> Result<f64> {
    let mut pairs = Vec::with_capacity(utts.len());
    for u in utts {
        let reference = u
            .transcript
            .clone()
            .ok_or_else(|| Error::Format(format!("eval utterance {} lacks a transcript", u.id)))?;
        let inf = infer(store, m, u, true, false)?;
        if let Some(l) = u.language {
            preds.push(inf.language);
            labels.push(l);
        }
        pairs.push((inf.hypothesis, reference));
    }
    metrics::corpus_cer(pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice())))
}

/// Cosine scores of L2-normalized SV embeddings over the trial list.
pub fn trial_scores(store: &ParamStore<f32>, m: &ModelConfig, utts: &[Utterance], trials: &[Trial]) -> Result<ScoreSet> {
    let embeddings = utts
        .iter()
        .map(|u| Ok(infer(store, m, u, false, true)?.sv_embedding.expect("requested")))
        .collect::<Result<Vec<_>>>()?;
    let mut set = ScoreSet::default();
    for t in trials {
        let (a, b) = match (embeddings.get(t.enroll), embeddings.get(t.test)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Format(format!("trial references utterance {} beyond the SV split", t.enroll.max(t.test)))),
        };
        let score: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        if t.target {
            set.target.push(score);
        } else {
            set.nontarget.push(score);
        }
    }
    Ok(set)
}

pub fn evaluate(store: &ParamStore<f32>, m: &ModelConfig, corpus: &Corpus) -> Result<Report> {
    if corpus.eval_normal.is_empty() {
        return Err(Error::EmptyInput("eval_normal split"));
    }
    if corpus.eval_fewshot.is_empty() {
        return Err(Error::EmptyInput("eval_fewshot split"));
    }
    if corpus.sv_eval.is_empty() || corpus.trials.is_empty() {
        return Err(Error::EmptyInput("eval_sv split"));
    }
    let (mut preds, mut labels) = (vec![], vec![]);
    let cer_normal = split_cer(store, m, &corpus.eval_normal, &mut preds, &mut labels)?;
    let cer_fewshot = split_cer(store, m, &corpus.eval_fewshot, &mut preds, &mut labels)?;
    let lid_acc = metrics::lid_accuracy(&preds, &labels)?;
    let scores = trial_scores(store, m, &corpus.sv_eval, &corpus.trials)?;
    Ok(Report {
        cer_normal,
        cer_fewshot,
        lid_acc,
        eer: metrics::eer(&scores)?,
        min_dcf: metrics::min_dcf(&scores, DcfParams::default())?,
    })
}
