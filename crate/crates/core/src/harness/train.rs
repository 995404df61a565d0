use std::collections::HashMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conditioner::{Provenance, Task};
use crate::decoders;
use crate::encoder::{self, EncoderMode, RunInput};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, LossWeights, OptimizerKind, StageHyper};
use crate::layers;
use crate::losses;
use crate::model::{self, ModelConfig};
use crate::params::{derive_seed, rng_for, Block, ParamStore, Scope};
use crate::synthdata::{Corpus, Utterance};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretext,
    Decoders,
    CaL,
    SvDecoder,
    CaLs,
    FullFinetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub pretext: bool,
    pub asr: bool,
    pub lid: bool,
    pub sv: bool,
}

impl LossSet {
    const TASKS: LossSet = LossSet {
        pretext: false,
        asr: true,
        lid: true,
        sv: true,
    };

    fn only(task: Option<Task>) -> LossSet {
        LossSet {
            pretext: false,
            asr: task.is_none(),
            lid: task == Some(Task::Lid),
            sv: task == Some(Task::Sv),
        }
    }
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretext => "pretext",
            StageKind::Decoders => "decoders",
            StageKind::CaL => "ca_l",
            StageKind::SvDecoder => "sv_decoder",
            StageKind::CaLs => "ca_ls",
            StageKind::FullFinetune => "full_finetune",
        }
    }

    pub fn losses(self) -> LossSet {
        match self {
            StageKind::Pretext => LossSet {
                pretext: true,
                ..Default::default()
            },
            StageKind::CaL => LossSet {
                sv: false,
                ..LossSet::TASKS
            },
            StageKind::SvDecoder => LossSet::only(Some(Task::Sv)),
            StageKind::Decoders | StageKind::CaLs | StageKind::FullFinetune => LossSet::TASKS,
        }
    }

    pub fn trainable(self) -> Vec<Block> {
        use Block::*;
        match self {
            StageKind::Pretext => vec![Encoder, PretextHead],
            StageKind::Decoders => vec![AsrDecoder, LidFeat, LidDecoder, SvFeat, SvDecoder],
            StageKind::CaL => vec![AsrDecoder, LidFeat, LidConditioner, LidConditionProjection],
            StageKind::SvDecoder => vec![SvFeat, SvDecoder],
            StageKind::CaLs => vec![
                AsrDecoder,
                LidFeat,
                SvFeat,
                LidConditioner,
                SvConditioner,
                LidConditionProjection,
                SvConditionProjection,
            ],
            StageKind::FullFinetune => vec![Encoder, AsrDecoder, LidFeat, LidDecoder, SvFeat, SvDecoder],
        }
    }

    /// Whether the encoder runs with the experiment's conditioning schedule.
    pub fn conditioned(self) -> bool {
        matches!(self, StageKind::CaL | StageKind::SvDecoder | StageKind::CaLs)
    }

    pub fn hyper(self, cfg: &ExperimentConfig) -> StageHyper {
        let t = &cfg.training;
        match self {
            StageKind::Pretext => t.pretext,
            StageKind::Decoders => t.decoders,
            StageKind::CaL => t.ca_l,
            StageKind::SvDecoder => t.sv_decoder,
            StageKind::CaLs => t.ca_ls,
            StageKind::FullFinetune => t.full_finetune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    pub losses: LossSet,
    pub trainable: Vec<Block>,
    /// Stage whose checkpoint initializes this one, or `"scratch"`.
    pub init: String,
    pub hyper: StageHyper,
}

impl Stage {
    pub fn new(kind: StageKind, init: &str, cfg: &ExperimentConfig) -> Self {
        Stage {
            name: kind.name().to_string(),
            kind,
            losses: kind.losses(),
            trainable: kind.trainable(),
            init: init.to_string(),
            hyper: kind.hyper(cfg),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(&Block::of(name))
    }

    /// Model configuration the stage runs the encoder with.
    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        let mut m = cfg.model_config();
        if !self.kind.conditioned() {
            m.encoder.mode = EncoderMode::FrozenBaseline;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub trainable_params: usize,
    pub items: usize,
    /// Training utterances carrying none of the stage's labels.
    pub skipped_unlabelled: usize,
    pub epochs: Vec<EpochLog>,
    pub frozen_blocks_checked: usize,
    pub probes_checked: usize,
}

pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    t: i32,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip: f64) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update of every trainable parameter that received a gradient.
    /// Gradients are rescaled to a global norm of at most `clip`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Vec<f32>)], lr: f64) -> Result<()> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if !p.requires_grad() {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g) {
                        *w -= (lr * scale * gi as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        let gi = g[i] as f64 * scale;
                        let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                        let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let upd = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                        p.data_mut()[i] -= upd as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// A training utterance with its frozen-prefix cache.
pub struct Item<'a> {
    pub utt: &'a Utterance,
    pub cache: Option<Vec<Tensor<f32>>>,
}

/// Depth of the unconditioned prefix that a frozen encoder can precompute.
pub fn cache_depth(m: &ModelConfig) -> usize {
    let e = &m.encoder;
    match e.mode {
        EncoderMode::FrozenBaseline | EncoderMode::CaDualPass => e.num_layers,
        EncoderMode::CaSinglePass => m
            .conditioning
            .tasks
            .iter()
            .map(|&t| e.group(t))
            .filter(|&g| g < e.num_layers)
            .min()
            .unwrap_or(e.num_layers),
    }
}

pub fn build_items<'a>(
    store: &ParamStore<f32>,
    m: &ModelConfig,
    utts: impl IntoIterator<Item = &'a Utterance>,
    with_cache: bool,
) -> Result<Vec<Item<'a>>> {
    let depth = cache_depth(m);
    utts.into_iter()
        .map(|utt| {
            let cache = if with_cache {
                Some(encoder::hidden_states(store, &m.encoder, &utt.features, depth)?)
            } else {
                None
            };
            Ok(Item { utt, cache })
        })
        .collect()
}

fn has_stage_labels(losses: LossSet, u: &Utterance) -> bool {
    losses.pretext
        || (losses.asr && u.transcript.is_some())
        || (losses.lid && u.language.is_some())
        || (losses.sv && u.speaker.is_some())
}

/// Per-sample multitask loss: CTC when a transcript is present, LID AAM when
/// a language label is present and SV AAM when a speaker label is present.
/// Returns `None` when none of the active losses has a label.
pub fn sample_loss(
    s: &mut Scope<'_, f32>,
    m: &ModelConfig,
    losses: LossSet,
    weights: &LossWeights,
    item: &Item<'_>,
    dropped: [bool; 2],
) -> Result<Option<Var>> {
    let u = item.utt;
    let transcript = u.transcript.as_deref().filter(|_| losses.asr);
    let language = u.language.filter(|_| losses.lid);
    let speaker = u.speaker.filter(|_| losses.sv);
    if transcript.is_none() && language.is_none() && speaker.is_none() {
        return Ok(None);
    }
    let mut input = RunInput::new(&u.features);
    input.language = u.language;
    input.cache = item.cache.as_deref();
    input.dropped = dropped;
    if m.conditioning.lid_provenance == Provenance::GroundTruth && u.language.is_none() {
        input.dropped[Task::Lid as usize] = true;
    }
    let mut out = encoder::encode(s, m, &input)?;
    let asr = match transcript {
        Some(t) => {
            let lp = model::asr_head(s, m, &out)?;
            Some(losses::ctc_loss(&mut s.g, lp, t)?)
        }
        None => None,
    };
    let lid = match language {
        Some(l) => {
            let o = model::lid_head(s, m, &mut out)?;
            Some(decoders::aam_loss(&mut s.g, o.cosine, &[l], m.lid.margin, m.lid.scale)?)
        }
        None => None,
    };
    let sv = match speaker {
        Some(spk) => {
            let o = model::sv_head(s, m, &mut out)?;
            Some(decoders::aam_loss(&mut s.g, o.cosine, &[spk], m.sv.margin, m.sv.scale)?)
        }
        None => None,
    };
    losses::sum_losses(&mut s.g, &[asr, lid, sv], &[weights.asr, weights.lid, weights.sv])
}

/// Sum of per-sample losses over a batch and the number of items skipped
/// for lack of labels.
pub fn multitask_loss(
    s: &mut Scope<'_, f32>,
    m: &ModelConfig,
    losses: LossSet,
    weights: &LossWeights,
    batch: &[(&Item<'_>, [bool; 2])],
) -> Result<(Option<Var>, usize)> {
    let mut total: Option<Var> = None;
    let mut skipped = 0;
    for (item, dropped) in batch {
        match sample_loss(s, m, losses, weights, item, *dropped)? {
            Some(l) => {
                total = Some(match total {
                    Some(t) => s.g.add(t, l)?,
                    None => l,
                })
            }
            None => skipped += 1,
        }
    }
    Ok((total, skipped))
}

/// Masked-span frame reconstruction through the (unconditioned) encoder.
pub fn pretext_loss(s: &mut Scope<'_, f32>, m: &ModelConfig, frames: &Tensor<f32>, mask_prob: f64, span: usize, rng: &mut impl Rng) -> Result<Var> {
    let (t, d) = (frames.rows(), frames.cols());
    let mut mask = vec![false; t];
    for i in 0..t {
        if rng.random::<f64>() < mask_prob {
            for j in i..(i + span.max(1)).min(t) {
                mask[j] = true;
            }
        }
    }
    if !mask.iter().any(|&b| b) {
        let i = rng.random_range(0..t);
        mask[i] = true;
    }
    let mut masked = frames.clone();
    for (r, &hide) in mask.iter().enumerate() {
        if hide {
            masked.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let input = RunInput::new(&masked);
    let out = encoder::run_plain(s, &m.encoder, &input)?;
    let last = *out.features.last().expect("at least the input layer");
    let pred = layers::linear(s, "pretext.out", last)?;
    let target = s.g.constant(frames.clone());
    let diff = s.g.sub(pred, target)?;
    let col: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let n = col.iter().filter(|&&v| v > 0.0).count();
    let col = s.g.constant(Tensor::new(vec![t, 1], col)?);
    let diff = s.g.mul(diff, col)?;
    let sq = s.g.square(diff);
    let total = s.g.sum_all(sq);
    Ok(s.g.scale(total, 1.0 / (n * d) as f32))
}

fn dropout_mask(cfg: &ExperimentConfig, stage: &str, epoch: usize, id: &str) -> [bool; 2] {
    let p = cfg.conditioning.dropout;
    if p <= 0.0 {
        return [false; 2];
    }
    let mut rng = rng_for(cfg.seed, &format!("drop:{stage}:{epoch}:{id}"));
    [rng.random::<f64>() < p, rng.random::<f64>() < p]
}

/// Blocks that a loss on `task` alone (ASR when `None`) must leave without
/// gradient.
fn forbidden_blocks(m: &ModelConfig, task: Option<Task>) -> Vec<Block> {
    let mut out = vec![];
    if task.is_some() {
        out.push(Block::AsrDecoder);
    }
    for other in [Task::Lid, Task::Sv] {
        if Some(other) == task || m.conditioning.conditions(other) {
            continue;
        }
        match other {
            Task::Lid => out.extend([Block::LidFeat, Block::LidDecoder]),
            Task::Sv => out.extend([Block::SvFeat, Block::SvDecoder]),
        }
    }
    out
}

/// Checks, for each task active in the stage, that a probe carrying only
/// that task's loss produces no gradient in other tasks' decoders.
pub fn probe_gradient_masks(store: &ParamStore<f32>, m: &ModelConfig, stage: &Stage, items: &[Item<'_>], weights: &LossWeights) -> Result<usize> {
    let mut checked = 0;
    let probes: [(bool, Option<Task>); 3] = [
        (stage.losses.asr, None),
        (stage.losses.lid, Some(Task::Lid)),
        (stage.losses.sv, Some(Task::Sv)),
    ];
    for (active, task) in probes {
        if !active {
            continue;
        }
        let only = LossSet::only(task);
        let Some(item) = items.iter().find(|it| has_stage_labels(only, it.utt)) else {
            continue;
        };
        let mut s = Scope::new(store);
        let Some(loss) = sample_loss(&mut s, m, only, weights, item, [false; 2])? else {
            continue;
        };
        let grads = s.g.backward(loss)?;
        let forbidden = forbidden_blocks(m, task);
        for (name, g) in s.param_grads(&grads) {
            if forbidden.contains(&Block::of(&name)) && g.iter().any(|&x| x != 0.0) {
                return Err(Error::InvariantBreach(format!(
                    "{}-only probe produced gradient in {name}",
                    task.map_or("asr", Task::key)
                )));
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// Trains the stage's blocks on its losses, then verifies that every other
/// block is bit-identical to its state before the stage.
pub fn run_stage(stage: &Stage, store: &mut ParamStore<f32>, cfg: &ExperimentConfig, corpus: &Corpus) -> Result<StageReport> {
    store.set_trainable(|n| stage.is_trainable(n));
    let before = store.frozen_hashes();
    let m = stage.model_config(cfg);
    let trainable_params = store.trainable_count();
    let encoder_frozen = !stage.trainable.contains(&Block::Encoder);
    let all: Vec<&Utterance> = corpus.train().collect();
    let labelled: Vec<&Utterance> = all.iter().copied().filter(|u| has_stage_labels(stage.losses, u)).collect();
    let skipped_unlabelled = all.len() - labelled.len();
    if skipped_unlabelled > 0 && !stage.losses.pretext {
        debug!("stage {}: {skipped_unlabelled} utterances carry none of its labels", stage.name);
    }
    let items = build_items(store, &m, labelled, encoder_frozen && !stage.losses.pretext && trainable_params > 0)?;
    let h = stage.hyper;
    let steps_per_epoch = items.len().div_ceil(h.batch_size.max(1));
    let total_steps = steps_per_epoch * h.epochs;
    let warmup_steps = (h.warmup * total_steps as f64).ceil() as usize;
    let mut opt = Optimizer::new(cfg.training.optimizer, cfg.training.grad_clip);
    let mut report = StageReport {
        name: stage.name.clone(),
        trainable_params,
        items: items.len(),
        skipped_unlabelled,
        epochs: vec![],
        frozen_blocks_checked: 0,
        probes_checked: 0,
    };
    let mut step = 0usize;
    if trainable_params > 0 && !items.is_empty() {
        for epoch in 0..h.epochs {
            if !stage.losses.pretext {
                report.probes_checked += probe_gradient_masks(store, &m, stage, &items, &cfg.training.loss_weights)?;
            }
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut rng_for(cfg.seed, &format!("order:{}:{epoch}", stage.name)));
            let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
            for chunk in order.chunks(h.batch_size.max(1)) {
                let lr = if warmup_steps > 0 && step < warmup_steps {
                    h.lr * (step + 1) as f64 / warmup_steps as f64
                } else {
                    h.lr
                };
                step += 1;
                let grads = {
                    let mut s = Scope::new(&*store);
                    let (total, counted) = if stage.losses.pretext {
                        let mut acc: Option<Var> = None;
                        for &i in chunk {
                            let u = items[i].utt;
                            let mut rng = rng_for(derive_seed(cfg.seed, &stage.name), &format!("mask:{epoch}:{}", u.id));
                            let l = pretext_loss(&mut s, &m, &u.features, cfg.training.mask_prob, cfg.training.mask_span, &mut rng)?;
                            acc = Some(match acc {
                                Some(a) => s.g.add(a, l)?,
                                None => l,
                            });
                        }
                        (acc, chunk.len())
                    } else {
                        let batch: Vec<(&Item<'_>, [bool; 2])> = chunk
                            .iter()
                            .map(|&i| {
                                let drop = if stage.kind.conditioned() {
                                    dropout_mask(cfg, &stage.name, epoch, &items[i].utt.id)
                                } else {
                                    [false; 2]
                                };
                                (&items[i], drop)
                            })
                            .collect();
                        let (total, skipped) = multitask_loss(&mut s, &m, stage.losses, &cfg.training.loss_weights, &batch)?;
                        (total, batch.len() - skipped)
                    };
                    let Some(total) = total else { continue };
                    let mean = s.g.scale(total, 1.0 / counted as f32);
                    let value = s.g.value(mean).data()[0] as f64;
                    if !value.is_finite() {
                        return Err(Error::Numerical(format!("non-finite loss in stage {}", stage.name)));
                    }
                    loss_sum += value;
                    loss_n += 1;
                    let g = s.g.backward(mean)?;
                    s.param_grads(&g)
                };
                opt.step(store, &grads, lr)?;
            }
            let mean_loss = loss_sum / loss_n.max(1) as f64;
            info!("stage {} epoch {}: loss {:.4}", stage.name, epoch + 1, mean_loss);
            report.epochs.push(EpochLog {
                epoch: epoch + 1,
                mean_loss,
                steps: loss_n,
            });
        }
    } else if trainable_params == 0 {
        warn!("stage {} has no trainable parameters", stage.name);
    }
    let after = store.frozen_hashes();
    for (name, hash) in &before {
        match after.get(name) {
            Some(h) if h == hash => {}
            _ => {
                return Err(Error::InvariantBreach(format!(
                    "frozen block {name} changed during stage {}",
                    stage.name
                )))
            }
        }
    }
    report.frozen_blocks_checked = before.len();
    Ok(report)
}
