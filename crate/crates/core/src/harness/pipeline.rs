use std::collections::HashMap;

use indexmap::IndexMap;
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, ExperimentMode};
use crate::harness::eval::{evaluate, Report};
use crate::harness::train::{run_stage, Stage, StageKind, StageReport};
use crate::model::{ensure_params, init_model, ConditioningConfig};
use crate::params::{hash_tensor, ParamStore};
use crate::synthdata::Corpus;

/// Ordered stages for the configured mode.
pub fn plan(cfg: &ExperimentConfig) -> Vec<Stage> {
    use StageKind::*;
    let kinds: Vec<StageKind> = match cfg.mode {
        ExperimentMode::FrozenBaseline => vec![Pretext, Decoders],
        ExperimentMode::FullFinetune => vec![Pretext, Decoders, FullFinetune],
        ExperimentMode::CaHierL | ExperimentMode::CaDual => vec![Pretext, Decoders, CaL, SvDecoder],
        ExperimentMode::CaHierLs => vec![Pretext, Decoders, CaL, SvDecoder, CaLs],
    };
    let mut prev = "scratch".to_string();
    kinds
        .into_iter()
        .map(|k| {
            let s = Stage::new(k, &prev, cfg);
            prev = s.name.clone();
            s
        })
        .collect()
}

/// Identifies a stage's result: the chain of earlier signatures plus every
/// setting the stage's training reads.
pub fn stage_signature(prev: &str, stage: &Stage, cfg: &ExperimentConfig) -> String {
    let mut model = stage.model_config(cfg);
    if !stage.kind.conditioned() {
        model.conditioning = ConditioningConfig::default();
    }
    let t = &cfg.training;
    let key = serde_json::json!({
        "prev": prev,
        "stage": stage,
        "model": model,
        "seed": cfg.seed,
        "corpus": cfg.corpus,
        "optimizer": t.optimizer,
        "loss_weights": t.loss_weights,
        "mask": [t.mask_prob, t.mask_span as f64],
        "grad_clip": t.grad_clip,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Completed stages shared between pipelines whose prefixes coincide.
#[derive(Default)]
pub struct PipelineCache {
    entries: HashMap<String, (ParamStore<f32>, StageReport, Option<Report>)>,
}

impl PipelineCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub report: StageReport,
    /// Held-out metrics after the stage, when requested.
    pub metrics: Option<Report>,
    pub reused: bool,
    /// SHA-256 of every block after the stage.
    pub hashes: IndexMap<String, String>,
}

pub struct PipelineResult {
    pub store: ParamStore<f32>,
    pub stages: Vec<StageOutcome>,
    pub completed: Vec<String>,
    pub report: Report,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineOptions {
    pub eval_each_stage: bool,
}

/// Brings a store to exactly the parameter set the configuration uses.
fn conform(store: &mut ParamStore<f32>, cfg: &ExperimentConfig) {
    let m = cfg.model_config();
    ensure_params(store, &m, cfg.seed);
    let wanted = init_model::<f32>(&m, cfg.seed);
    let extra: Vec<String> = store.iter().map(|(n, _)| n.clone()).filter(|n| !wanted.contains(n)).collect();
    for n in extra {
        store.remove(&n);
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig, corpus: &Corpus, cache: &mut PipelineCache, opts: PipelineOptions) -> Result<PipelineResult> {
    cfg.validate()?;
    let mut store: ParamStore<f32> = init_model(&cfg.model_config(), cfg.seed);
    let mut prev = "scratch".to_string();
    let mut stages = vec![];
    let mut completed = vec![];
    for stage in plan(cfg) {
        let sig = stage_signature(&prev, &stage, cfg);
        let mut outcome = if let Some((cached, report, metrics)) = cache.entries.get(&sig) {
            info!("stage {}: reusing completed result", stage.name);
            store = cached.clone();
            conform(&mut store, cfg);
            StageOutcome {
                report: report.clone(),
                metrics: *metrics,
                reused: true,
                hashes: IndexMap::new(),
            }
        } else {
            info!("stage {}: training", stage.name);
            let report = run_stage(&stage, &mut store, cfg, corpus)?;
            let metrics = if opts.eval_each_stage {
                Some(evaluate(&store, &stage.model_config(cfg), corpus)?)
            } else {
                None
            };
            cache.entries.insert(sig.clone(), (store.clone(), report.clone(), metrics));
            StageOutcome {
                report,
                metrics,
                reused: false,
                hashes: IndexMap::new(),
            }
        };
        outcome.hashes = store.iter().map(|(n, t)| (n.clone(), hash_tensor(t))).collect();
        stages.push(outcome);
        completed.push(stage.name.clone());
        prev = sig;
    }
    let report = evaluate(&store, &cfg.model_config(), corpus)?;
    Ok(PipelineResult {
        store,
        stages,
        completed,
        report,
    })
}
