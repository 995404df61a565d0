//! Model configuration, parameter initialization and task heads on top of
//! the encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conditioner::{self, ConditionerDims, ConditionerMode, Provenance, Task};
use crate::decoders::{self, AsrDecoderConfig, ClsDecoderConfig, ClsOutput};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore, Scope};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub mode: ConditionerMode,
    /// Width R of the conditioning feature.
    pub cond_dim: usize,
    /// Attention hidden width C'; `None` means C/4.
    pub attn_hidden: Option<usize>,
    /// Tasks whose estimates condition the encoder.
    pub tasks: Vec<Task>,
    /// Source of the LID conditioning feature. SV always uses embeddings.
    pub lid_provenance: Provenance,
    /// Probability of replacing a task's condition by the identity for a
    /// whole training utterance.
    pub dropout: f64,
    /// Stop gradients at intermediate conditioning features.
    pub detach_intermediate: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            mode: ConditionerMode::Cc,
            cond_dim: 16,
            attn_hidden: None,
            tasks: vec![],
            lid_provenance: Provenance::Embedding,
            dropout: 0.5,
            detach_intermediate: false,
        }
    }
}

impl ConditioningConfig {
    pub fn conditions(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    pub fn provenance(&self, task: Task) -> Provenance {
        match task {
            Task::Lid => self.lid_provenance,
            Task::Sv => Provenance::Embedding,
        }
    }

    pub fn dims(&self, channels: usize) -> ConditionerDims {
        ConditionerDims {
            channels,
            cond_dim: self.cond_dim,
            attn_hidden: self.attn_hidden.unwrap_or((channels / 4).max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub conditioning: ConditioningConfig,
    pub lid: ClsDecoderConfig,
    pub sv: ClsDecoderConfig,
    pub asr: AsrDecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            conditioning: ConditioningConfig::default(),
            lid: ClsDecoderConfig::lid(12),
            sv: ClsDecoderConfig::sv(30),
            asr: AsrDecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn cls(&self, task: Task) -> &ClsDecoderConfig {
        match task {
            Task::Lid => &self.lid,
            Task::Sv => &self.sv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lid.validate()?;
        self.sv.validate()?;
        let e = &self.encoder;
        if self.conditioning.conditions(Task::Lid)
            && self.conditioning.conditions(Task::Sv)
            && e.sv_group % e.lid_group != 0
        {
            return Err(Error::Config(format!(
                "SV group size {} must be a multiple of the LID group size {}",
                e.sv_group, e.lid_group
            )));
        }
        if !(0.0..=1.0).contains(&self.conditioning.dropout) {
            return Err(Error::Config("condition dropout must lie in [0, 1]".into()));
        }
        if self.conditioning.cond_dim == 0 {
            return Err(Error::Config("conditioning width must be positive".into()));
        }
        Ok(())
    }
}

/// Inserts every block the configuration calls for that is not yet present.
/// Blocks draw from name-keyed streams, so the result does not depend on
/// which blocks already existed.
pub fn ensure_params<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) {
    let mut fresh = ParamStore::new();
    let e = &cfg.encoder;
    encoder::init_encoder(&mut fresh, seed, e);
    init::linear(&mut fresh, seed, "pretext.out", e.input_dim, e.hidden);
    decoders::init_asr(&mut fresh, seed, &cfg.asr, e.hidden, e.num_layers);
    decoders::init_cls(&mut fresh, seed, Task::Lid, &cfg.lid, e.hidden, e.num_layers);
    decoders::init_cls(&mut fresh, seed, Task::Sv, &cfg.sv, e.hidden, e.num_layers);
    let c = &cfg.conditioning;
    for task in [Task::Lid, Task::Sv] {
        if !c.conditions(task) {
            continue;
        }
        for l in 0..e.num_layers {
            let prefix = conditioner_prefix(task, l);
            conditioner::init_params(&mut fresh, seed, &prefix, c.mode, c.dims(e.hidden));
        }
        conditioner::init_projection(
            &mut fresh,
            seed,
            task,
            c.provenance(task),
            c.cond_dim,
            cfg.cls(task).embed_dim,
            cfg.cls(task).num_classes,
        );
    }
    for (name, t) in fresh.iter() {
        if !store.contains(name) {
            store.insert(name.clone(), t.clone());
        }
    }
}

pub fn init_model<F: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<F> {
    let mut store = ParamStore::new();
    ensure_params(&mut store, cfg, seed);
    store
}

pub fn conditioner_prefix(task: Task, layer: usize) -> String {
    format!("cond.{}.layer{layer}", task.key())
}

/// Final LID decode over all layers.
pub fn lid_head<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, out: &mut EncoderOutput) -> Result<ClsOutput> {
    if let Some(lid) = out.lid {
        return Ok(lid);
    }
    let lid = cls_head(s, cfg, Task::Lid, &out.features)?;
    out.stats.lid_decodes += 1;
    out.lid = Some(lid);
    Ok(lid)
}

pub fn sv_head<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, out: &mut EncoderOutput) -> Result<ClsOutput> {
    let sv = cls_head(s, cfg, Task::Sv, &out.features)?;
    out.stats.sv_decodes += 1;
    Ok(sv)
}

/// Classification decoder over the aggregated prefix `features`.
pub fn cls_head<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, task: Task, features: &[Var]) -> Result<ClsOutput> {
    let w = s.param(&format!("{}.agg", task.key()))?;
    let f = decoders::weighted_sum(&mut s.g, features, w)?;
    decoders::cls_forward(s, task, cfg.cls(task), f)
}

pub fn asr_head<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, out: &EncoderOutput) -> Result<Var> {
    let w = s.param("asr.agg")?;
    let f = decoders::weighted_sum(&mut s.g, &out.features, w)?;
    decoders::asr_forward(s, &cfg.asr, f)
}
