//! Transformer encoder with per-layer conditioners and the hierarchical and
//! dual-pass conditioning schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioner::{
    self, apply_modulation, compose_conditions, modulation, ConditionProjection, ConditionerVars,
    ConditioningFeature, LidEvidence, Modulation, Provenance, Task,
};
use crate::decoders::ClsOutput;
use crate::error::{Error, Result};
use crate::layers::{self, BlockDims};
use crate::model::{self, conditioner_prefix, ModelConfig};
use crate::params::{init, Block, ParamStore, Scope};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    FrozenBaseline,
    CaSinglePass,
    CaDualPass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Width C0 of the input frames.
    pub input_dim: usize,
    pub lid_group: usize,
    pub sv_group: usize,
    pub mode: EncoderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            hidden: 64,
            heads: 4,
            ffn: 128,
            input_dim: 16,
            lid_group: 3,
            sv_group: 6,
            mode: EncoderMode::FrozenBaseline,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.lid_group == 0 || self.sv_group == 0 {
            return Err(Error::Config("group sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            width: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    pub fn group(&self, task: Task) -> usize {
        match task {
            Task::Lid => self.lid_group,
            Task::Sv => self.sv_group,
        }
    }

    /// Closed-form size of the frozen encoder.
    pub fn param_count(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.num_layers * self.block_dims().param_count()
    }
}

/// Layers (1-based) after which a task's condition is re-estimated:
/// `{g·k : k ≥ 1, g·k ≤ L}`.
pub fn boundaries(group: usize, num_layers: usize) -> Vec<usize> {
    if group == 0 {
        return vec![];
    }
    (1..=num_layers / group).map(|k| k * group).collect()
}

pub fn init_encoder<F: Real>(store: &mut ParamStore<F>, seed: u64, cfg: &EncoderConfig) {
    init::linear(store, seed, "encoder.in", cfg.hidden, cfg.input_dim);
    for l in 0..cfg.num_layers {
        layers::init_block(store, seed, &format!("encoder.layer{l}"), cfg.block_dims());
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub encoder_passes: usize,
    pub lid_decodes: usize,
    pub sv_decodes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub task: Task,
    /// 1-based layer after which the estimate was made.
    pub layer: usize,
    pub feature: ConditioningFeature,
}

/// Per-utterance encoder input.
#[derive(Clone, Copy, Debug)]
pub struct RunInput<'a, F: Real> {
    /// `[T, C0]` frames.
    pub frames: &'a Tensor<F>,
    /// Reference language, needed by ground-truth conditioning.
    pub language: Option<usize>,
    /// Conditions replaced by the identity for this utterance `[lid, sv]`.
    pub dropped: [bool; 2],
    /// Raw hidden states `h_0..h_k` of an unconditioned pass with the current
    /// (frozen) encoder weights. Used in place of recomputation.
    pub cache: Option<&'a [Tensor<F>]>,
}

impl<'a, F: Real> RunInput<'a, F> {
    pub fn new(frames: &'a Tensor<F>) -> Self {
        RunInput {
            frames,
            language: None,
            dropped: [false; 2],
            cache: None,
        }
    }

    fn is_dropped(&self, task: Task) -> bool {
        self.dropped[task as usize]
    }
}

pub struct EncoderOutput {
    /// Raw residual stream `h_0..h_L`.
    pub hidden: Vec<Var>,
    /// Normalized layer features fed to the decoders.
    pub features: Vec<Var>,
    /// Final LID output when the schedule already produced it.
    pub lid: Option<ClsOutput>,
    pub estimates: Vec<Estimate>,
    pub stats: RunStats,
}

/// Parameter-free layer normalization of a hidden state.
pub fn layer_feature<F: Real>(g: &mut Graph<F>, h: Var) -> Result<Var> {
    g.layer_norm(h, None, None, F::lit(layers::LN_EPS))
}

pub fn embed_input<F: Real>(s: &mut Scope<'_, F>, cfg: &EncoderConfig, frames: &Tensor<F>) -> Result<Var> {
    if frames.rank() != 2 || frames.cols() != cfg.input_dim {
        return Err(Error::Dim {
            op: "input frame width",
            expected: cfg.input_dim,
            actual: frames.shape().last().copied().unwrap_or(0),
        });
    }
    let x = s.g.constant(frames.clone());
    let h = layers::linear(s, "encoder.in", x)?;
    layers::add_positions(&mut s.g, h)
}

/// One encoder layer (1-based `layer`), optionally modulated.
pub fn forward_layer<F: Real>(
    s: &mut Scope<'_, F>,
    cfg: &EncoderConfig,
    layer: usize,
    h: Var,
    modulation: Option<&Modulation>,
) -> Result<Var> {
    layers::transformer_block(s, &format!("encoder.layer{}", layer - 1), h, cfg.heads, modulation)
}

/// Unconditioned hidden states `h_0..h_upto`, taken from the cache where it
/// reaches.
fn plain_pass<F: Real>(s: &mut Scope<'_, F>, cfg: &EncoderConfig, input: &RunInput<'_, F>, upto: usize) -> Result<Vec<Var>> {
    let cache = input.cache.unwrap_or(&[]);
    let mut hidden = Vec::with_capacity(upto + 1);
    for l in 0..=upto {
        let h = match cache.get(l) {
            Some(t) => s.g.constant(t.clone()),
            None if l == 0 => embed_input(s, cfg, input.frames)?,
            None => forward_layer(s, cfg, l, hidden[l - 1], None)?,
        };
        hidden.push(h);
    }
    Ok(hidden)
}

fn features_of<F: Real>(g: &mut Graph<F>, hidden: &[Var]) -> Result<Vec<Var>> {
    hidden.iter().map(|&h| layer_feature(g, h)).collect()
}

/// Unconditioned forward over all layers.
pub fn run_plain<F: Real>(s: &mut Scope<'_, F>, cfg: &EncoderConfig, input: &RunInput<'_, F>) -> Result<EncoderOutput> {
    let hidden = plain_pass(s, cfg, input, cfg.num_layers)?;
    let features = features_of(&mut s.g, &hidden)?;
    Ok(EncoderOutput {
        hidden,
        features,
        lid: None,
        estimates: vec![],
        stats: RunStats {
            encoder_passes: 1,
            ..Default::default()
        },
    })
}

fn check_decoders<F: Real>(s: &Scope<'_, F>, cfg: &ModelConfig) -> Result<()> {
    for &task in &cfg.conditioning.tasks {
        if !s.has(&format!("{}.head", task.key())) {
            return Err(Error::Config(format!("no {} decoder for a scheduled condition", task.key())));
        }
    }
    Ok(())
}

fn ground_truth_feature<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, language: Option<usize>) -> Result<ConditioningFeature> {
    let proj = ConditionProjection::bind(s, Task::Lid, Provenance::GroundTruth)?;
    let evidence = LidEvidence {
        true_label: language,
        ..Default::default()
    };
    conditioner::encode_condition(&mut s.g, Provenance::GroundTruth, &evidence, &proj, cfg.lid.num_classes)
}

/// Conditioning feature for `task` from a decoder output.
fn feature_from_output<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, task: Task, out: &ClsOutput) -> Result<ConditioningFeature> {
    let provenance = cfg.conditioning.provenance(task);
    let proj = ConditionProjection::bind(s, task, provenance)?;
    match task {
        Task::Lid => {
            let evidence = LidEvidence {
                posteriors: Some(out.posteriors),
                embedding: Some(out.embedding),
                true_label: None,
            };
            conditioner::encode_condition(&mut s.g, provenance, &evidence, &proj, cfg.lid.num_classes)
        }
        Task::Sv => {
            let (w, b) = proj.embed.ok_or(Error::MissingField("embedding projection"))?;
            let z = conditioner::project_embedding(&mut s.g, w, b, out.embedding, F::lit(conditioner::LN_EPS))?;
            Ok(ConditioningFeature {
                z,
                task: Task::Sv,
                provenance,
            })
        }
    }
}

/// Estimates a task's condition from the layer features seen so far.
fn estimate<F: Real>(
    s: &mut Scope<'_, F>,
    cfg: &ModelConfig,
    task: Task,
    features: &[Var],
    input: &RunInput<'_, F>,
    stats: &mut RunStats,
) -> Result<ConditioningFeature> {
    let mut f = if task == Task::Lid && cfg.conditioning.lid_provenance == Provenance::GroundTruth {
        ground_truth_feature(s, cfg, input.language)?
    } else {
        let out = model::cls_head(s, cfg, task, features)?;
        match task {
            Task::Lid => stats.lid_decodes += 1,
            Task::Sv => stats.sv_decodes += 1,
        }
        feature_from_output(s, cfg, task, &out)?
    };
    if cfg.conditioning.detach_intermediate {
        f.z = s.g.detach(f.z);
    }
    Ok(f)
}

/// Runs layer `layer` with the composed modulation of the active conditions.
fn conditioned_layer<F: Real>(
    s: &mut Scope<'_, F>,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    active: &[Option<Var>; 2],
) -> Result<Var> {
    if active.iter().all(Option::is_none) {
        return forward_layer(s, &cfg.encoder, layer, h, None);
    }
    let prefix = format!("encoder.layer{}", layer - 1);
    let a = layers::attention_sublayer(s, &prefix, h, cfg.encoder.heads)?;
    let mut total: Option<Modulation> = None;
    for task in [Task::Lid, Task::Sv] {
        let Some(z) = active[task as usize] else { continue };
        let vars = ConditionerVars::bind(s, &conditioner_prefix(task, layer - 1), cfg.conditioning.mode)?;
        let m = modulation(&mut s.g, &vars, a, z)?;
        total = Some(match total {
            Some(prev) => compose_conditions(&mut s.g, &prev, &m)?,
            None => m,
        });
    }
    let a = apply_modulation(&mut s.g, a, &total.expect("at least one active condition"))?;
    layers::finish_block(s, &prefix, h, a)
}

/// Hierarchical self-conditioning: after every LID (SV) group boundary the
/// condition is re-estimated from all layer features so far and modulates
/// the following layers. Layers before the first boundary run unconditioned,
/// and the estimate at the last layer only feeds the final heads.
pub fn run_hierarchical<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, input: &RunInput<'_, F>) -> Result<EncoderOutput> {
    check_decoders(s, cfg)?;
    let e = &cfg.encoder;
    let n = e.num_layers;
    let scheduled = |task: Task, l: usize| {
        l < n && cfg.conditioning.conditions(task) && !input.is_dropped(task) && l % e.group(task) == 0
    };
    let first = (1..n)
        .find(|&l| scheduled(Task::Lid, l) || scheduled(Task::Sv, l))
        .unwrap_or(n);
    let mut hidden = plain_pass(s, e, input, first)?;
    let mut features = features_of(&mut s.g, &hidden)?;
    let mut active: [Option<Var>; 2] = [None, None];
    let mut out = EncoderOutput {
        hidden: vec![],
        features: vec![],
        lid: None,
        estimates: vec![],
        stats: RunStats {
            encoder_passes: 1,
            ..Default::default()
        },
    };
    for l in 1..=n {
        if l > first {
            let h = conditioned_layer(s, cfg, l, hidden[l - 1], &active)?;
            hidden.push(h);
            features.push(layer_feature(&mut s.g, h)?);
        }
        for task in [Task::Lid, Task::Sv] {
            if scheduled(task, l) {
                let f = estimate(s, cfg, task, &features[..=l], input, &mut out.stats)?;
                active[task as usize] = Some(f.z);
                out.estimates.push(Estimate {
                    task,
                    layer: l,
                    feature: f,
                });
            }
        }
    }
    out.hidden = hidden;
    out.features = features;
    Ok(out)
}

/// Dual-pass conditioning: an unconditioned pass and one LID decode yield a
/// single condition, which then modulates every layer of a second pass. With
/// ground-truth conditioning the first pass is skipped.
pub fn run_dual<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, input: &RunInput<'_, F>) -> Result<EncoderOutput> {
    if !cfg.conditioning.conditions(Task::Lid) {
        return Err(Error::Config("dual-pass conditioning needs the LID condition".into()));
    }
    check_decoders(s, cfg)?;
    let e = &cfg.encoder;
    let mut stats = RunStats::default();
    let mut estimates = vec![];
    let (first_pass, lid, feature) = if cfg.conditioning.lid_provenance == Provenance::GroundTruth {
        (None, None, ground_truth_feature(s, cfg, input.language)?)
    } else {
        let hidden = plain_pass(s, e, input, e.num_layers)?;
        let features = features_of(&mut s.g, &hidden)?;
        stats.encoder_passes += 1;
        let lid = model::cls_head(s, cfg, Task::Lid, &features)?;
        stats.lid_decodes += 1;
        let f = feature_from_output(s, cfg, Task::Lid, &lid)?;
        (Some((hidden, features)), Some(lid), f)
    };
    if input.is_dropped(Task::Lid) {
        if let Some((hidden, features)) = first_pass {
            return Ok(EncoderOutput {
                hidden,
                features,
                lid,
                estimates,
                stats,
            });
        }
        let mut out = run_plain(s, e, input)?;
        out.lid = lid;
        return Ok(out);
    }
    let mut z = feature.z;
    if cfg.conditioning.detach_intermediate {
        z = s.g.detach(z);
    }
    estimates.push(Estimate {
        task: Task::Lid,
        layer: 0,
        feature: ConditioningFeature { z, ..feature },
    });
    let active = [Some(z), None];
    let mut hidden = plain_pass(s, e, input, 0)?;
    for l in 1..=e.num_layers {
        let h = conditioned_layer(s, cfg, l, hidden[l - 1], &active)?;
        hidden.push(h);
    }
    stats.encoder_passes += 1;
    let features = features_of(&mut s.g, &hidden)?;
    Ok(EncoderOutput {
        hidden,
        features,
        lid,
        estimates,
        stats,
    })
}

/// Dispatches on the configured encoder mode.
pub fn encode<F: Real>(s: &mut Scope<'_, F>, cfg: &ModelConfig, input: &RunInput<'_, F>) -> Result<EncoderOutput> {
    match cfg.encoder.mode {
        EncoderMode::FrozenBaseline => run_plain(s, &cfg.encoder, input),
        EncoderMode::CaSinglePass => run_hierarchical(s, cfg, input),
        EncoderMode::CaDualPass => run_dual(s, cfg, input),
    }
}

/// Raw unconditioned hidden states, suitable as a [`RunInput::cache`].
pub fn hidden_states<F: Real>(store: &ParamStore<F>, cfg: &EncoderConfig, frames: &Tensor<F>, upto: usize) -> Result<Vec<Tensor<F>>> {
    let mut s = Scope::new(store);
    let input = RunInput::new(frames);
    let hidden = plain_pass(&mut s, cfg, &input, upto.min(cfg.num_layers))?;
    Ok(hidden.into_iter().map(|h| s.g.value(h).clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub block: Block,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub blocks: Vec<BlockCount>,
    pub total: usize,
    pub trainable: usize,
    pub encoder_params: usize,
    pub encoder_trainable: usize,
    /// Conditioners, condition projections and decoder feature projections
    /// of the conditioned tasks.
    pub adapter_params: usize,
    /// The same quantity from the closed-form expression.
    pub adapter_params_expected: usize,
    /// `adapter_params / encoder_params`.
    pub ratio: f64,
}

/// Frozen versus trainable parameter counts by block, and the size of the
/// adaptation blocks relative to the encoder.
pub fn trainable_parameter_report<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig) -> ParamReport {
    let blocks: Vec<BlockCount> = Block::ALL
        .iter()
        .map(|&b| BlockCount {
            block: b,
            total: store.count(|n, _| Block::of(n) == b),
            trainable: store.count(|n, t| Block::of(n) == b && t.requires_grad()),
        })
        .filter(|c| c.total > 0)
        .collect();
    let conditioned = |b: Block| match b {
        Block::LidConditioner | Block::LidConditionProjection | Block::LidFeat => cfg.conditioning.conditions(Task::Lid),
        Block::SvConditioner | Block::SvConditionProjection | Block::SvFeat => cfg.conditioning.conditions(Task::Sv),
        _ => false,
    };
    let adapter_params = store.count(|n, _| conditioned(Block::of(n)));
    let e = &cfg.encoder;
    let c = &cfg.conditioning;
    let adapter_params_expected: usize = c
        .tasks
        .iter()
        .map(|&task| {
            let dec = cfg.cls(task);
            let r = c.cond_dim;
            let proj_in = if c.provenance(task).uses_labels() { dec.num_classes } else { dec.embed_dim };
            e.num_layers * c.dims(e.hidden).param_count(c.mode)
                + (r * proj_in + r)
                + (dec.proj_width * e.hidden + dec.proj_width)
                + (e.num_layers + 1)
        })
        .sum();
    let encoder_params = store.count(|n, _| Block::of(n) == Block::Encoder);
    ParamReport {
        total: store.count(|_, _| true),
        trainable: store.trainable_count(),
        encoder_trainable: store.count(|n, t| Block::of(n) == Block::Encoder && t.requires_grad()),
        blocks,
        encoder_params,
        adapter_params,
        adapter_params_expected,
        ratio: adapter_params as f64 / encoder_params.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn boundary_sets() {
        assert_eq!(boundaries(3, 6), vec![3, 6]);
        assert_eq!(boundaries(6, 6), vec![6]);
        assert_eq!(boundaries(4, 6), vec![4]);
        assert_eq!(boundaries(7, 6), Vec::<usize>::new());
    }

    #[test]
    fn default_encoder_size() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.param_count(), 201_920);
        let store: ParamStore<f32> = init_model(&ModelConfig::default(), 1);
        assert_eq!(store.count(|n, _| Block::of(n) == Block::Encoder), 201_920);
    }

    #[test]
    fn sv_only_partial_schedule_is_lid_only() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.mode = EncoderMode::CaSinglePass;
        cfg.conditioning.tasks = vec![Task::Lid, Task::Sv];
        cfg.encoder.num_layers = 6;
        let store: ParamStore<f64> = init_model(&cfg, 2);
        let frames: Tensor<f64> = init::normal(4, "frames", vec![6, 16], 1.0);
        let mut s = Scope::new(&store);
        let out = run_hierarchical(&mut s, &cfg, &RunInput::new(&frames)).unwrap();
        let layers: Vec<(Task, usize)> = out.estimates.iter().map(|e| (e.task, e.layer)).collect();
        assert_eq!(layers, vec![(Task::Lid, 3)]);
    }
}
