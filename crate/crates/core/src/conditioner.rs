//! Channel-wise (CC) and time-channel attention (TCAC) conditioners.
//!
//! A conditioner turns a conditioning feature `z ∈ R^R` into per-channel
//! scale `γ = W_γ z + b_γ` and bias `β = W_β z + b_β`. TCAC additionally
//! computes a per-frame weight `α_t = 1 + v_αᵀ relu(W_α [S_t; z] + b_α)` and
//! the hidden state is modulated as `S̃_{t,c} = α_t (γ_c S_{t,c} + β_c)`.
//! In CC mode `α_t ≡ 1`.
//!
//! Layout: hidden states are `[T, C]` (one row per frame), `z` is a `[1, R]`
//! row, `γ`/`β` are `[1, C]` rows and `α` is a `[T, 1]` column.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore, Scope};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionerMode {
    #[default]
    Cc,
    Tcac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lid,
    Sv,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::Lid => "lid",
            Task::Sv => "sv",
        }
    }
}

/// Where a conditioning feature comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    HardLabel,
    SoftLabel,
    #[default]
    Embedding,
}

impl Provenance {
    pub fn uses_labels(self) -> bool {
        !matches!(self, Provenance::Embedding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionerDims {
    /// Hidden width C of the host layer.
    pub channels: usize,
    /// Conditioning feature width R.
    pub cond_dim: usize,
    /// Attention hidden width C' (TCAC only).
    pub attn_hidden: usize,
}

impl ConditionerDims {
    pub fn param_count(&self, mode: ConditionerMode) -> usize {
        let (c, r, h) = (self.channels, self.cond_dim, self.attn_hidden);
        let cc = 2 * (c * r + c);
        match mode {
            ConditionerMode::Cc => cc,
            ConditionerMode::Tcac => cc + h * (c + r) + 2 * h,
        }
    }
}

/// Inserts identity-initialized conditioner blocks under `prefix`:
/// `W_γ = W_β = 0`, `b_γ = 1`, `b_β = 0`, `v_α = 0`. `W_α` is drawn at
/// random so that `v_α` receives gradient from the first step.
pub fn init_params<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    prefix: &str,
    mode: ConditionerMode,
    dims: ConditionerDims,
) {
    let ConditionerDims {
        channels: c,
        cond_dim: r,
        attn_hidden: h,
    } = dims;
    store.insert(format!("{prefix}.w_gamma"), init::zeros(vec![c, r]));
    store.insert(format!("{prefix}.b_gamma"), init::ones(vec![c]));
    store.insert(format!("{prefix}.w_beta"), init::zeros(vec![c, r]));
    store.insert(format!("{prefix}.b_beta"), init::zeros(vec![c]));
    if mode == ConditionerMode::Tcac {
        let name = format!("{prefix}.w_alpha");
        store.insert(name.clone(), init::fan_in(seed, &name, h, c + r));
        store.insert(format!("{prefix}.b_alpha"), init::zeros(vec![h]));
        store.insert(format!("{prefix}.v_alpha"), init::zeros(vec![h]));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub v_alpha: Var,
}

/// Graph handles of one conditioner's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConditionerVars {
    pub mode: ConditionerMode,
    pub w_gamma: Var,
    pub b_gamma: Var,
    pub w_beta: Var,
    pub b_beta: Var,
    pub attention: Option<AttentionVars>,
}

impl ConditionerVars {
    pub fn bind<F: Real>(scope: &mut Scope<'_, F>, prefix: &str, mode: ConditionerMode) -> Result<Self> {
        let attention = match mode {
            ConditionerMode::Cc => None,
            ConditionerMode::Tcac => Some(AttentionVars {
                w_alpha: scope.param(&format!("{prefix}.w_alpha"))?,
                b_alpha: scope.param(&format!("{prefix}.b_alpha"))?,
                v_alpha: scope.param(&format!("{prefix}.v_alpha"))?,
            }),
        };
        Ok(ConditionerVars {
            mode,
            w_gamma: scope.param(&format!("{prefix}.w_gamma"))?,
            b_gamma: scope.param(&format!("{prefix}.b_gamma"))?,
            w_beta: scope.param(&format!("{prefix}.w_beta"))?,
            b_beta: scope.param(&format!("{prefix}.b_beta"))?,
            attention,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConditioningFeature {
    /// `[1, R]`
    pub z: Var,
    pub task: Task,
    pub provenance: Provenance,
}

/// The (α, γ, β) triple applied to one hidden state. `alpha == None` means
/// `α ≡ 1`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub alpha: Option<Var>,
    pub gamma: Var,
    pub beta: Var,
}

fn cond_width<F: Real>(g: &Graph<F>, c: &ConditionerVars) -> usize {
    g.shape(c.w_gamma)[1]
}

/// `γ = W_γ z + b_γ`, `β = W_β z + b_β`, both `[1, C]`.
pub fn channel_affine<F: Real>(g: &mut Graph<F>, c: &ConditionerVars, z: Var) -> Result<(Var, Var)> {
    let r = cond_width(g, c);
    let zs = g.shape(z);
    if zs.len() != 2 || zs[0] != 1 || zs[1] != r {
        return Err(Error::Dim {
            op: "conditioning feature width R",
            expected: r,
            actual: *zs.last().unwrap_or(&0),
        });
    }
    let gw = g.matmul_nt(z, c.w_gamma)?;
    let gamma = g.add(gw, c.b_gamma)?;
    let bw = g.matmul_nt(z, c.w_beta)?;
    let beta = g.add(bw, c.b_beta)?;
    Ok((gamma, beta))
}

/// Per-frame weights `α_t = 1 + v_αᵀ relu(W_α [S_t; z] + b_α)`, `[T, 1]`.
pub fn time_attention<F: Real>(g: &mut Graph<F>, c: &ConditionerVars, s: Var, z: Var) -> Result<Var> {
    let att = match (c.mode, c.attention) {
        (ConditionerMode::Tcac, Some(a)) => a,
        _ => return Err(Error::UnsupportedMode("cc")),
    };
    let channels = g.shape(c.w_gamma)[0];
    let r = cond_width(g, c);
    let ss = g.shape(s);
    if ss.len() != 2 || ss[1] != channels {
        return Err(Error::shape("time_attention", ss, &[channels]));
    }
    let w_s = g.slice_last(att.w_alpha, 0, channels)?;
    let w_z = g.slice_last(att.w_alpha, channels, r)?;
    let hs = g.matmul_nt(s, w_s)?;
    let hz = g.matmul_nt(z, w_z)?;
    let pre = g.add(hs, hz)?;
    let pre = g.add(pre, att.b_alpha)?;
    let h = g.relu(pre);
    let hidden = g.shape(att.v_alpha)[0];
    let v = g.reshape(att.v_alpha, vec![1, hidden])?;
    let a = g.matmul_nt(h, v)?;
    Ok(g.shift(a, F::one()))
}

pub fn modulation<F: Real>(g: &mut Graph<F>, c: &ConditionerVars, s: Var, z: Var) -> Result<Modulation> {
    let (gamma, beta) = channel_affine(g, c, z)?;
    let alpha = match c.mode {
        ConditionerMode::Cc => None,
        ConditionerMode::Tcac => Some(time_attention(g, c, s, z)?),
    };
    Ok(Modulation { alpha, gamma, beta })
}

/// `α_total = α_a ∘ α_b`, `γ_total = γ_a ∘ γ_b`, `β_total = β_a + β_b`.
pub fn compose_conditions<F: Real>(g: &mut Graph<F>, a: &Modulation, b: &Modulation) -> Result<Modulation> {
    if g.shape(a.gamma) != g.shape(b.gamma) {
        return Err(Error::shape("compose_conditions", g.shape(a.gamma), g.shape(b.gamma)));
    }
    let alpha = match (a.alpha, b.alpha) {
        (Some(x), Some(y)) => {
            if g.shape(x) != g.shape(y) {
                return Err(Error::shape("compose_conditions alpha", g.shape(x), g.shape(y)));
            }
            Some(g.mul(x, y)?)
        }
        (x, y) => x.or(y),
    };
    let gamma = g.mul(a.gamma, b.gamma)?;
    let beta = g.add(a.beta, b.beta)?;
    Ok(Modulation { alpha, gamma, beta })
}

/// `S̃ = α ∘ (γ ∘ S + β)` with broadcasting over frames and channels.
pub fn apply_modulation<F: Real>(g: &mut Graph<F>, s: Var, m: &Modulation) -> Result<Var> {
    let ss = g.shape(s);
    let c = g.shape(m.gamma).last().copied().unwrap_or(0);
    if ss.len() != 2 || ss[1] != c {
        return Err(Error::shape("modulate", ss, g.shape(m.gamma)));
    }
    let scaled = g.mul(s, m.gamma)?;
    let shifted = g.add(scaled, m.beta)?;
    match m.alpha {
        Some(a) => g.mul(shifted, a),
        None => Ok(shifted),
    }
}

pub fn modulate<F: Real>(g: &mut Graph<F>, c: &ConditionerVars, s: Var, z: Var) -> Result<Var> {
    let m = modulation(g, c, s, z)?;
    apply_modulation(g, s, &m)
}

pub const LN_EPS: f64 = 1e-5;

/// `z = LayerNorm(W e + b)` without affine; `W: [R, E]`, `e: [1, E]`.
pub fn project_embedding<F: Real>(g: &mut Graph<F>, w: Var, b: Var, e: Var, eps: F) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let es = g.shape(e);
    if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] {
        return Err(Error::Dim {
            op: "embedding width E",
            expected: ws.get(1).copied().unwrap_or(0),
            actual: es.last().copied().unwrap_or(0),
        });
    }
    let lin = g.matmul_nt(e, w)?;
    let lin = g.add(lin, b)?;
    g.layer_norm(lin, None, None, eps)
}

/// Evidence available from an LID decoder (or the reference label).
#[derive(Clone, Copy, Debug, Default)]
pub struct LidEvidence {
    /// `[1, K]` posterior probabilities.
    pub posteriors: Option<Var>,
    /// `[1, E]` bottleneck embedding.
    pub embedding: Option<Var>,
    pub true_label: Option<usize>,
}

/// Projection weights that map evidence to `z`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConditionProjection {
    /// `(W [R, E], b [R])` for embeddings.
    pub embed: Option<(Var, Var)>,
    /// `(W [R, K], b [R])` for label distributions.
    pub label: Option<(Var, Var)>,
}

impl ConditionProjection {
    pub fn bind<F: Real>(scope: &mut Scope<'_, F>, task: Task, provenance: Provenance) -> Result<Self> {
        let k = task.key();
        if provenance.uses_labels() {
            Ok(ConditionProjection {
                embed: None,
                label: Some((
                    scope.param(&format!("zproj.{k}.label_w"))?,
                    scope.param(&format!("zproj.{k}.label_b"))?,
                )),
            })
        } else {
            Ok(ConditionProjection {
                embed: Some((
                    scope.param(&format!("zproj.{k}.w"))?,
                    scope.param(&format!("zproj.{k}.b"))?,
                )),
                label: None,
            })
        }
    }
}

pub fn init_projection<F: Real>(
    store: &mut ParamStore<F>,
    seed: u64,
    task: Task,
    provenance: Provenance,
    cond_dim: usize,
    embed_dim: usize,
    num_classes: usize,
) {
    let k = task.key();
    if provenance.uses_labels() {
        let name = format!("zproj.{k}.label_w");
        store.insert(name.clone(), init::fan_in(seed, &name, cond_dim, num_classes));
        store.insert(format!("zproj.{k}.label_b"), init::zeros(vec![cond_dim]));
    } else {
        let name = format!("zproj.{k}.w");
        store.insert(name.clone(), init::fan_in(seed, &name, cond_dim, embed_dim));
        store.insert(format!("zproj.{k}.b"), init::zeros(vec![cond_dim]));
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot<F: Real>(label: usize, classes: usize) -> Result<Tensor<F>> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut v = vec![F::zero(); classes];
    v[label] = F::one();
    Ok(Tensor::row(v))
}

/// Builds the conditioning feature for the LID task from the requested
/// evidence. Label-based provenances use the linear label projection
/// `z = W p + b`; embeddings go through [`project_embedding`].
pub fn encode_condition<F: Real>(
    g: &mut Graph<F>,
    provenance: Provenance,
    evidence: &LidEvidence,
    proj: &ConditionProjection,
    num_classes: usize,
) -> Result<ConditioningFeature> {
    let label_proj = |g: &mut Graph<F>, p: Var| -> Result<Var> {
        let (w, b) = proj.label.ok_or(Error::MissingField("label projection"))?;
        let lin = g.matmul_nt(p, w)?;
        g.add(lin, b)
    };
    let z = match provenance {
        Provenance::GroundTruth => {
            let label = evidence.true_label.ok_or(Error::MissingField("true language label"))?;
            let p = g.constant(one_hot(label, num_classes)?);
            label_proj(g, p)?
        }
        Provenance::HardLabel => {
            let post = evidence.posteriors.ok_or(Error::MissingField("posteriors"))?;
            let label = argmax(g.value(post).data());
            let p = g.constant(one_hot(label, num_classes)?);
            label_proj(g, p)?
        }
        Provenance::SoftLabel => {
            let post = evidence.posteriors.ok_or(Error::MissingField("posteriors"))?;
            label_proj(g, post)?
        }
        Provenance::Embedding => {
            let e = evidence.embedding.ok_or(Error::MissingField("bottleneck embedding"))?;
            let (w, b) = proj.embed.ok_or(Error::MissingField("embedding projection"))?;
            project_embedding(g, w, b, e, F::lit(LN_EPS))?
        }
    };
    Ok(ConditioningFeature {
        z,
        task: Task::Lid,
        provenance,
    })
}
