//! LID/SV classification decoders (simplified ECAPA) and the CTC ASR decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioner::Task;
use crate::error::{Error, Result};
use crate::layers::{self, BlockDims};
use crate::params::{init, ParamStore, Scope};
use crate::tensor::{Real, Tensor};

pub const VAR_FLOOR: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClsDecoderConfig {
    pub proj_width: usize,
    pub num_res_blocks: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub margin: f64,
    pub scale: f64,
}

impl Default for ClsDecoderConfig {
    fn default() -> Self {
        Self::lid(12)
    }
}

impl ClsDecoderConfig {
    pub fn lid(num_classes: usize) -> Self {
        ClsDecoderConfig {
            proj_width: 64,
            num_res_blocks: 1,
            embed_dim: 32,
            num_classes,
            margin: 0.0,
            scale: 16.0,
        }
    }

    pub fn sv(num_classes: usize) -> Self {
        ClsDecoderConfig {
            proj_width: 96,
            num_res_blocks: 3,
            embed_dim: 32,
            num_classes,
            margin: 0.3,
            scale: 16.0,
        }
    }

    fn pool_hidden(&self) -> usize {
        (self.proj_width / 4).max(1)
    }

    fn se_hidden(&self) -> usize {
        (self.proj_width / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, π/2)", self.margin)));
        }
        if self.num_classes == 0 || self.embed_dim == 0 || self.proj_width == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrDecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    /// Vocabulary size including the blank at index 0.
    pub vocab: usize,
}

impl Default for AsrDecoderConfig {
    fn default() -> Self {
        AsrDecoderConfig {
            width: 64,
            heads: 4,
            ffn: 128,
            layers: 2,
            vocab: 41,
        }
    }
}

pub const BLANK: usize = 0;

/// Layer-aggregation weights for a decoder consuming `num_layers + 1` inputs.
pub fn init_aggregation<F: Real>(store: &mut ParamStore<F>, prefix: &str, num_layers: usize) {
    store.insert(format!("{prefix}.agg"), init::zeros(vec![num_layers + 1]));
}

/// `Σ softmax(w)_i · layers_i`. Only the first `layers.len()` entries of `w`
/// take part, so a decoder can aggregate the prefix of layers seen so far.
pub fn weighted_sum<F: Real>(g: &mut Graph<F>, layers: &[Var], w: Var) -> Result<Var> {
    let n = g.shape(w)[0];
    if layers.is_empty() || layers.len() > n {
        return Err(Error::LengthMismatch(layers.len(), n));
    }
    let first = g.shape(layers[0]).to_vec();
    for &l in &layers[1..] {
        if g.shape(l) != first.as_slice() {
            return Err(Error::shape("weighted_sum", &first, g.shape(l)));
        }
    }
    let w = if layers.len() < n { g.slice_last(w, 0, layers.len())? } else { w };
    let p = g.softmax(w, 0)?;
    let mut acc: Option<Var> = None;
    for (i, &l) in layers.iter().enumerate() {
        let pi = g.slice_last(p, i, 1)?;
        let term = g.mul(l, pi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

pub fn init_cls<F: Real>(store: &mut ParamStore<F>, seed: u64, task: Task, cfg: &ClsDecoderConfig, in_width: usize, num_layers: usize) {
    let k = task.key();
    let p = cfg.proj_width;
    init_aggregation(store, k, num_layers);
    layers::init_conv1d(store, seed, &format!("{k}.proj"), p, in_width, 1);
    for i in 0..cfg.num_res_blocks {
        layers::init_conv1d(store, seed, &format!("{k}.block{i}.conv"), p, p, 3);
        init::linear(store, seed, &format!("{k}.block{i}.se1"), cfg.se_hidden(), p);
        init::linear(store, seed, &format!("{k}.block{i}.se2"), p, cfg.se_hidden());
    }
    init::linear(store, seed, &format!("{k}.pool.att1"), cfg.pool_hidden(), p);
    init::linear(store, seed, &format!("{k}.pool.att2"), p, cfg.pool_hidden());
    init::linear(store, seed, &format!("{k}.emb"), cfg.embed_dim, 2 * p);
    let name = format!("{k}.head");
    store.insert(name.clone(), init::fan_in(seed, &name, cfg.num_classes, cfg.embed_dim));
}

/// Channel-wise attentive statistics pooling: per channel, softmax-over-time
/// weights `a_{t,c}`, then `[μ; σ]` with `σ = sqrt(max(Σ a (h−μ)², floor))`.
pub fn attentive_stats_pool<F: Real>(g: &mut Graph<F>, h: Var, scores: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::EmptyInput("attentive_stats_pool"));
    }
    if g.shape(scores) != s.as_slice() {
        return Err(Error::shape("attentive_stats_pool", &s, g.shape(scores)));
    }
    let a = g.softmax(scores, 0)?;
    let ah = g.mul(a, h)?;
    let mu = g.sum_axis(ah, 0)?;
    let dev = g.sub(h, mu)?;
    let dev2 = g.square(dev);
    let adev = g.mul(a, dev2)?;
    let var = g.sum_axis(adev, 0)?;
    let var = g.clamp_min(var, F::lit(VAR_FLOOR));
    let sigma = g.sqrt(var);
    g.concat_last(&[mu, sigma])
}

#[derive(Clone, Copy, Debug)]
pub struct ClsOutput {
    /// `[1, E]` bottleneck embedding.
    pub embedding: Var,
    /// `[1, K]` cosine similarities to the class weights.
    pub cosine: Var,
    /// `[1, K]` softmax of the scaled cosines.
    pub posteriors: Var,
}

fn l2_normalize_rows<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let n = g.sum_axis(sq, 1)?;
    let n = g.shift(n, F::lit(NORM_EPS));
    let n = g.sqrt(n);
    g.div(x, n)
}

/// Decoder body up to the bottleneck embedding, on already-aggregated
/// features `[T, C]`.
pub fn cls_embed<F: Real>(s: &mut Scope<'_, F>, task: Task, cfg: &ClsDecoderConfig, feats: Var) -> Result<Var> {
    let k = task.key();
    let h = layers::conv1d(s, &format!("{k}.proj"), feats, 1, 1, 0)?;
    let mut h = s.g.relu(h);
    for i in 0..cfg.num_res_blocks {
        let y = layers::conv1d(s, &format!("{k}.block{i}.conv"), h, 3, 1, 1)?;
        let y = s.g.relu(y);
        let m = s.g.mean_axis(y, 0)?;
        let e = layers::linear(s, &format!("{k}.block{i}.se1"), m)?;
        let e = s.g.relu(e);
        let e = layers::linear(s, &format!("{k}.block{i}.se2"), e)?;
        let gate = s.g.sigmoid(e);
        let y = s.g.mul(y, gate)?;
        h = s.g.add(h, y)?;
    }
    let a = layers::linear(s, &format!("{k}.pool.att1"), h)?;
    let a = s.g.tanh(a);
    let scores = layers::linear(s, &format!("{k}.pool.att2"), a)?;
    let pooled = attentive_stats_pool(&mut s.g, h, scores)?;
    layers::linear(s, &format!("{k}.emb"), pooled)
}

/// Cosine similarity between the embedding and every class weight.
pub fn cosine_logits<F: Real>(g: &mut Graph<F>, e: Var, head: Var) -> Result<Var> {
    let en = l2_normalize_rows(g, e)?;
    let wn = l2_normalize_rows(g, head)?;
    g.matmul_nt(en, wn)
}

pub fn cls_forward<F: Real>(s: &mut Scope<'_, F>, task: Task, cfg: &ClsDecoderConfig, feats: Var) -> Result<ClsOutput> {
    let embedding = cls_embed(s, task, cfg, feats)?;
    let head = s.param(&format!("{}.head", task.key()))?;
    let cosine = cosine_logits(&mut s.g, embedding, head)?;
    let scaled = s.g.scale(cosine, F::lit(cfg.scale));
    let posteriors = s.g.softmax(scaled, 1)?;
    Ok(ClsOutput {
        embedding,
        cosine,
        posteriors,
    })
}

/// Additive angular margin softmax over a `[N, K]` cosine matrix, summed
/// over rows. The target logit becomes `s·cos(θ_y + m)`.
pub fn aam_loss<F: Real>(g: &mut Graph<F>, cosine: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
    let shape = g.shape(cosine).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("aam_loss", &shape, &[labels.len()]));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let logits = if margin == 0.0 {
        cosine
    } else {
        let c = g.pick(cosine, labels)?;
        let c2 = g.square(c);
        let one_minus = g.neg(c2);
        let one_minus = g.shift(one_minus, F::one());
        let one_minus = g.clamp_min(one_minus, F::lit(NORM_EPS));
        let sin = g.sqrt(one_minus);
        let a = g.scale(c, F::lit(margin.cos()));
        let b = g.scale(sin, F::lit(margin.sin()));
        let phi = g.sub(a, b)?;
        let delta = g.sub(phi, c)?;
        let delta = g.reshape(delta, vec![labels.len(), 1])?;
        let mut mask = vec![F::zero(); labels.len() * k];
        for (r, &l) in labels.iter().enumerate() {
            mask[r * k + l] = F::one();
        }
        let mask = g.constant(Tensor::new(shape.clone(), mask)?);
        let shift = g.mul(mask, delta)?;
        g.add(cosine, shift)?
    };
    let scaled = g.scale(logits, F::lit(scale));
    let lp = g.log_softmax(scaled, 1)?;
    let picked = g.pick(lp, labels)?;
    let total = g.sum_all(picked);
    Ok(g.neg(total))
}

pub fn init_asr<F: Real>(store: &mut ParamStore<F>, seed: u64, cfg: &AsrDecoderConfig, in_width: usize, num_layers: usize) {
    init_aggregation(store, "asr", num_layers);
    layers::init_conv1d(store, seed, "asr.down", cfg.width, in_width, 3);
    let dims = BlockDims {
        width: cfg.width,
        heads: cfg.heads,
        ffn: cfg.ffn,
    };
    for i in 0..cfg.layers {
        layers::init_block(store, seed, &format!("asr.layer{i}"), dims);
    }
    init::layer_norm(store, "asr.ln", cfg.width);
    init::linear(store, seed, "asr.out", cfg.vocab, cfg.width);
}

/// Stride-2 downsampling, transformer layers and a vocabulary projection.
/// Returns per-frame log-posteriors `[⌈T/2⌉, V]`.
pub fn asr_forward<F: Real>(s: &mut Scope<'_, F>, cfg: &AsrDecoderConfig, feats: Var) -> Result<Var> {
    let t = s.g.shape(feats)[0];
    if t < 2 {
        return Err(Error::SequenceTooShort(t, 2));
    }
    let h = layers::conv1d(s, "asr.down", feats, 3, 2, 1)?;
    let h = s.g.relu(h);
    let mut h = layers::add_positions(&mut s.g, h)?;
    for i in 0..cfg.layers {
        h = layers::transformer_block(s, &format!("asr.layer{i}"), h, cfg.heads, None)?;
    }
    let h = layers::layer_norm(s, "asr.ln", h)?;
    let logits = layers::linear(s, "asr.out", h)?;
    s.g.log_softmax(logits, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn weighted_sum_examples() {
        let mut g = Graph::<f64>::new();
        let layers: Vec<Var> = (0..3)
            .map(|i| g.constant(t(vec![2, 2], &[i as f64, 1.0, -(i as f64), 2.0 * i as f64])))
            .collect();
        let w = g.constant(t(vec![3], &[0.0, 40.0, 0.0]));
        let out = weighted_sum(&mut g, &layers, w).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(layers[1]).data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let w0 = g.constant(Tensor::zeros(vec![3]));
        let mean = weighted_sum(&mut g, &layers, w0).unwrap();
        assert_eq!(g.value(mean).data(), &[1.0, 1.0, -1.0, 2.0]);

        let same = vec![layers[2]; 3];
        let w = g.constant(t(vec![3], &[0.3, -2.0, 1.1]));
        let out = weighted_sum(&mut g, &same, w).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(layers[2]).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w2 = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(weighted_sum(&mut g, &layers, w2), Err(Error::LengthMismatch(3, 2))));
    }

    #[test]
    fn uniform_pool_is_mean_and_population_std() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(t(vec![4, 1], &[1.0, 2.0, 3.0, 6.0]));
        let scores = g.constant(Tensor::zeros(vec![4, 1]));
        let p = attentive_stats_pool(&mut g, h, scores).unwrap();
        let v = g.value(p).data();
        assert!((v[0] - 3.0).abs() < 1e-12);
        assert!((v[1] - 3.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_pool_hits_floor() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(t(vec![1, 2], &[0.7, -3.0]));
        let scores = g.constant(Tensor::zeros(vec![1, 2]));
        let p = attentive_stats_pool(&mut g, h, scores).unwrap();
        let v = g.value(p).data();
        assert_eq!(&v[..2], &[0.7, -3.0]);
        assert!((v[2] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn aam_closed_form() {
        let mut g = Graph::<f64>::new();
        let cos = g.constant(t(vec![1, 2], &[1.0, 0.0]));
        let loss = aam_loss(&mut g, cos, &[0], 0.3, 1.0).unwrap();
        let c = 0.3f64.cos();
        let expected = -(c.exp() / (c.exp() + 1.0)).ln();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn aam_label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let cos = g.constant(t(vec![1, 2], &[1.0, 0.0]));
        assert!(matches!(aam_loss(&mut g, cos, &[2], 0.0, 1.0), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn aam_margin_increases_loss() {
        let theta = 0.6f64;
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.2, 0.3] {
            let mut g = Graph::<f64>::new();
            let cos = g.constant(t(vec![1, 3], &[theta.cos(), 0.2, -0.1]));
            let loss = aam_loss(&mut g, cos, &[0], m, 8.0).unwrap();
            let v = g.value(loss).data()[0];
            assert!(v > prev);
            prev = v;
        }
    }

    fn asr_store(cfg: &AsrDecoderConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_asr(&mut store, 5, cfg, 8, 2);
        store
    }

    #[test]
    fn asr_output_length_and_normalization() {
        let cfg = AsrDecoderConfig {
            width: 8,
            heads: 2,
            ffn: 16,
            layers: 2,
            vocab: 5,
        };
        let store = asr_store(&cfg);
        for (t_in, t_out) in [(2, 1), (3, 2), (10, 5)] {
            let mut s = Scope::new(&store);
            let x = s.g.constant(init::normal(1, "x", vec![t_in, 8], 1.0));
            let lp = asr_forward(&mut s, &cfg, x).unwrap();
            assert_eq!(s.g.shape(lp), &[t_out, 5]);
            for r in 0..t_out {
                let z: f64 = s.g.value(lp).row_slice(r).iter().map(|v| v.exp()).sum();
                assert!((z - 1.0).abs() < 1e-6);
            }
        }
        let mut s = Scope::new(&store);
        let x = s.g.constant(Tensor::zeros(vec![1, 8]));
        assert!(matches!(asr_forward(&mut s, &cfg, x), Err(Error::SequenceTooShort(1, 2))));
    }

    #[test]
    fn cls_forward_shapes_and_posteriors() {
        for blocks in [0, 2] {
            let cfg = ClsDecoderConfig {
                proj_width: 8,
                num_res_blocks: blocks,
                embed_dim: 4,
                num_classes: 3,
                margin: 0.0,
                scale: 10.0,
            };
            let mut store = ParamStore::<f64>::new();
            init_cls(&mut store, 2, Task::Lid, &cfg, 6, 2);
            let x0: Tensor<f64> = init::normal(3, "x", vec![5, 6], 1.0);
            let run = || {
                let mut s = Scope::new(&store);
                let x = s.g.constant(x0.clone());
                let out = cls_forward(&mut s, Task::Lid, &cfg, x).unwrap();
                (s.g.value(out.embedding).clone(), s.g.value(out.posteriors).clone())
            };
            let (e1, p1) = run();
            let (e2, _) = run();
            assert_eq!(e1, e2);
            assert_eq!(e1.shape(), &[1, 4]);
            let total: f64 = p1.data().iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
