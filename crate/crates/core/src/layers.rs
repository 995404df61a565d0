//! Building blocks shared by the encoder and decoders. All activations are
//! `[T, C]`; weights follow the `[out, in]` convention.

use crate::autodiff::{Graph, Var};
use crate::conditioner::{apply_modulation, Modulation};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore, Scope};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn linear<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    let y = s.g.matmul_nt(x, w)?;
    s.g.add(y, b)
}

/// 1-D convolution over time with weight `[out, kernel·in]`.
pub fn conv1d<F: Real>(
    s: &mut Scope<'_, F>,
    prefix: &str,
    x: Var,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let cols = if kernel == 1 && stride == 1 && pad == 0 {
        x
    } else {
        s.g.unfold1d(x, kernel, stride, pad)?
    };
    linear(s, prefix, cols)
}

pub fn init_conv1d<F: Real>(store: &mut ParamStore<F>, seed: u64, prefix: &str, out: usize, inp: usize, kernel: usize) {
    init::linear(store, seed, prefix, out, kernel * inp);
}

pub fn layer_norm<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let gain = s.param(&format!("{prefix}.gain"))?;
    let bias = s.param(&format!("{prefix}.bias"))?;
    s.g.layer_norm(x, Some(gain), Some(bias), F::lit(LN_EPS))
}

/// Scaled dot-product self-attention with `heads` heads, `softmax(QKᵀ/√d)V`
/// per head followed by an output projection.
pub fn self_attention<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let width = s.g.shape(x)[1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    let q = linear(s, &format!("{prefix}.q"), x)?;
    let k = linear(s, &format!("{prefix}.k"), x)?;
    let v = linear(s, &format!("{prefix}.v"), x)?;
    let scale = F::lit(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_last(q, h * d, d)?;
        let kh = s.g.slice_last(k, h * d, d)?;
        let vh = s.g.slice_last(v, h * d, d)?;
        let scores = s.g.matmul_nt(qh, kh)?;
        let scores = s.g.scale(scores, scale);
        let att = s.g.softmax(scores, 1)?;
        outs.push(s.g.matmul(att, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { s.g.concat_last(&outs)? };
    linear(s, &format!("{prefix}.o"), cat)
}

pub fn feed_forward<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.ff1"), x)?;
    let h = s.g.relu(h);
    linear(s, &format!("{prefix}.ff2"), h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl BlockDims {
    pub fn param_count(&self) -> usize {
        let (c, f) = (self.width, self.ffn);
        4 * (c * c + c) + (f * c + f) + (c * f + c) + 4 * c
    }
}

pub fn init_block<F: Real>(store: &mut ParamStore<F>, seed: u64, prefix: &str, dims: BlockDims) {
    let c = dims.width;
    init::layer_norm(store, &format!("{prefix}.ln1"), c);
    for p in ["q", "k", "v", "o"] {
        init::linear(store, seed, &format!("{prefix}.attn.{p}"), c, c);
    }
    init::layer_norm(store, &format!("{prefix}.ln2"), c);
    init::linear(store, seed, &format!("{prefix}.ff1"), dims.ffn, c);
    init::linear(store, seed, &format!("{prefix}.ff2"), c, dims.ffn);
}

/// Pre-norm transformer block. The optional modulation acts on the
/// attention sublayer output before its residual addition:
/// `h = x + M(Attn(LN₁ x))`, `y = h + FFN(LN₂ h)`.
pub fn transformer_block<F: Real>(
    s: &mut Scope<'_, F>,
    prefix: &str,
    x: Var,
    heads: usize,
    modulation: Option<&Modulation>,
) -> Result<Var> {
    let a = attention_sublayer(s, prefix, x, heads)?;
    let a = match modulation {
        Some(m) => apply_modulation(&mut s.g, a, m)?,
        None => a,
    };
    finish_block(s, prefix, x, a)
}

/// `Attn(LN₁ x)`, the hidden state a conditioner sees.
pub fn attention_sublayer<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(s, &format!("{prefix}.ln1"), x)?;
    self_attention(s, &format!("{prefix}.attn"), n, heads)
}

/// Residual add of the (possibly modulated) attention output and the FFN path.
pub fn finish_block<F: Real>(s: &mut Scope<'_, F>, prefix: &str, x: Var, attn: Var) -> Result<Var> {
    let h = s.g.add(x, attn)?;
    let n = layer_norm(s, &format!("{prefix}.ln2"), h)?;
    let f = feed_forward(s, prefix, n)?;
    s.g.add(h, f)
}

/// Sinusoidal position table `[t, width]`.
pub fn sinusoid<F: Real>(t: usize, width: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * width);
    for pos in 0..t {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            data.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![t, width], data).expect("non-empty table")
}

pub fn add_positions<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pe = g.constant(sinusoid(s[0], s[1]));
    g.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_store(dims: BlockDims) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_block(&mut store, 11, "b", dims);
        store
    }

    #[test]
    fn block_count_matches_store() {
        let dims = BlockDims {
            width: 64,
            heads: 4,
            ffn: 128,
        };
        let store = block_store(dims);
        assert_eq!(store.count(|_, _| true), dims.param_count());
        assert_eq!(dims.param_count(), 33_472);
    }

    #[test]
    fn zeroed_value_and_ffn_is_residual_identity() {
        let dims = BlockDims {
            width: 4,
            heads: 2,
            ffn: 8,
        };
        let mut store = block_store(dims);
        for name in ["b.attn.v.w", "b.attn.v.b", "b.ff2.w", "b.ff2.b"] {
            let t = store.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Scope::new(&store);
        let x0 = Tensor::from_f64(vec![3, 4], &[0.1, -0.4, 2.0, 1.0, 0.3, 0.3, -1.0, 0.0, 5.0, 1.5, -2.5, 0.7]).unwrap();
        let x = s.g.constant(x0.clone());
        let y = transformer_block(&mut s, "b", x, 2, None).unwrap();
        assert_eq!(s.g.value(y).data(), x0.data());
    }

    #[test]
    fn sinusoid_first_row() {
        let pe: Tensor<f64> = sinusoid(2, 4);
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at2(1, 2) - (0.01f64).sin()).abs() < 1e-15);
    }
}
