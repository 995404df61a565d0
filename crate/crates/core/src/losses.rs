//! CTC loss as a custom autodiff op, plus multitask loss assembly.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::decoders::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Blank-interleaved target `[∅, y₁, ∅, y₂, …, ∅]`.
fn expand(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Minimum number of frames that can emit `target`: one per token plus one
/// blank between each pair of repeated tokens.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    ext: Vec<usize>,
    /// `[T, S]` log forward variables, emission at `t` included.
    alpha: Vec<f64>,
    log_p: f64,
}

fn forward(lp: &[f64], t: usize, v: usize, target: &[usize]) -> Lattice {
    let ext = expand(target);
    let s = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t * s];
    alpha[0] = lp[ext[0]];
    if s > 1 {
        alpha[1] = lp[ext[1]];
    }
    for ti in 1..t {
        for si in 0..s {
            let mut a = alpha[(ti - 1) * s + si];
            if si >= 1 {
                a = log_add(a, alpha[(ti - 1) * s + si - 1]);
            }
            if si >= 2 && ext[si] != BLANK && ext[si] != ext[si - 2] {
                a = log_add(a, alpha[(ti - 1) * s + si - 2]);
            }
            alpha[ti * s + si] = a + lp[ti * v + ext[si]];
        }
    }
    let last = (t - 1) * s;
    let log_p = if s > 1 {
        log_add(alpha[last + s - 1], alpha[last + s - 2])
    } else {
        alpha[last]
    };
    Lattice { ext, alpha, log_p }
}

struct CtcOp {
    target: Vec<usize>,
}

impl<F: Real> CustomOp<F> for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad_out: &[F]) -> Vec<Option<Vec<F>>> {
        let x = inputs[0];
        let (t, v) = (x.rows(), x.cols());
        let lp: Vec<f64> = x.data().iter().map(|a| a.f64()).collect();
        let lat = forward(&lp, t, v, &self.target);
        let s = lat.ext.len();
        let mut beta = vec![f64::NEG_INFINITY; t * s];
        let last = (t - 1) * s;
        beta[last + s - 1] = lp[(t - 1) * v + lat.ext[s - 1]];
        if s > 1 {
            beta[last + s - 2] = lp[(t - 1) * v + lat.ext[s - 2]];
        }
        for ti in (0..t - 1).rev() {
            for si in 0..s {
                let mut b = beta[(ti + 1) * s + si];
                if si + 1 < s {
                    b = log_add(b, beta[(ti + 1) * s + si + 1]);
                }
                if si + 2 < s && lat.ext[si] != BLANK && lat.ext[si] != lat.ext[si + 2] {
                    b = log_add(b, beta[(ti + 1) * s + si + 2]);
                }
                beta[ti * s + si] = b + lp[ti * v + lat.ext[si]];
            }
        }
        // d(−log p)/d lp[t,k] = −Σ_{s: ext_s = k} α_t(s) β_t(s) / (p · y_t(k))
        let mut occ = vec![f64::NEG_INFINITY; t * v];
        for ti in 0..t {
            for si in 0..s {
                let k = lat.ext[si];
                let ab = lat.alpha[ti * s + si] + beta[ti * s + si];
                occ[ti * v + k] = log_add(occ[ti * v + k], ab);
            }
        }
        let go = grad_out[0].f64();
        let grad: Vec<F> = occ
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                if o == f64::NEG_INFINITY {
                    F::zero()
                } else {
                    F::lit(-go * (o - lp[i] - lat.log_p).exp())
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Negative log-likelihood of `target` under per-frame log-posteriors
/// `[T', V]`, summed over all blank-interleaved alignments.
pub fn ctc_loss<F: Real>(g: &mut Graph<F>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ctc_loss", &shape, &[0, 0]));
    }
    let (t, v) = (shape[0], shape[1]);
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= v) {
        return Err(Error::LabelOutOfRange { label: bad, classes: v });
    }
    let needed = min_frames(target);
    if needed > t {
        return Err(Error::InfeasibleAlignment { needed, frames: t });
    }
    let lp: Vec<f64> = g.value(log_probs).data().iter().map(|a| a.f64()).collect();
    let lat = forward(&lp, t, v, target);
    if !lat.log_p.is_finite() {
        return Err(Error::Numerical("ctc likelihood underflow".into()));
    }
    let value = Tensor::scalar(F::lit(-lat.log_p));
    Ok(g.custom(
        &[log_probs],
        value,
        Box::new(CtcOp {
            target: target.to_vec(),
        }),
    ))
}

/// Sum of the available per-task losses; absent tasks add nothing.
pub fn sum_losses<F: Real>(g: &mut Graph<F>, terms: &[Option<Var>], weights: &[f64]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (term, &w) in terms.iter().zip(weights) {
        if let Some(t) = *term {
            let t = if w == 1.0 { t } else { g.scale(t, F::lit(w)) };
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp_tensor(t: usize, rows: &[&[f64]]) -> Tensor<f64> {
        let v = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Tensor::from_f64(vec![t, v], &data).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(lp_tensor(1, &[&[0.3, 0.7]]));
        let l = ctc_loss(&mut g, x, &[1]).unwrap();
        assert!((g.value(l).data()[0] + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let (p1, p2) = ([0.2, 0.8], [0.6, 0.4]);
        let mut g = Graph::<f64>::new();
        let x = g.constant(lp_tensor(2, &[&p1, &p2]));
        let l = ctc_loss(&mut g, x, &[1]).unwrap();
        let expected = -(p1[1] * p2[1] + p1[1] * p2[0] + p1[0] * p2[1]).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_alignment_is_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(lp_tensor(2, &[&[0.5, 0.5], &[0.5, 0.5]]));
        let err = ctc_loss(&mut g, x, &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlignment { needed: 3, frames: 2 }));
        assert!(err.is_numerical());
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(lp_tensor(2, &[&[0.5, 0.5], &[0.5, 0.5]]));
        assert!(ctc_loss(&mut g, x, &[0]).is_err());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(lp_tensor(2, &[&[0.5, 0.5], &[0.25, 0.75]]));
        let l = ctc_loss(&mut g, x, &[]).unwrap();
        assert!((g.value(l).data()[0] + (0.5f64 * 0.25).ln()).abs() < 1e-12);
    }

    #[test]
    fn absent_terms_contribute_nothing() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let out = sum_losses(&mut g, &[None, Some(a), None], &[1.0, 1.0, 1.0]).unwrap().unwrap();
        assert_eq!(g.value(out).data(), &[2.0]);
        assert!(sum_losses(&mut g, &[None], &[1.0]).unwrap().is_none());
    }
}
