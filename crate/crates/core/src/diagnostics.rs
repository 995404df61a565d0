//! Built-in numerical checks: finite-difference gradients of the core
//! operators and the identity contract of freshly initialized conditioners.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckConfig, GradReport, Graph, Var};
use crate::conditioner::{self, ConditionerDims, ConditionerMode, ConditionerVars, Task};
use crate::decoders::{self, ClsDecoderConfig};
use crate::encoder::{self, EncoderMode, RunInput};
use crate::error::Result;
use crate::layers::{self, BlockDims};
use crate::losses;
use crate::model::{self, ModelConfig};
use crate::params::{rng_for, ParamStore, Scope};
use crate::tensor::Tensor;

pub fn random_tensor(seed: u64, label: &str, shape: Vec<usize>, std: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, label);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Replaces every stored tensor by Gaussian noise around its current value.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    for (name, t) in store.iter_mut() {
        let mut rng = rng_for(seed, &format!("perturb:{name}"));
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
        t.set_requires_grad(true);
    }
}

/// Gradient check over every tensor of `store` (in insertion order) plus
/// `inputs`, with the loss built through a scope bound to those tensors.
pub fn check_scope<Fun>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: Fun) -> Result<GradReport>
where
    Fun: Fn(&mut Scope<'_, f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone().with_requires_grad(true)).collect();
    tensors.extend(inputs.iter().map(|t| t.clone().with_requires_grad(true)));
    let empty = ParamStore::new();
    grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let mut s = Scope::new(&empty);
            s.g = std::mem::take(g);
            for (n, &v) in names.iter().zip(vars) {
                s.bind_var(n, v);
            }
            let out = f(&mut s, &vars[names.len()..]);
            *g = std::mem::take(&mut s.g);
            out
        },
        &tensors,
        cfg,
    )
}

/// Contracts `x` with a fixed random tensor so that every output entry
/// carries a distinct weight in the scalar loss.
fn project(g: &mut Graph<f64>, x: Var, label: &str) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(random_tensor(99, label, shape, 1.0));
    let y = g.mul(x, w)?;
    Ok(g.sum_all(y))
}

/// Finite-difference checks of the core differentiable operators.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradReport)>> {
    let cfg = GradCheckConfig::default();
    let empty = ParamStore::new();
    let mut out = vec![];
    let r = |l: &str, shape: Vec<usize>| random_tensor(seed, l, shape, 1.0);

    out.push((
        "matmul".to_string(),
        check_scope(&empty, &[r("a", vec![3, 4]), r("b", vec![4, 2])], &cfg, |s, v| {
            let y = s.g.matmul(v[0], v[1])?;
            project(&mut s.g, y, "matmul")
        })?,
    ));
    out.push((
        "layer_norm".to_string(),
        check_scope(&empty, &[r("x", vec![3, 5]), r("gain", vec![5]), r("bias", vec![5])], &cfg, |s, v| {
            let y = s.g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            project(&mut s.g, y, "ln")
        })?,
    ));
    out.push((
        "softmax".to_string(),
        check_scope(&empty, &[r("logits", vec![3, 4])], &cfg, |s, v| {
            let y = s.g.softmax(v[0], 1)?;
            project(&mut s.g, y, "softmax")
        })?,
    ));

    let dims = BlockDims {
        width: 8,
        heads: 2,
        ffn: 12,
    };
    let mut block = ParamStore::new();
    layers::init_block(&mut block, seed, "blk", dims);
    perturb(&mut block, seed, 0.1);
    out.push((
        "attention_block".to_string(),
        check_scope(&block, &[r("h", vec![4, 8])], &cfg, |s, v| {
            let y = layers::transformer_block(s, "blk", v[0], 2, None)?;
            project(&mut s.g, y, "block")
        })?,
    ));

    let cdims = ConditionerDims {
        channels: 6,
        cond_dim: 3,
        attn_hidden: 4,
    };
    let mut cond = ParamStore::new();
    conditioner::init_params(&mut cond, seed, "c", ConditionerMode::Tcac, cdims);
    perturb(&mut cond, seed, 0.5);
    out.push((
        "tcac_modulate".to_string(),
        check_scope(&cond, &[r("S", vec![5, 6]), r("z", vec![1, 3])], &cfg, |s, v| {
            let c = ConditionerVars::bind(s, "c", ConditionerMode::Tcac)?;
            let y = conditioner::modulate(&mut s.g, &c, v[0], v[1])?;
            project(&mut s.g, y, "tcac")
        })?,
    ));

    out.push((
        "attentive_stats_pool".to_string(),
        check_scope(&empty, &[r("h", vec![5, 3]), r("scores", vec![5, 3])], &cfg, |s, v| {
            let y = decoders::attentive_stats_pool(&mut s.g, v[0], v[1])?;
            project(&mut s.g, y, "pool")
        })?,
    ));

    for margin in [0.0, 0.3] {
        out.push((
            format!("aam_loss_m{margin}"),
            check_scope(&empty, &[r("e", vec![2, 4]), r("head", vec![5, 4])], &cfg, move |s, v| {
                let c = decoders::cosine_logits(&mut s.g, v[0], v[1])?;
                decoders::aam_loss(&mut s.g, c, &[1, 3], margin, 8.0)
            })?,
        ));
    }

    out.push((
        "ctc_loss".to_string(),
        check_scope(&empty, &[r("logits", vec![6, 4])], &cfg, |s, v| {
            let lp = s.g.log_softmax(v[0], 1)?;
            losses::ctc_loss(&mut s.g, lp, &[1, 2, 2])
        })?,
    ));
    Ok(out)
}

/// Freshly initialized CC and TCAC conditioners leave random inputs
/// unchanged, bit for bit, over `trials` draws.
pub fn conditioner_identity(seed: u64, trials: usize) -> Result<bool> {
    let dims = ConditionerDims {
        channels: 16,
        cond_dim: 8,
        attn_hidden: 4,
    };
    for mode in [ConditionerMode::Cc, ConditionerMode::Tcac] {
        let mut store = ParamStore::<f64>::new();
        conditioner::init_params(&mut store, seed, "c", mode, dims);
        for i in 0..trials {
            let s_in = random_tensor(seed, &format!("S{i}"), vec![1 + i % 7, 16], 3.0);
            let z_in = random_tensor(seed, &format!("z{i}"), vec![1, 8], 3.0);
            let mut sc = Scope::new(&store);
            let c = ConditionerVars::bind(&mut sc, "c", mode)?;
            let s = sc.g.constant(s_in.clone());
            let z = sc.g.constant(z_in);
            let y = conditioner::modulate(&mut sc.g, &c, s, z)?;
            if sc.g.value(y).data() != s_in.data() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// A conditioned single-pass encoder with identity adapters reproduces the
/// unconditioned encoder and decoders bit for bit.
pub fn encoder_identity(seed: u64, mode: ConditionerMode, utterances: usize) -> Result<bool> {
    let mut cfg = ModelConfig {
        lid: ClsDecoderConfig::lid(4),
        sv: ClsDecoderConfig::sv(5),
        ..Default::default()
    };
    cfg.encoder.mode = EncoderMode::CaSinglePass;
    cfg.encoder.lid_group = 2;
    cfg.encoder.sv_group = 4;
    cfg.conditioning.mode = mode;
    cfg.conditioning.tasks = vec![Task::Lid, Task::Sv];
    let store: ParamStore<f32> = model::init_model(&cfg, seed);
    let mut base = cfg.clone();
    base.encoder.mode = EncoderMode::FrozenBaseline;
    for i in 0..utterances {
        let frames: Tensor<f32> = random_tensor(seed, &format!("frames{i}"), vec![8 + i, cfg.encoder.input_dim], 1.0).cast();
        let run = |m: &ModelConfig| -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
            let mut s = Scope::new(&store);
            let mut out = encoder::encode(&mut s, m, &RunInput::new(&frames))?;
            let asr = model::asr_head(&mut s, m, &out)?;
            let lid = model::lid_head(&mut s, m, &mut out)?;
            let sv = model::sv_head(&mut s, m, &mut out)?;
            Ok((
                s.g.value(asr).data().to_vec(),
                s.g.value(lid.posteriors).data().to_vec(),
                s.g.value(sv.embedding).data().to_vec(),
            ))
        };
        if run(&cfg)? != run(&base)? {
            return Ok(false);
        }
    }
    Ok(true)
}
