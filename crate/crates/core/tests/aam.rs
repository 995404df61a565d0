use casslr::autodiff::Graph;
use casslr::decoders::{aam_loss, cosine_logits};
use casslr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cosines(e: &[f64], head: &[Vec<f64>]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    head.iter()
        .map(|w| e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(w)))
        .collect()
}

/// Cross-entropy of the true class under `softmax(logits)`.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

struct Instance {
    e: Vec<f64>,
    head: Vec<Vec<f64>>,
    label: usize,
    scale: f64,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.random_range(2..8);
    let k = rng.random_range(2..10);
    let mut v = || (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<f64>>();
    let e = v();
    let head = (0..k).map(|_| v()).collect();
    Instance {
        e,
        head,
        label: rng.random_range(0..k),
        scale: rng.random_range(1.0..32.0),
    }
}

fn graph_loss(inst: &Instance, margin: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::new(vec![1, inst.e.len()], inst.e.clone()).unwrap());
    let flat: Vec<f64> = inst.head.iter().flatten().copied().collect();
    let head = g.constant(Tensor::new(vec![inst.head.len(), inst.e.len()], flat).unwrap());
    let c = cosine_logits(&mut g, e, head).unwrap();
    let loss = aam_loss(&mut g, c, &[inst.label], margin, inst.scale).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn zero_margin_is_scaled_cosine_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let logits: Vec<f64> = cosines(&inst.e, &inst.head).iter().map(|c| inst.scale * c).collect();
        let want = cross_entropy(&logits, inst.label);
        let got = graph_loss(&inst, 0.0);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn margin_shifts_the_true_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = 0.3f64;
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let mut logits: Vec<f64> = cosines(&inst.e, &inst.head);
        let theta = logits[inst.label].clamp(-1.0, 1.0).acos();
        logits[inst.label] = (theta + m).cos();
        let logits: Vec<f64> = logits.iter().map(|c| inst.scale * c).collect();
        let want = cross_entropy(&logits, inst.label);
        let got = graph_loss(&inst, m);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        if theta + m <= std::f64::consts::PI {
            assert!(got >= graph_loss(&inst, 0.0) - 1e-12);
        }
    }
}
