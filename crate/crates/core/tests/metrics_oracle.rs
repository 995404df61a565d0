use casslr::metrics::{eer, min_dcf, DcfParams, ScoreSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Miss and false-alarm rates at every threshold of the sweep, counted
/// directly. Thresholds are the sorted distinct scores followed by +∞.
fn sweep(s: &ScoreSet) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = s.target.iter().chain(&s.nontarget).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&th| {
            let miss = s.target.iter().filter(|&&x| x < th).count() as f64 / s.target.len() as f64;
            let fa = s.nontarget.iter().filter(|&&x| x >= th).count() as f64 / s.nontarget.len() as f64;
            (miss, fa)
        })
        .collect()
}

fn oracle_eer(s: &ScoreSet) -> f64 {
    let pts = sweep(s);
    for i in 0..pts.len() {
        let (m1, f1) = pts[i];
        if m1 >= f1 {
            if i == 0 {
                return m1;
            }
            let (m0, f0) = pts[i - 1];
            // Intersection of the segment with the line miss = fa.
            let d0 = f0 - m0;
            let d1 = f1 - m1;
            let t = d0 / (d0 - d1);
            return m0 + t * (m1 - m0);
        }
    }
    unreachable!("the +inf threshold misses every target")
}

fn oracle_dcf(s: &ScoreSet, p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    sweep(s)
        .into_iter()
        .map(|(m, f)| (p * m + (1.0 - p) * f) / norm)
        .fold(f64::INFINITY, f64::min)
}

fn random_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let nt = rng.random_range(1..=50);
    let nn = rng.random_range(1..=50);
    let coarse = rng.random_bool(0.3);
    let mut draw = |shift: f64| {
        let x: f64 = rng.random::<f64>() * 2.0 - 1.0 + shift;
        if coarse {
            (x * 5.0).round() / 5.0
        } else {
            x
        }
    };
    ScoreSet {
        target: (0..nt).map(|_| draw(0.4)).collect(),
        nontarget: (0..nn).map(|_| draw(-0.2)).collect(),
    }
}

fn transformed(s: &ScoreSet, f: impl Fn(f64) -> f64) -> ScoreSet {
    ScoreSet {
        target: s.target.iter().map(|&x| f(x)).collect(),
        nontarget: s.nontarget.iter().map(|&x| f(x)).collect(),
    }
}

#[test]
fn eer_and_dcf_match_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DcfParams::default();
    for _ in 0..200 {
        let s = random_set(&mut rng);
        let e = eer(&s).unwrap();
        let d = min_dcf(&s, p).unwrap();
        assert!((e - oracle_eer(&s)).abs() <= 1e-12, "{s:?}");
        assert!((d - oracle_dcf(&s, 0.05)).abs() <= 1e-12, "{s:?}");
        for f in [|x: f64| 3.0 * x + 1.0, |x: f64| x.exp(), |x: f64| x * x * x] {
            let t = transformed(&s, f);
            assert!((eer(&t).unwrap() - e).abs() <= 1e-12);
            assert!((min_dcf(&t, p).unwrap() - d).abs() <= 1e-12);
        }
    }
}

#[test]
fn perfectly_separated_scores_have_zero_eer() {
    let s = ScoreSet {
        target: vec![0.9, 0.8],
        nontarget: vec![0.1, 0.2, 0.3],
    };
    assert_eq!(eer(&s).unwrap(), 0.0);
    assert_eq!(min_dcf(&s, DcfParams::default()).unwrap(), 0.0);
}

#[test]
fn reversed_scores_have_unit_eer() {
    let s = ScoreSet {
        target: vec![0.1, 0.2],
        nontarget: vec![0.8, 0.9],
    };
    assert_eq!(eer(&s).unwrap(), 1.0);
}

#[test]
fn empty_sides_are_rejected() {
    let s = ScoreSet {
        target: vec![],
        nontarget: vec![0.1],
    };
    assert!(eer(&s).is_err());
    assert!(min_dcf(&s, DcfParams::default()).is_err());
}

proptest! {
    #[test]
    fn eer_lies_in_unit_interval(t in prop::collection::vec(-5.0f64..5.0, 1..30), n in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let s = ScoreSet { target: t, nontarget: n };
        let e = eer(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let d = min_dcf(&s, DcfParams::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }
}
