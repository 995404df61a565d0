//! Central-difference gradient verification in 64-bit.

use serde::Serialize;

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Below this magnitude the relative error is measured against the floor
    /// instead of the (vanishing) gradient.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub param: usize,
    pub index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub status: EntryStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn checked(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status != EntryStatus::Skipped)
            .count()
    }
}

/// Compares analytic gradients of the scalar `f` against central differences.
///
/// `f` receives the graph and one leaf per entry of `params` (in order).
/// Parameters with `requires_grad == false` are reported as skipped.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape("grad_check output", g.shape(out), &[1]));
    }
    let grads = g.backward(out)?;

    for (pi, p) in params.iter().enumerate() {
        if let (true, Some(a)) = (p.requires_grad(), grads.get(vars[pi])) {
            if let Some(index) = a.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { param: pi, index });
            }
        }
    }

    let mut entries = Vec::new();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            entries.push(GradEntry {
                param: pi,
                index: None,
                analytic: 0.0,
                numeric: 0.0,
                rel_err: 0.0,
                status: EntryStatus::Skipped,
            });
            continue;
        }
        let analytic_all = grads.get(vars[pi]);
        let n = p.numel();
        let stride = cfg.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for idx in (0..n).step_by(stride) {
            let analytic = analytic_all.map_or(0.0, |a| a[idx]);
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + cfg.h;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - cfg.h;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite { param: pi, index: idx });
            }
            let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
            let rel_err = (analytic - numeric).abs() / denom;
            entries.push(GradEntry {
                param: pi,
                index: Some(idx),
                analytic,
                numeric,
                rel_err,
                status: if rel_err <= cfg.tol {
                    EntryStatus::Pass
                } else {
                    EntryStatus::Fail
                },
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let passed = entries.iter().all(|e| e.status != EntryStatus::Fail);
    Ok(GradReport {
        entries,
        max_rel_err,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap().with_requires_grad(true);
        let report = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum_all(s))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        let e = &report.entries[0];
        assert!((e.analytic - 6.0).abs() < 1e-12);
        assert!((e.numeric - 6.0).abs() < 1e-6);
        assert!(report.passed);
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap().with_requires_grad(true);
        let frozen = Tensor::from_f64(vec![1], &[2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                Ok(g.sum_all(m))
            },
            &[x, frozen],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.entries[1].status, EntryStatus::Skipped);
        assert_eq!(report.checked(), 1);
    }

    #[test]
    fn non_finite_reports_offending_parameter() {
        let x = Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap().with_requires_grad(true);
        let err = grad_check(
            |g, v| {
                let l = g.sqrt(v[0]);
                Ok(g.sum_all(l))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { param: 0, index: 1 }));
    }
}
