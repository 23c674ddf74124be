//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors so that coordinates whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A named set of parameter tensors checked together.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
    /// Frozen groups enter the graph without gradients and are not perturbed.
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Self {
            name: name.into(),
            tensors,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(model_fn: &F, groups: &[ParamGroup], want_grads: bool) -> Result<(f64, Vec<Vec<Tensor>>)>
where
    F: Fn(&mut Graph, &[Vec<Var>]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Vec<Var>> = groups
        .iter()
        .map(|g| g.tensors.iter().map(|t| graph.leaf(t.clone(), want_grads && !g.frozen)).collect())
        .collect();
    let loss = model_fn(&mut graph, &vars)?;
    let value = graph.value(loss).item();
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    let mut grads = graph.backward(loss)?;
    let out = groups
        .iter()
        .zip(&vars)
        .map(|(g, vs)| {
            g.tensors
                .iter()
                .zip(vs)
                .map(|(t, v)| grads.remove(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        })
        .collect();
    Ok((value, out))
}

/// Compares tape gradients of `model_fn` against central differences with
/// step `step` for every coordinate of every non-frozen group.
pub fn grad_check<F>(model_fn: F, groups: &[ParamGroup], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Vec<Var>]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&model_fn, groups, true)?;
    let mut work: Vec<ParamGroup> = groups.to_vec();
    let mut reports = Vec::with_capacity(groups.len());
    for gi in 0..groups.len() {
        let mut report = GroupReport {
            name: groups[gi].name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            coordinates: 0,
        };
        for ti in 0..groups[gi].tensors.len() {
            for ci in 0..groups[gi].tensors[ti].len() {
                let a = analytic[gi][ti].data()[ci];
                let numeric = if groups[gi].frozen {
                    0.0
                } else {
                    let orig = groups[gi].tensors[ti].data()[ci];
                    work[gi].tensors[ti].data_mut()[ci] = orig + step;
                    let (plus, _) = evaluate(&model_fn, &work, false)?;
                    work[gi].tensors[ti].data_mut()[ci] = orig - step;
                    let (minus, _) = evaluate(&model_fn, &work, false)?;
                    work[gi].tensors[ti].data_mut()[ci] = orig;
                    (plus - minus) / (2.0 * step)
                };
                report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                report.coordinates += 1;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        groups: reports,
        tolerance,
    })
}
