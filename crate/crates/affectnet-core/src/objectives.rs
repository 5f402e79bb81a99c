//! Task losses over tape variables, with per-task presence masks.
//!
//! All three losses average over the masked-in samples of the batch only,
//! so a sample with a task masked out contributes exactly zero gradient to
//! that task's head. The expression loss is softmax cross entropy in
//! log-sum-exp form, the action-unit loss sums stable binary cross entropy
//! over the 8 units, and the valence/arousal loss is one minus the mean of
//! the two per-column concordance coefficients of the batch.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LossWeights, NUM_AUS, NUM_EXPRESSIONS};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Guard added to the concordance denominator on the differentiable path;
/// keeps degenerate batches finite without changing healthy values beyond
/// ~1e-8.
const CCC_DENOM_GUARD: f64 = 1e-8;

/// Ground truth for one batch.
#[derive(Clone, Debug)]
pub struct BatchLabels {
    pub n: usize,
    /// (N,2) flattened, valence then arousal per row, in [-1,1].
    pub va: Vec<f32>,
    /// (N,8) flattened, each 0.0 or 1.0.
    pub au: Vec<f32>,
    /// (N), class index in [0,7).
    pub expr: Vec<usize>,
    pub mask_va: Vec<bool>,
    pub mask_au: Vec<bool>,
    pub mask_expr: Vec<bool>,
}

impl BatchLabels {
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.va.len() != 2 * n
            || self.au.len() != NUM_AUS * n
            || self.expr.len() != n
            || self.mask_va.len() != n
            || self.mask_au.len() != n
            || self.mask_expr.len() != n
        {
            return Err(Error::InvalidArgument(
                "batch label field lengths disagree".into(),
            ));
        }
        if self.va.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(
                "va targets must lie in [-1,1]".into(),
            ));
        }
        if self.au.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("au targets must be binary".into()));
        }
        if self.expr.iter().any(|&c| c >= NUM_EXPRESSIONS) {
            return Err(Error::InvalidArgument(format!(
                "expression targets must be in [0,{})",
                NUM_EXPRESSIONS
            )));
        }
        for i in 0..n {
            if !(self.mask_va[i] || self.mask_au[i] || self.mask_expr[i]) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has no annotated task"
                )));
            }
        }
        Ok(())
    }

    fn rows_with(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect()
    }
}

/// A task's batch loss: the scalar node plus how many samples produced it.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub value: Var,
    pub count: usize,
    /// Set when the task had samples but too few for its loss (va with < 2).
    pub degenerate: bool,
}

impl TaskLoss {
    pub fn active(&self) -> bool {
        self.count > 0 && !self.degenerate
    }
}

/// Placeholder for a task disabled by configuration.
pub fn absent_loss<E: Element>(t: &Tape<E>) -> TaskLoss {
    zero_loss(t, 0, false)
}

fn zero_loss<E: Element>(t: &Tape<E>, count: usize, degenerate: bool) -> TaskLoss {
    TaskLoss {
        value: t.constant(Tensor::scalar(E::ZERO)),
        count,
        degenerate,
    }
}

fn mean_weights<E: Element>(m: usize) -> Vec<E> {
    vec![E::from_f64(1.0 / m as f64); m]
}

/// Softmax cross entropy -x[class] + log sum exp(x), averaged over the
/// masked-in samples.
pub fn expr_loss<E: Element>(
    t: &Tape<E>,
    logits: Var,
    labels: &BatchLabels,
) -> Result<TaskLoss> {
    let idx = BatchLabels::rows_with(&labels.mask_expr);
    if idx.is_empty() {
        return Ok(zero_loss(t, 0, false));
    }
    let classes: Vec<usize> = idx.iter().map(|&i| labels.expr[i]).collect();
    if let Some(&bad) = classes.iter().find(|&&c| c >= NUM_EXPRESSIONS) {
        return Err(Error::InvalidArgument(format!(
            "expression target {bad} out of [0,{})",
            NUM_EXPRESSIONS
        )));
    }
    let rows = t.gather_rows(logits, &idx)?;
    let lse = t.log_sum_exp(rows)?;
    let picked = t.gather_class(rows, &classes)?;
    let per_sample = t.sub(lse, picked)?;
    let value = t.dot_const(per_sample, &mean_weights(idx.len()))?;
    Ok(TaskLoss {
        value,
        count: idx.len(),
        degenerate: false,
    })
}

/// Binary cross entropy from logits, summed over the 8 action units per
/// sample (not averaged), then averaged over masked-in samples. Evaluated in
/// softplus form so saturated logits stay finite.
pub fn au_loss<E: Element>(t: &Tape<E>, logits: Var, labels: &BatchLabels) -> Result<TaskLoss> {
    let idx = BatchLabels::rows_with(&labels.mask_au);
    if idx.is_empty() {
        return Ok(zero_loss(t, 0, false));
    }
    let m = idx.len();
    let mut y = Vec::with_capacity(m * NUM_AUS);
    for &i in &idx {
        for k in 0..NUM_AUS {
            let v = labels.au[i * NUM_AUS + k];
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "au target {v} is not binary"
                )));
            }
            y.push(v as f64);
        }
    }
    let rows = t.gather_rows(logits, &idx)?;
    // y*softplus(-x) + (1-y)*softplus(x)
    let sp_neg = t.softplus(t.mul_scalar(rows, -1.0));
    let sp_pos = t.softplus(rows);
    let y_const = t.constant(Tensor::from_f64s(vec![m, NUM_AUS], &y)?);
    let omy: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let omy_const = t.constant(Tensor::from_f64s(vec![m, NUM_AUS], &omy)?);
    let per_elem = t.add(t.mul(y_const, sp_neg)?, t.mul(omy_const, sp_pos)?)?;
    let per_sample = t.row_sum(per_elem)?;
    let value = t.dot_const(per_sample, &mean_weights(m))?;
    Ok(TaskLoss {
        value,
        count: m,
        degenerate: false,
    })
}

/// Differentiable batch concordance of one column against fixed targets.
fn ccc_column<E: Element>(t: &Tape<E>, x: Var, targets: &[f64]) -> Result<Var> {
    let m = targets.len();
    let inv_m = 1.0 / m as f64;
    let y_mean: f64 = targets.iter().sum::<f64>() * inv_m;
    let y_centered: Vec<f64> = targets.iter().map(|v| v - y_mean).collect();
    let y_var: f64 = y_centered.iter().map(|v| v * v).sum::<f64>() * inv_m;

    let mean_w = mean_weights::<E>(m);
    let x_mean = t.dot_const(x, &mean_w)?;
    let x_centered = t.sub(x, x_mean)?;
    let cov_w: Vec<E> = y_centered
        .iter()
        .map(|&v| E::from_f64(v * inv_m))
        .collect();
    let covariance = t.dot_const(x_centered, &cov_w)?;
    let x_var = t.dot_const(t.mul(x_centered, x_centered)?, &mean_w)?;

    let mean_diff = t.sub(x_mean, t.constant(Tensor::scalar(E::from_f64(y_mean))))?;
    let mean_gap = t.mul(mean_diff, mean_diff)?;
    let denom = t.add(
        t.add(x_var, t.constant(Tensor::scalar(E::from_f64(y_var))))?,
        mean_gap,
    )?;
    let denom = t.add(
        denom,
        t.constant(Tensor::scalar(E::from_f64(CCC_DENOM_GUARD))),
    )?;
    t.div(t.mul_scalar(covariance, 2.0), denom)
}

/// 1 - (ccc_valence + ccc_arousal)/2 over masked-in samples of the batch.
pub fn va_loss<E: Element>(t: &Tape<E>, pred: Var, labels: &BatchLabels) -> Result<TaskLoss> {
    let idx = BatchLabels::rows_with(&labels.mask_va);
    if idx.is_empty() {
        return Ok(zero_loss(t, 0, false));
    }
    if idx.len() < 2 {
        return Ok(zero_loss(t, idx.len(), true));
    }
    let rows = t.gather_rows(pred, &idx)?;
    let mut ccc_sum: Option<Var> = None;
    for col in 0..2 {
        let x = t.select_column(rows, col)?;
        let targets: Vec<f64> = idx.iter().map(|&i| labels.va[i * 2 + col] as f64).collect();
        let c = ccc_column(t, x, &targets)?;
        ccc_sum = Some(match ccc_sum {
            Some(acc) => t.add(acc, c)?,
            None => c,
        });
    }
    let one = t.constant(Tensor::scalar(E::ONE));
    let value = t.add(one, t.mul_scalar(ccc_sum.expect("two columns"), -0.5))?;
    Ok(TaskLoss {
        value,
        count: idx.len(),
        degenerate: false,
    })
}

/// Plain sum of the active task losses.
pub fn total_sum_loss<E: Element>(t: &Tape<E>, losses: &[TaskLoss]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in losses.iter().filter(|l| l.active()) {
        acc = Some(match acc {
            Some(a) => t.add(a, l.value)?,
            None => l.value,
        });
    }
    Ok(acc.unwrap_or_else(|| t.constant(Tensor::scalar(E::ZERO))))
}

/// Uncertainty-weighted total with learnable log-variances s = log(sigma^2):
/// 0.5*e^{-s_va}*L_va + e^{-s_au}*L_au + e^{-s_expr}*L_expr + (s_va+s_au+s_expr)/2.
/// A task absent from the batch contributes neither its weighted term nor
/// its regularizer, so its log-variance receives no gradient.
pub fn weighted_loss<E: Element>(
    t: &Tape<E>,
    store: &ParamStore<E>,
    weights: &LossWeights,
    va: &TaskLoss,
    au: &TaskLoss,
    expr: &TaskLoss,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut add_term = |t: &Tape<E>, term: Var| -> Result<()> {
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
        Ok(())
    };
    for (loss, s_id, coefficient) in [
        (va, weights.va, 0.5),
        (au, weights.au, 1.0),
        (expr, weights.expr, 1.0),
    ] {
        if !loss.active() {
            continue;
        }
        let s = t.param(store, s_id);
        let precision = t.exp(t.mul_scalar(s, -1.0));
        let weighted = t.mul_scalar(t.mul(precision, loss.value)?, coefficient);
        add_term(t, weighted)?;
        add_term(t, t.mul_scalar(s, 0.5))?;
    }
    Ok(acc.unwrap_or_else(|| t.constant(Tensor::scalar(E::ZERO))))
}
