//! Model-level shift robustness metrics.
//!
//! All per-input work runs through rayon with order-preserving collection,
//! and aggregation happens sequentially afterwards, so results do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ShiftSampler;
use crate::error::{arg_err, Result};
use crate::model::{argmax, Model};
use crate::tensor::{Shift2D, Tensor};

/// Population variance of the logits over shifted copies of one input,
/// averaged over classes: `mean_c (1/N) sum_i (L_c(g_i x) - mean_i L_c)^2`.
pub fn logits_variance(model: &Model, x: &Tensor, sampler: &ShiftSampler) -> Result<f64> {
    logits_variance_for(model, x, &sampler.shifts())
}

fn logits_variance_for(model: &Model, x: &Tensor, shifts: &[Shift2D]) -> Result<f64> {
    if shifts.is_empty() {
        return arg_err("logits variance needs at least one shift");
    }
    let logits = shifts.iter().map(|&g| model.logits(&x.circular_shift(g)?)).collect::<Result<Vec<_>>>()?;
    Ok(variance_of(&logits))
}

fn variance_of(logits: &[Tensor]) -> f64 {
    let n = logits.len() as f64;
    let classes = logits[0].numel();
    let mut total = 0.0;
    for c in 0..classes {
        let mean = logits.iter().map(|l| l.data()[c]).sum::<f64>() / n;
        total += logits.iter().map(|l| (l.data()[c] - mean).powi(2)).sum::<f64>() / n;
    }
    total / classes as f64
}

/// Per-input outcome of evaluating a model on shifted copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStability {
    /// Pairs whose prediction matched the unshifted prediction.
    pub agreements: usize,
    pub shifts: usize,
    /// Largest `max_c |L_c(g x) - L_c(x)|` over the shifts.
    pub max_logit_residual: f64,
    /// Largest `||L(g x) - L(x)||_2` over the shifts.
    pub max_logit_distance: f64,
    /// The shift realizing `max_logit_distance`.
    pub worst_shift: Shift2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub consistency: f64,
    pub max_logit_residual: f64,
    pub per_input: Vec<InputStability>,
}

/// Evaluates every input on its own shift stream (`sampler.shifts_for(i)`).
pub fn shift_stability(model: &Model, inputs: &[Tensor], sampler: &ShiftSampler) -> Result<Stability> {
    if inputs.is_empty() {
        return arg_err("need at least one input");
    }
    let per_input = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| input_stability(model, x, &sampler.shifts_for(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let agree: usize = per_input.iter().map(|p| p.agreements).sum();
    let total: usize = per_input.iter().map(|p| p.shifts).sum();
    let max_logit_residual = per_input.iter().map(|p| p.max_logit_residual).fold(0.0, f64::max);
    Ok(Stability { consistency: agree as f64 / total as f64, max_logit_residual, per_input })
}

fn input_stability(model: &Model, x: &Tensor, shifts: &[Shift2D]) -> Result<InputStability> {
    let base = model.logits(x)?;
    let clean = argmax(&base);
    let mut out = InputStability {
        agreements: 0,
        shifts: shifts.len(),
        max_logit_residual: 0.0,
        max_logit_distance: 0.0,
        worst_shift: Shift2D::IDENTITY,
    };
    for &g in shifts {
        let l = model.logits(&x.circular_shift(g)?)?;
        if argmax(&l) == clean {
            out.agreements += 1;
        }
        out.max_logit_residual = out.max_logit_residual.max(l.max_abs_diff(&base)?);
        let dist = l.l2_distance(&base)?;
        if dist > out.max_logit_distance {
            out.max_logit_distance = dist;
            out.worst_shift = g;
        }
    }
    Ok(out)
}

/// Fraction of `(input, shift)` pairs whose predicted class is unchanged.
pub fn consistency(model: &Model, inputs: &[Tensor], sampler: &ShiftSampler) -> Result<f64> {
    Ok(shift_stability(model, inputs, sampler)?.consistency)
}

/// Per-input logits variance, in input order.
pub fn logits_variances(model: &Model, inputs: &[Tensor], sampler: &ShiftSampler) -> Result<Vec<f64>> {
    let shifts = sampler.shifts();
    inputs.par_iter().map(|x| logits_variance_for(model, x, &shifts)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstOfN {
    pub n: usize,
    pub worst_shift: Shift2D,
    /// Fraction of the batch whose prediction under `worst_shift` matches
    /// the clean prediction.
    pub worst_fraction: f64,
    /// Agreement fraction for each sampled shift, in sampling order.
    pub fractions: Vec<f64>,
}

/// Worst-of-N shift attack. Labels are the model's own clean predictions;
/// each of `n` sampled shifts is applied to the whole batch and the shift
/// with the lowest agreement is reported (first one on ties).
pub fn worst_of_n_shift(model: &Model, inputs: &[Tensor], n: usize, sampler: &ShiftSampler) -> Result<WorstOfN> {
    if n == 0 {
        return arg_err("worst-of-N needs n >= 1");
    }
    if inputs.is_empty() {
        return arg_err("need at least one input");
    }
    let shifts = sampler.clone().with_count(n).shifts();
    let clean: Vec<usize> = inputs.par_iter().map(|x| model.predict(x)).collect::<Result<_>>()?;
    let mut fractions = Vec::with_capacity(shifts.len());
    for &g in &shifts {
        let preds: Vec<usize> =
            inputs.par_iter().map(|x| model.predict(&x.circular_shift(g)?)).collect::<Result<_>>()?;
        let agree = preds.iter().zip(&clean).filter(|(a, b)| a == b).count();
        fractions.push(agree as f64 / inputs.len() as f64);
    }
    let mut worst = 0;
    for (i, &f) in fractions.iter().enumerate() {
        if f < fractions[worst] {
            worst = i;
        }
    }
    Ok(WorstOfN { n: shifts.len(), worst_shift: shifts[worst], worst_fraction: fractions[worst], fractions })
}
