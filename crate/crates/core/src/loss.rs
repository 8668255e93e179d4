//! Set-prediction training loss.
//!
//! Each decoder layer's predictions are matched to the ground-truth spans by
//! minimum-cost assignment over the forward values; the differentiable loss
//! is then built from the matched pairs only. Three terms enter the total:
//!
//! * set guidance: mean negative log-likelihood of each proposal's
//!   correspondence row against its static subset target (proposal row `i`
//!   answers query `i / proposals_per_query`, independent of the matching);
//! * span L1: mean absolute endpoint error over matched pairs;
//! * span overlap: mean `1 - gIoU` over matched pairs.
//!
//! Auxiliary decoder layers are matched independently and their weighted
//! totals are added at unit weight, so every layer receives the same
//! supervision as the last.

use serde::{Deserialize, Serialize};

use crate::assign::{build_cost_matrix, hungarian, Assignment};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, LayerOut};
use crate::span::TimeSpan;
use crate::tensor::{Graph, TensorId};

/// Relative weights of the loss terms; the same span weights parameterize
/// the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub set_guidance: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            set_guidance: 1.0,
            l1: 3.0,
            giou: 2.0,
        }
    }
}

/// Plain values of the last decoder layer's loss terms.
/// `total = set_guidance_weight * set_guidance + l1_weight * l1 + giou_weight * giou`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub set_guidance: f64,
    pub total: f64,
}

/// One sample's loss: the differentiable objective (last layer plus
/// auxiliary layers), the last layer's term values, and its matching.
pub struct SampleLoss {
    pub loss: TensorId,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

/// Denominator guard for degenerate zero-length geometry; keeps the
/// conventions 0/0 -> 0 while leaving regular spans untouched.
const DEGENERATE_EPS: f64 = 1e-12;

/// Builds the loss for one forward pass. `targets[j]` is the ground-truth
/// span answered by query `j`; exactly one target per real query.
pub fn sample_loss(
    g: &mut Graph,
    fp: &ForwardPass,
    targets: &[TimeSpan],
    weights: &LossWeights,
) -> Result<SampleLoss> {
    if targets.len() != fp.k {
        return Err(Error::Shape(format!(
            "{} targets for {} queries",
            targets.len(),
            fp.k
        )));
    }
    let last = fp.layers.last().expect("decoder has layers");
    let (mut loss, breakdown, assignment) = layer_loss(g, last, fp, targets, weights)?;
    for aux in &fp.layers[..fp.layers.len() - 1] {
        let (aux_loss, _, _) = layer_loss(g, aux, fp, targets, weights)?;
        loss = g.add(loss, aux_loss)?;
    }
    Ok(SampleLoss {
        loss,
        breakdown,
        assignment,
    })
}

fn layer_loss(
    g: &mut Graph,
    lo: &LayerOut,
    fp: &ForwardPass,
    targets: &[TimeSpan],
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown, Assignment)> {
    let (n, k) = (fp.n, fp.k);
    let ppq = n / k;

    // Matching runs on forward values; gradients only flow through the
    // terms built from the chosen pairs below.
    let span_values = g.value(lo.spans).to_vec();
    let pred_spans = span_values
        .chunks_exact(2)
        .map(|p| TimeSpan::new(p[0], p[1]))
        .collect::<Result<Vec<_>>>()?;
    let corr_values = g.value(lo.corr).to_vec();
    let target_pairs: Vec<(TimeSpan, usize)> =
        targets.iter().enumerate().map(|(j, s)| (*s, j)).collect();
    let cost = build_cost_matrix(
        &target_pairs,
        &pred_spans,
        &corr_values,
        k,
        weights.l1,
        weights.giou,
    )?;
    let assignment = hungarian(&cost)?;

    let subset_targets: Vec<usize> = (0..n).map(|i| i / ppq).collect();
    let sg = g.nll_mean(lo.corr, subset_targets)?;

    let mut l1_terms = Vec::with_capacity(k);
    let mut giou_terms = Vec::with_capacity(k);
    for &(ti, row) in &assignment.pairs {
        let tgt = targets[ti];
        let s = g.get(lo.spans, row, 0)?;
        let e = g.get(lo.spans, row, 1)?;
        let gs = g.scalar(tgt.start());
        let ge = g.scalar(tgt.end());

        let ds = g.sub(s, gs)?;
        let de = g.sub(e, ge)?;
        let ads = g.abs(ds);
        let ade = g.abs(de);
        l1_terms.push(g.add(ads, ade)?);

        // Differentiable 1 - gIoU mirroring TimeSpan::giou, with guarded
        // denominators so coincident zero-length pairs stay finite.
        let lo_end = g.min2(e, ge)?;
        let hi_start = g.max2(s, gs)?;
        let raw_inter = g.sub(lo_end, hi_start)?;
        let inter = g.relu(raw_inter);
        let pred_len = g.sub(e, s)?;
        let tgt_len = g.scalar(tgt.length());
        let len_sum = g.add(pred_len, tgt_len)?;
        let union = g.sub(len_sum, inter)?;
        let hull_hi = g.max2(e, ge)?;
        let hull_lo = g.min2(s, gs)?;
        let hull = g.sub(hull_hi, hull_lo)?;

        let eps = g.scalar(DEGENERATE_EPS);
        let union_safe = g.max2(union, eps)?;
        let hull_safe = g.max2(hull, eps)?;
        let iou = g.div(inter, union_safe)?;
        let gap = g.sub(hull, union)?;
        let gap_frac = g.div(gap, hull_safe)?;
        let giou = g.sub(iou, gap_frac)?;
        let one = g.scalar(1.0);
        giou_terms.push(g.sub(one, giou)?);
    }
    let l1_sum = sum_terms(g, &l1_terms)?;
    let giou_sum = sum_terms(g, &giou_terms)?;
    let inv_k = 1.0 / k as f64;
    let l1_mean = g.scale(l1_sum, inv_k);
    let giou_mean = g.scale(giou_sum, inv_k);

    let wsg = g.scale(sg, weights.set_guidance);
    let wl1 = g.scale(l1_mean, weights.l1);
    let wgiou = g.scale(giou_mean, weights.giou);
    let partial = g.add(wsg, wl1)?;
    let total = g.add(partial, wgiou)?;

    let breakdown = LossBreakdown {
        l1: g.scalar_value(l1_mean),
        giou: g.scalar_value(giou_mean),
        set_guidance: g.scalar_value(sg),
        total: g.scalar_value(total),
    };
    Ok((total, breakdown, assignment))
}

fn sum_terms(g: &mut Graph, terms: &[TensorId]) -> Result<TensorId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
