//! Training objectives: summed cross-entropy on the fused branch (single
//! loss), the three-term perspective loss, and the L2 weight penalty.
//! Losses are sums over unmasked utterances, never means, so gradient
//! scale follows utterance count.

use ndarray::{Array2, Array3};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::DialogueBatch;
use crate::error::{Error, Result};
use crate::model::{ForwardNodes, ForwardOutput, LossMode};
use crate::nn::{BoundParams, ParamSet};

/// Components of one batch loss. `total` is always reconstructible as
/// `((l_a + l_t) + l_s) + l2_penalty` (missing terms contribute nothing),
/// evaluated in exactly that order.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_a: Option<f64>,
    pub l_t: Option<f64>,
    pub l2_penalty: f64,
    pub total: f64,
}

/// Summed softmax cross-entropy over unmasked positions, identical in
/// value and evaluation order to the tape op.
pub fn cross_entropy_sum(
    logits: &Array3<f64>,
    labels: &Array2<i64>,
    mask: &Array2<f64>,
) -> Result<f64> {
    let (b, s, c) = logits.dim();
    if labels.shape() != [b, s] || mask.shape() != [b, s] {
        return Err(Error::Shape(format!(
            "cross-entropy: logits [{b},{s},{c}] vs labels {:?} / mask {:?}",
            labels.shape(),
            mask.shape()
        )));
    }
    let mut total = 0.0;
    for bi in 0..b {
        for si in 0..s {
            if mask[[bi, si]] == 0.0 {
                continue;
            }
            let label = labels[[bi, si]];
            if label < 0 || label as usize >= c {
                return Err(Error::Label(format!(
                    "label {label} at unmasked position ({bi},{si}) outside 0..{c}"
                )));
            }
            let row = logits.slice(ndarray::s![bi, si, ..]);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            total += mx + z.ln() - row[label as usize];
        }
    }
    Ok(total)
}

/// Cross-entropy of the prediction branch only.
pub fn single_loss(output: &ForwardOutput, batch: &DialogueBatch) -> Result<LossBreakdown> {
    let logits = output.designated_logits().map_err(|_| {
        Error::Config("single loss requires a prediction branch in the forward output".into())
    })?;
    let l_s = cross_entropy_sum(logits, &batch.labels, &batch.mask)?;
    Ok(LossBreakdown {
        l_s,
        l_a: None,
        l_t: None,
        l2_penalty: 0.0,
        total: l_s,
    })
}

/// Three-term loss: fused plus both unimodal auxiliary cross-entropies.
pub fn perspective_loss(output: &ForwardOutput, batch: &DialogueBatch) -> Result<LossBreakdown> {
    let (fused, audio, text) = match (&output.fused_logits, &output.audio_logits, &output.text_logits) {
        (Some(f), Some(a), Some(t)) => (f, a, t),
        _ => {
            return Err(Error::Config(
                "perspective loss requires fused, audio, and text branches".into(),
            ))
        }
    };
    let l_a = cross_entropy_sum(audio, &batch.labels, &batch.mask)?;
    let l_t = cross_entropy_sum(text, &batch.labels, &batch.mask)?;
    let l_s = cross_entropy_sum(fused, &batch.labels, &batch.mask)?;
    Ok(LossBreakdown {
        l_s,
        l_a: Some(l_a),
        l_t: Some(l_t),
        l2_penalty: 0.0,
        total: (l_a + l_t) + l_s,
    })
}

impl LossBreakdown {
    /// Attach an L2 penalty, extending the total in the canonical order.
    pub fn with_l2(mut self, penalty: f64) -> LossBreakdown {
        self.l2_penalty = penalty;
        self.total += penalty;
        self
    }
}

/// `weight * sum of squared entries` over weight tensors; biases excluded.
pub fn l2_penalty(params: &ParamSet, weight: f64) -> f64 {
    let mut acc = 0.0;
    for (_, p) in params.iter() {
        if p.is_bias {
            continue;
        }
        acc += p.value.iter().map(|v| v * v).sum::<f64>();
    }
    weight * acc
}

/// L2 penalty as a tape node over bound parameters, matching
/// `l2_penalty` bit for bit (same iteration order and reduction).
pub fn l2_on_tape(
    tape: &mut Tape,
    bp: &BoundParams,
    params: &ParamSet,
    weight: f64,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (name, p) in params.iter() {
        if p.is_bias {
            continue;
        }
        let sq = tape.sumsq(bp.id(name));
        acc = Some(match acc {
            Some(prev) => tape.add(prev, sq),
            None => sq,
        });
    }
    match acc {
        Some(node) => tape.scale(node, weight),
        None => tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1]))),
    }
}

/// Build the configured batch loss on the tape. Returns the scalar root
/// node plus its value-level breakdown; the breakdown's total equals the
/// node's value exactly.
pub fn loss_on_tape(
    tape: &mut Tape,
    nodes: &ForwardNodes,
    batch: &DialogueBatch,
    loss_mode: LossMode,
    l2: Option<(f64, &BoundParams, &ParamSet)>,
) -> Result<(NodeId, LossBreakdown)> {
    let ce = |tape: &mut Tape, id: NodeId| tape.ce_masked_sum(id, &batch.labels, &batch.mask);
    let (mut root, l_s, l_a, l_t) = match loss_mode {
        LossMode::Single => {
            let branch = nodes.designated().map_err(|_| {
                Error::Config("single loss requires a prediction branch".into())
            })?;
            let ls = ce(tape, branch)?;
            (ls, tape.scalar(ls), None, None)
        }
        LossMode::Perspective => {
            let (fused, audio, text) = match (nodes.fused, nodes.audio, nodes.text) {
                (Some(f), Some(a), Some(t)) => (f, a, t),
                _ => {
                    return Err(Error::Config(
                        "perspective loss requires fused, audio, and text branches".into(),
                    ))
                }
            };
            let la = ce(tape, audio)?;
            let lt = ce(tape, text)?;
            let ls = ce(tape, fused)?;
            let aux = tape.add(la, lt);
            let sum = tape.add(aux, ls);
            (
                sum,
                tape.scalar(ls),
                Some(tape.scalar(la)),
                Some(tape.scalar(lt)),
            )
        }
    };
    let mut penalty = 0.0;
    if let Some((weight, bp, params)) = l2 {
        let l2_node = l2_on_tape(tape, bp, params, weight);
        penalty = tape.scalar(l2_node);
        root = tape.add(root, l2_node);
    }
    let breakdown = LossBreakdown {
        l_s,
        l_a,
        l_t,
        l2_penalty: penalty,
        total: tape.scalar(root),
    };
    Ok((root, breakdown))
}
