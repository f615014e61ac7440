//! Neural building blocks on top of the autodiff tape: parameter store,
//! initialization, bidirectional GRU, multi-head self-attention, dropout,
//! and a finite-difference gradient checker.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};

/// One named tensor. Biases are excluded from weight decay.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub is_bias: bool,
}

/// Named parameters in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>, is_bias: bool) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.params.insert(name, Param { value, is_bias });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight plus optional zero bias,
/// registered as `{name}.w` / `{name}.b`.
pub fn init_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_out: usize,
    d_in: usize,
    bias: bool,
) {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[d_out, d_in]), |_| rng.random_range(-bound..bound));
    params.insert(format!("{name}.w"), w, false);
    if bias {
        params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])), true);
    }
}

fn init_gru_direction(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    h: usize,
) {
    for gate in ["r", "z", "c"] {
        let wb = 1.0 / (d_in as f64).sqrt();
        let ub = 1.0 / (h as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[h, d_in]), |_| rng.random_range(-wb..wb));
        let u = ArrayD::from_shape_fn(IxDyn(&[h, h]), |_| rng.random_range(-ub..ub));
        params.insert(format!("{prefix}.gate_{gate}.w"), w, false);
        params.insert(format!("{prefix}.u_{gate}"), u, false);
        params.insert(
            format!("{prefix}.gate_{gate}.b"),
            ArrayD::zeros(IxDyn(&[h])),
            true,
        );
    }
}

/// Register both directions of a bidirectional GRU under `prefix`.
/// `d_hidden` is the concatenated output width; each direction gets half.
pub fn init_bigru(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
) {
    assert_eq!(d_hidden % 2, 0, "bigru width must be even");
    let h = d_hidden / 2;
    init_gru_direction(params, rng, &format!("{prefix}.fwd"), d_in, h);
    init_gru_direction(params, rng, &format!("{prefix}.bwd"), d_in, h);
}

/// Register q/k/v/output projections (with zero biases) under `prefix`.
pub fn init_attention(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d_model: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, rng, &format!("{prefix}.{proj}"), d_model, d_model, true);
    }
}

/// Parameter leaves bound onto a tape for one forward pass.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Push every parameter as a trainable leaf, in sorted name order.
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p) in params.iter() {
            ids.insert(name.clone(), tape.param(p.value.clone()));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    /// Collect per-parameter gradients after a backward sweep. Parameters
    /// the loss does not reach get zero gradients.
    pub fn grads(&self, tape: &Tape, gradients: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = gradients
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(tape.value(id).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// `y = x . w^T + b` using the `{name}.w` / `{name}.b` convention.
pub fn linear(tape: &mut Tape, bp: &BoundParams, name: &str, x: NodeId) -> NodeId {
    let w = bp.id(&format!("{name}.w"));
    let b_name = format!("{name}.b");
    let b = bp.ids.get(&b_name).copied();
    tape.linear(x, w, b)
}

fn gru_direction(
    tape: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    mask: &Array2<f64>,
    reverse: bool,
) -> Vec<NodeId> {
    let (batch, steps) = (mask.shape()[0], mask.shape()[1]);
    let h_dim = tape.value(bp.id(&format!("{prefix}.u_r"))).shape()[0];

    // Input-side gate preactivations for the whole sequence at once.
    let xr = linear(tape, bp, &format!("{prefix}.gate_r"), x);
    let xz = linear(tape, bp, &format!("{prefix}.gate_z"), x);
    let xc = linear(tape, bp, &format!("{prefix}.gate_c"), x);

    let u_r = bp.id(&format!("{prefix}.u_r"));
    let u_z = bp.id(&format!("{prefix}.u_z"));
    let u_c = bp.id(&format!("{prefix}.u_c"));

    let mut h = tape.constant(ArrayD::zeros(IxDyn(&[batch, h_dim])));
    let mut outs: Vec<Option<NodeId>> = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let m_t = mask
            .column(t)
            .to_owned()
            .into_shape_with_order(IxDyn(&[batch]))
            .unwrap();

        let xr_t = tape.slice_step(xr, t);
        let xz_t = tape.slice_step(xz, t);
        let xc_t = tape.slice_step(xc, t);

        let hr = tape.linear(h, u_r, None);
        let r_pre = tape.add(xr_t, hr);
        let r = tape.sigmoid(r_pre);

        let hz = tape.linear(h, u_z, None);
        let z_pre = tape.add(xz_t, hz);
        let z = tape.sigmoid(z_pre);

        let rh = tape.mul(r, h);
        let hc = tape.linear(rh, u_c, None);
        let c_pre = tape.add(xc_t, hc);
        let c = tape.tanh(c_pre);

        // h' = (1 - z) * h + z * c, then carry h through padded steps.
        let c_minus_h = tape.sub(c, h);
        let zc = tape.mul(z, c_minus_h);
        let h_cand = tape.add(h, zc);
        let delta = tape.sub(h_cand, h);
        let masked_delta = tape.mask_last(delta, &m_t);
        h = tape.add(h, masked_delta);
        outs[t] = Some(tape.mask_last(h, &m_t));
    }
    outs.into_iter().map(|o| o.expect("all steps visited")).collect()
}

/// Bidirectional GRU over [B, S, D_in] with a 0/1 validity mask [B, S].
/// Outputs [B, S, d_hidden] with forward and backward halves concatenated;
/// padded steps come out as zeros and do not advance the hidden state.
pub fn bigru(
    tape: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    mask: &Array2<f64>,
) -> NodeId {
    // Names inside each direction: gate preactivation linears use
    // `gate_{r,z,c}.w` = w_{r,z,c} and `gate_{r,z,c}.b` = b_{r,z,c}.
    let fwd = gru_direction(tape, bp, &format!("{prefix}.fwd"), x, mask, false);
    let bwd = gru_direction(tape, bp, &format!("{prefix}.bwd"), x, mask, true);
    let fwd_seq = tape.stack_steps(&fwd);
    let bwd_seq = tape.stack_steps(&bwd);
    tape.concat_last(fwd_seq, bwd_seq)
}

/// Multi-head self-attention with a residual connection. Padded query
/// rows come out zero; padded keys receive zero weight. Returns the block
/// output [B, S, D] and the attention weights [B, H, S, S].
pub fn self_attention(
    tape: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: NodeId,
    mask: &Array2<f64>,
    n_heads: usize,
) -> (NodeId, NodeId) {
    let q = linear(tape, bp, &format!("{prefix}.q"), x);
    let k = linear(tape, bp, &format!("{prefix}.k"), x);
    let v = linear(tape, bp, &format!("{prefix}.v"), x);
    let scores = tape.attn_scores(q, k, n_heads);
    let weights = tape.softmax_last(scores, Some(mask));
    let ctx = tape.attn_apply(weights, v, n_heads);
    let mask_d = mask.clone().into_dyn();
    let ctx = tape.mask_last(ctx, &mask_d);
    let proj = linear(tape, bp, &format!("{prefix}.o"), ctx);
    let res = tape.add(x, proj);
    let out = tape.mask_last(res, &mask_d);
    (out, weights)
}

/// Inverted dropout. Identity when `p == 0`; otherwise each entry is kept
/// with probability 1-p and scaled by 1/(1-p). The caller's RNG stream
/// makes the mask reproducible.
pub fn dropout(tape: &mut Tape, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
    if p <= 0.0 {
        return x;
    }
    assert!(p < 1.0, "dropout probability must be below 1");
    let scale = 1.0 / (1.0 - p);
    let shape = tape.value(x).raw_dim();
    let keep = ArrayD::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            scale
        }
    });
    tape.dropout_with_mask(x, keep)
}

/// Result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `f(params, want_grads)` evaluates the scalar loss; when `want_grads`
/// is true it also returns per-parameter gradients. At most
/// `samples_per_param` coordinates are probed per tensor (chosen
/// deterministically from `seed`). Relative error is
/// |a - n| / max(1, |a|, |n|).
pub fn grad_check<F>(
    params: &ParamSet,
    mut f: F,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, bool) -> Result<(f64, Option<BTreeMap<String, ArrayD<f64>>>)>,
{
    let (_, grads) = f(params, true)?;
    let grads = grads.ok_or_else(|| {
        Error::Config("gradient check closure returned no gradients".into())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        n_checked: 0,
    };
    for (name, p) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient reported for {name}")))?;
        let n = p.value.len();
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, samples_per_param).into_vec()
        };
        for idx in coords {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] += eps;
            let (lp, _) = f(&plus, false)?;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] -= eps;
            let (lm, _) = f(&minus, false)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}
