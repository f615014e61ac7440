//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation records its inputs and enough saved state to run its
//! backward rule; `Tape::backward` walks the tape once in reverse and
//! accumulates gradients. All values are `f64` in standard (row-major)
//! layout. The op set is deliberately small: just what the sequence
//! towers, fusion operators, and losses need.

use ndarray::{concatenate, s, Array2, Array3, ArrayD, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

/// Additive score for masked attention keys. Large enough that
/// `exp(x + MASK_NEG - max)` underflows to exactly 0.0 whenever at least
/// one key in the row is unmasked.
pub const MASK_NEG: f64 = -1.0e30;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// y[.., o] = sum_i x[.., i] * w[o, i] (+ b[o])
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// [B, S, D] -> [B, D] at a fixed sequence position.
    SliceStep {
        x: NodeId,
        step: usize,
    },
    /// S x [B, D] -> [B, S, D]
    StackSteps {
        xs: Vec<NodeId>,
    },
    /// Multiply by a constant 0/1 mask broadcast over the last axis.
    MaskLast {
        x: NodeId,
        mask: ArrayD<f64>,
    },
    ConcatLast(NodeId, NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// y[.., d] = a[.., 0] * x[.., d]
    MulBcastLast {
        a: NodeId,
        x: NodeId,
    },
    /// Scaled dot-product scores per head: [B,S,D] x [B,S,D] -> [B,H,S,S].
    AttnScores {
        q: NodeId,
        k: NodeId,
        n_heads: usize,
    },
    /// Softmax over the last axis. Key masking happens at construction;
    /// backward needs only the stored output (masked entries are exact
    /// zeros there, so no gradient reaches them).
    SoftmaxLast {
        x: NodeId,
    },
    /// Attention application per head: [B,H,S,S] x [B,S,D] -> [B,S,D].
    AttnApply {
        w: NodeId,
        v: NodeId,
        n_heads: usize,
    },
    /// Masked softmax cross-entropy, summed over unmasked positions.
    CeMaskedSum {
        logits: NodeId,
        labels: Array2<i64>,
        mask: Array2<f64>,
        probs: Array3<f64>,
    },
    /// Sum of squared entries, as a [1]-shaped scalar.
    SumSq(NodeId),
    /// Inverted dropout; `keep` holds 0.0 or 1/(1-p) per entry.
    Dropout {
        x: NodeId,
        keep: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn view2(a: &ArrayD<f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("tape values are standard layout")
}

/// `dot` may hand back an F-order array for degenerate shapes (an inner
/// dimension of 1); reshaping requires C order.
fn standardize2(y: Array2<f64>) -> Array2<f64> {
    if y.is_standard_layout() {
        y
    } else {
        let dim = y.raw_dim();
        Array2::from_shape_vec(dim, y.iter().cloned().collect()).unwrap()
    }
}

fn view2_mut(a: &mut ArrayD<f64>, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    a.view_mut()
        .into_shape_with_order((rows, cols))
        .expect("tape values are standard layout")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap_or(0.0)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A trainable leaf (gradients flow into it).
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf (no gradient is computed for it).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: shape mismatch"
        );
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| c * x);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Affine map over the last axis: `y = x . w^T (+ b)`.
    /// `x`: [.., D_in], `w`: [D_out, D_in], `b`: [D_out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (d_out, d_in) = {
            let ws = self.value(w).shape();
            assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
            (ws[0], ws[1])
        };
        let last = *xs.last().expect("linear: input must have at least 1 axis");
        assert_eq!(last, d_in, "linear: input/weight dim mismatch");
        let rows: usize = xs[..xs.len() - 1].iter().product();

        let xv = view2(self.value(x), rows, d_in);
        let wv = view2(self.value(w), d_out, d_in);
        let mut y = standardize2(xv.dot(&wv.t()));
        if let Some(bid) = b {
            let bv = self.value(bid)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("linear: bias must be 1-D");
            assert_eq!(bv.len(), d_out, "linear: bias dim mismatch");
            y += &bv;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let v = y
            .into_shape_with_order(out_shape.as_slice())
            .expect("linear: reshape")
            .into_dyn();
        let ng = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(v, Op::Linear { x, w, b }, ng)
    }

    /// `x[:, step, :]` for a [B, S, D] input.
    pub fn slice_step(&mut self, x: NodeId, step: usize) -> NodeId {
        let v3 = self.value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("slice_step: input must be 3-D");
        let v = v3.slice(s![.., step, ..]).to_owned().into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::SliceStep { x, step }, ng)
    }

    /// Stack S tensors of shape [B, D] into [B, S, D].
    pub fn stack_steps(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "stack_steps: empty input");
        let views: Vec<_> = xs
            .iter()
            .map(|&id| {
                self.value(id)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("stack_steps: inputs must be 2-D")
            })
            .collect();
        let v = ndarray::stack(Axis(1), &views)
            .expect("stack_steps: shape mismatch")
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let ng = xs.iter().any(|&id| self.needs(id));
        self.push(v, Op::StackSteps { xs: xs.to_vec() }, ng)
    }

    /// Zero out entries using a 0/1 mask over all but the last axis.
    pub fn mask_last(&mut self, x: NodeId, mask: &ArrayD<f64>) -> NodeId {
        let xs = self.value(x).shape();
        assert_eq!(
            &xs[..xs.len() - 1],
            mask.shape(),
            "mask_last: mask must match all but the last axis"
        );
        let d = *xs.last().unwrap();
        let rows = mask.len();
        let mut v = self.value(x).clone();
        {
            let mut v2 = view2_mut(&mut v, rows, d);
            for (mut row, &m) in v2.rows_mut().into_iter().zip(mask.iter()) {
                if m == 0.0 {
                    row.fill(0.0);
                } else if m != 1.0 {
                    row.mapv_inplace(|x| x * m);
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            v,
            Op::MaskLast {
                x,
                mask: mask.clone(),
            },
            ng,
        )
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(
            sa[..sa.len() - 1],
            sb[..sb.len() - 1],
            "concat_last: leading shape mismatch"
        );
        let last = sa.len() - 1;
        let v = concatenate(Axis(last), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_last")
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatLast(a, b), ng)
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let last = xs.len() - 1;
        assert!(start + len <= xs[last], "slice_last: out of range");
        let v = self.value(x)
            .slice_axis(Axis(last), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceLast { x, start, len }, ng)
    }

    /// Broadcast-multiply `a` of shape [.., 1] onto `x` of shape [.., D].
    pub fn mul_bcast_last(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let sx = self.value(x).shape().to_vec();
        assert_eq!(*sa.last().unwrap(), 1, "mul_bcast_last: a must end in 1");
        assert_eq!(
            sa[..sa.len() - 1],
            sx[..sx.len() - 1],
            "mul_bcast_last: leading shape mismatch"
        );
        let d = *sx.last().unwrap();
        let rows = self.value(a).len();
        let av = view2(self.value(a), rows, 1);
        let xv = view2(self.value(x), rows, d);
        let mut y = xv.to_owned();
        for (mut row, a_row) in y.rows_mut().into_iter().zip(av.rows()) {
            let s = a_row[0];
            row.mapv_inplace(|v| v * s);
        }
        let v = y
            .into_shape_with_order(sx.as_slice())
            .expect("mul_bcast_last: reshape")
            .into_dyn();
        let ng = self.needs(a) || self.needs(x);
        self.push(v, Op::MulBcastLast { a, x }, ng)
    }

    /// Per-head scaled dot-product scores: q, k of [B, S, D] with D = H * dh
    /// give [B, H, S, S] scores scaled by 1/sqrt(dh).
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId, n_heads: usize) -> NodeId {
        let (b, s, d) = dims3(self.value(q));
        assert_eq!(self.value(k).shape(), &[b, s, d], "attn_scores: q/k mismatch");
        assert_eq!(d % n_heads, 0, "attn_scores: D must divide by heads");
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let kv = self.value(k).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array4::<f64>::zeros((b, n_heads, s, s));
        for bi in 0..b {
            for h in 0..n_heads {
                let qs = qv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let ks = kv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let mut os = out.slice_mut(s![bi, h, .., ..]);
                ndarray::linalg::general_mat_mul(scale, &qs, &ks.t(), 0.0, &mut os);
            }
        }
        let ng = self.needs(q) || self.needs(k);
        self.push(out.into_dyn(), Op::AttnScores { q, k, n_heads }, ng)
    }

    /// Softmax over the last axis. `key_mask` (0/1, shape [B, L]) marks
    /// which of the L entries are valid; invalid entries get MASK_NEG
    /// added before normalization and come out exactly 0 whenever the row
    /// has at least one valid entry.
    pub fn softmax_last(&mut self, x: NodeId, key_mask: Option<&Array2<f64>>) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let l = *xs.last().unwrap();
        let rows = self.value(x).len() / l;
        if let Some(m) = key_mask {
            assert_eq!(m.shape()[0], xs[0], "softmax_last: mask batch mismatch");
            assert_eq!(m.shape()[1], l, "softmax_last: mask length mismatch");
            assert_eq!(rows % xs[0], 0);
        }
        let rows_per_batch = rows / xs[0];
        let mut y = self.value(x).clone();
        {
            let mut y2 = view2_mut(&mut y, rows, l);
            for (r, mut row) in y2.rows_mut().into_iter().enumerate() {
                if let Some(m) = key_mask {
                    let bi = r / rows_per_batch;
                    for (j, v) in row.iter_mut().enumerate() {
                        if m[[bi, j]] == 0.0 {
                            *v += MASK_NEG;
                        }
                    }
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                row.mapv_inplace(|v| v / z);
            }
        }
        let ng = self.needs(x);
        self.push(y, Op::SoftmaxLast { x }, ng)
    }

    /// Apply attention weights [B, H, S, S] to values [B, S, D], heads
    /// concatenated back into [B, S, D].
    pub fn attn_apply(&mut self, w: NodeId, v: NodeId, n_heads: usize) -> NodeId {
        let ws = self.value(w).shape().to_vec();
        let (b, s, d) = dims3(self.value(v));
        assert_eq!(ws, vec![b, n_heads, s, s], "attn_apply: weight shape");
        let dh = d / n_heads;
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let vv = self.value(v).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = Array3::<f64>::zeros((b, s, d));
        for bi in 0..b {
            for h in 0..n_heads {
                let wsl = wv.slice(s![bi, h, .., ..]);
                let vsl = vv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let mut osl = out.slice_mut(s![bi, .., h * dh..(h + 1) * dh]);
                ndarray::linalg::general_mat_mul(1.0, &wsl, &vsl, 0.0, &mut osl);
            }
        }
        let ng = self.needs(w) || self.needs(v);
        self.push(out.into_dyn(), Op::AttnApply { w, v, n_heads }, ng)
    }

    /// Numerically stabilized softmax cross-entropy, summed over unmasked
    /// positions. Returns a [1]-shaped scalar node.
    pub fn ce_masked_sum(
        &mut self,
        logits: NodeId,
        labels: &Array2<i64>,
        mask: &Array2<f64>,
    ) -> Result<NodeId> {
        let (b, s, c) = dims3(self.value(logits));
        if labels.shape() != [b, s] || mask.shape() != [b, s] {
            return Err(Error::Shape(format!(
                "cross-entropy: logits [{b},{s},{c}] vs labels {:?} / mask {:?}",
                labels.shape(),
                mask.shape()
            )));
        }
        let lv = self.value(logits).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut probs = Array3::<f64>::zeros((b, s, c));
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
                let row = lv.slice(s![bi, si, ..]);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (ci, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    probs[[bi, si, ci]] = e;
                    z += e;
                }
                for ci in 0..c {
                    probs[[bi, si, ci]] /= z;
                }
                total += mx + z.ln() - row[label as usize];
            }
        }
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), total);
        let ng = self.needs(logits);
        Ok(self.push(
            v,
            Op::CeMaskedSum {
                logits,
                labels: labels.clone(),
                mask: mask.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of squared entries as a [1]-shaped scalar.
    pub fn sumsq(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).iter().map(|v| v * v).sum();
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), total);
        let ng = self.needs(x);
        self.push(v, Op::SumSq(x), ng)
    }

    /// Inverted dropout with a caller-supplied keep mask whose entries are
    /// 0.0 (dropped) or 1/(1-p) (kept).
    pub fn dropout_with_mask(&mut self, x: NodeId, keep: ArrayD<f64>) -> NodeId {
        assert_eq!(self.value(x).shape(), keep.shape(), "dropout: mask shape");
        let v = self.value(x) * &keep;
        let ng = self.needs(x);
        self.push(v, Op::Dropout { x, keep }, ng)
    }

    /// Reverse sweep from a single-element root node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || g * self.value(*b));
                self.accum(grads, *b, || g * self.value(*a));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, || g.mapv(|v| c * v));
            }
            Op::Relu(a) => {
                let y = &node.value;
                self.accum(grads, *a, || {
                    let mut d = g.clone();
                    d.zip_mut_with(y, |dv, &yv| {
                        if yv <= 0.0 {
                            *dv = 0.0;
                        }
                    });
                    d
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accum(grads, *a, || {
                    let mut d = g.clone();
                    d.zip_mut_with(y, |dv, &yv| *dv *= 1.0 - yv * yv);
                    d
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum(grads, *a, || {
                    let mut d = g.clone();
                    d.zip_mut_with(y, |dv, &yv| *dv *= yv * (1.0 - yv));
                    d
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let d_in = *xs.last().unwrap();
                let rows: usize = xs[..xs.len() - 1].iter().product();
                let d_out = self.value(*w).shape()[0];
                let gv = view2(g, rows, d_out);
                if self.needs(*x) {
                    let wv = view2(self.value(*w), d_out, d_in);
                    let dx = standardize2(gv.dot(&wv));
                    self.accum(grads, *x, || {
                        dx.clone()
                            .into_shape_with_order(xs.as_slice())
                            .unwrap()
                            .into_dyn()
                    });
                }
                if self.needs(*w) {
                    let xv = view2(self.value(*x), rows, d_in);
                    let dw = gv.t().dot(&xv);
                    self.accum(grads, *w, || dw.clone().into_dyn());
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = gv.sum_axis(Axis(0));
                        self.accum(grads, *bid, || db.clone().into_dyn());
                    }
                }
            }
            Op::SliceStep { x, step } => {
                let xs = self.value(*x).shape().to_vec();
                self.accum(grads, *x, || {
                    let mut dx = ArrayD::zeros(ndarray::IxDyn(&xs));
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    dx.view_mut()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .slice_mut(s![.., *step, ..])
                        .assign(&g2);
                    dx
                });
            }
            Op::StackSteps { xs } => {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                for (si, &id) in xs.iter().enumerate() {
                    self.accum(grads, id, || {
                        g3.slice(s![.., si, ..]).to_owned().into_dyn()
                    });
                }
            }
            Op::MaskLast { x, mask } => {
                let d = *node.value.shape().last().unwrap();
                let rows = mask.len();
                self.accum(grads, *x, || {
                    let mut dx = g.clone();
                    {
                        let mut d2 = view2_mut(&mut dx, rows, d);
                        for (mut row, &m) in d2.rows_mut().into_iter().zip(mask.iter()) {
                            if m == 0.0 {
                                row.fill(0.0);
                            } else if m != 1.0 {
                                row.mapv_inplace(|v| v * m);
                            }
                        }
                    }
                    dx
                });
            }
            Op::ConcatLast(a, b) => {
                let last = node.value.ndim() - 1;
                let da = *self.value(*a).shape().last().unwrap();
                let db = *self.value(*b).shape().last().unwrap();
                self.accum(grads, *a, || {
                    g.slice_axis(Axis(last), ndarray::Slice::from(0..da))
                        .as_standard_layout()
                        .to_owned()
                });
                self.accum(grads, *b, || {
                    g.slice_axis(Axis(last), ndarray::Slice::from(da..da + db))
                        .as_standard_layout()
                        .to_owned()
                });
            }
            Op::SliceLast { x, start, len } => {
                let xs = self.value(*x).shape().to_vec();
                let last = xs.len() - 1;
                self.accum(grads, *x, || {
                    let mut dx = ArrayD::zeros(ndarray::IxDyn(&xs));
                    dx.slice_axis_mut(Axis(last), ndarray::Slice::from(*start..start + len))
                        .assign(g);
                    dx
                });
            }
            Op::MulBcastLast { a, x } => {
                let sx = self.value(*x).shape().to_vec();
                let d = *sx.last().unwrap();
                let rows = self.value(*a).len();
                let gv = view2(g, rows, d);
                if self.needs(*x) {
                    let av = view2(self.value(*a), rows, 1);
                    let mut dx = gv.to_owned();
                    for (mut row, a_row) in dx.rows_mut().into_iter().zip(av.rows()) {
                        let sc = a_row[0];
                        row.mapv_inplace(|v| v * sc);
                    }
                    self.accum(grads, *x, || {
                        dx.clone()
                            .into_shape_with_order(sx.as_slice())
                            .unwrap()
                            .into_dyn()
                    });
                }
                if self.needs(*a) {
                    let xv = view2(self.value(*x), rows, d);
                    let mut da = Array2::<f64>::zeros((rows, 1));
                    for (r, (g_row, x_row)) in gv.rows().into_iter().zip(xv.rows()).enumerate() {
                        da[[r, 0]] = g_row.dot(&x_row);
                    }
                    let sa = self.value(*a).shape().to_vec();
                    self.accum(grads, *a, || {
                        da.clone()
                            .into_shape_with_order(sa.as_slice())
                            .unwrap()
                            .into_dyn()
                    });
                }
            }
            Op::AttnScores { q, k, n_heads } => {
                let (b, s, d) = dims3(self.value(*q));
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let qv = self.value(*q).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let kv = self.value(*k).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                if self.needs(*q) {
                    let mut dq = Array3::<f64>::zeros((b, s, d));
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            let gs = g4.slice(s![bi, h, .., ..]);
                            let ks = kv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                            let mut dqs = dq.slice_mut(s![bi, .., h * dh..(h + 1) * dh]);
                            ndarray::linalg::general_mat_mul(scale, &gs, &ks, 1.0, &mut dqs);
                        }
                    }
                    self.accum(grads, *q, || dq.clone().into_dyn());
                }
                if self.needs(*k) {
                    let mut dk = Array3::<f64>::zeros((b, s, d));
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            let gs = g4.slice(s![bi, h, .., ..]);
                            let qs = qv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                            let mut dks = dk.slice_mut(s![bi, .., h * dh..(h + 1) * dh]);
                            ndarray::linalg::general_mat_mul(scale, &gs.t(), &qs, 1.0, &mut dks);
                        }
                    }
                    self.accum(grads, *k, || dk.clone().into_dyn());
                }
            }
            Op::SoftmaxLast { x } => {
                // dx = (g - sum(g * y)) * y, rowwise over the last axis.
                let y = &node.value;
                let l = *y.shape().last().unwrap();
                let rows = y.len() / l;
                self.accum(grads, *x, || {
                    let yv = view2(y, rows, l);
                    let gv = view2(g, rows, l);
                    let mut dx = Array2::<f64>::zeros((rows, l));
                    for r in 0..rows {
                        let yr = yv.row(r);
                        let gr = gv.row(r);
                        let dot = gr.dot(&yr);
                        for j in 0..l {
                            dx[[r, j]] = (gr[j] - dot) * yr[j];
                        }
                    }
                    dx.into_shape_with_order(y.shape())
                        .unwrap()
                        .into_dyn()
                });
            }
            Op::AttnApply { w, v, n_heads } => {
                let (b, s, d) = dims3(self.value(*v));
                let dh = d / n_heads;
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let vv = self.value(*v).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                if self.needs(*w) {
                    let mut dw = ndarray::Array4::<f64>::zeros((b, *n_heads, s, s));
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            let gs = g3.slice(s![bi, .., h * dh..(h + 1) * dh]);
                            let vs = vv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                            let mut dws = dw.slice_mut(s![bi, h, .., ..]);
                            ndarray::linalg::general_mat_mul(1.0, &gs, &vs.t(), 0.0, &mut dws);
                        }
                    }
                    self.accum(grads, *w, || dw.clone().into_dyn());
                }
                if self.needs(*v) {
                    let mut dv = Array3::<f64>::zeros((b, s, d));
                    for bi in 0..b {
                        for h in 0..*n_heads {
                            let gs = g3.slice(s![bi, .., h * dh..(h + 1) * dh]);
                            let ws = wv.slice(s![bi, h, .., ..]);
                            let mut dvs = dv.slice_mut(s![bi, .., h * dh..(h + 1) * dh]);
                            ndarray::linalg::general_mat_mul(1.0, &ws.t(), &gs, 0.0, &mut dvs);
                        }
                    }
                    self.accum(grads, *v, || dv.clone().into_dyn());
                }
            }
            Op::CeMaskedSum {
                logits,
                labels,
                mask,
                probs,
            } => {
                let gs = g.iter().copied().next().unwrap();
                let (b, s, c) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
                self.accum(grads, *logits, || {
                    let mut dl = Array3::<f64>::zeros((b, s, c));
                    for bi in 0..b {
                        for si in 0..s {
                            if mask[[bi, si]] == 0.0 {
                                continue;
                            }
                            let label = labels[[bi, si]] as usize;
                            for ci in 0..c {
                                let onehot = if ci == label { 1.0 } else { 0.0 };
                                dl[[bi, si, ci]] = gs * (probs[[bi, si, ci]] - onehot);
                            }
                        }
                    }
                    dl.into_dyn()
                });
            }
            Op::SumSq(x) => {
                let gs = g.iter().copied().next().unwrap();
                self.accum(grads, *x, || self.value(*x).mapv(|v| 2.0 * gs * v));
            }
            Op::Dropout { x, keep } => {
                self.accum(grads, *x, || g * keep);
            }
        }
    }

    fn accum<F>(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, make: F)
    where
        F: FnOnce() -> ArrayD<f64>,
    {
        if !self.needs(id) {
            return;
        }
        let contribution = make();
        match &mut grads[id.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn dims3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected a 3-D tensor, got {:?}", s);
    (s[0], s[1], s[2])
}
