//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients. Ops are an enum
//! rather than closures so the walk is borrow-friendly and deterministic.
//!
//! Discrete choices made during the forward pass (neighbor lists,
//! interpolation weights, attention mask bits) enter as op payloads, not as
//! differentiable nodes: they are piecewise constant in the parameters, so
//! their true derivative contribution is zero almost everywhere.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, sigmoid, silu, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Inverse-distance interpolation support: up to three source rows and their
/// normalized weights per output row.
#[derive(Debug, Clone)]
pub struct InterpSupport {
    pub idx: [usize; 3],
    pub w: [f64; 3],
    pub k: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    AddConst(usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceCols { src: usize, from: usize, to: usize },
    GatherRows { src: usize, idx: Vec<usize> },
    Silu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize, eps: f64 },
    MeanAll(usize),
    SumAll(usize),
    GroupMaxPool { src: usize, argmax: Vec<usize> },
    WeightedGather { src: usize, support: Vec<InterpSupport> },
    CrossEntropyRows { logits: usize, targets: Vec<u32>, mask: Vec<bool> },
    BceWithLogits { logits: usize, target: Tensor },
    DiceLoss { logits: usize, target: Tensor, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    /// `a (R x C) + b (1 x C)` broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (bias, av) = (self.value(b), self.value(a));
        debug_assert_eq!(bias.rows, 1);
        debug_assert_eq!(bias.cols, av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (o, &bv) in row.iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBroadcast(a.0, b.0))
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(c);
        self.push(out, Op::AddConst(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!(av.shape(), bv.shape());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nn(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!(av.cols, bv.cols);
        let mut data = Vec::with_capacity(av.data.len() + bv.data.len());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(out, Op::ConcatRows(a.0, b.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!(av.rows, bv.rows);
        let mut out = Tensor::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            out.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, to - from);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[from..to]);
        }
        self.push(out, Op::SliceCols { src: a.0, from, to })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows { src: a.0, idx })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    /// Row-wise standardization followed by a learned per-column affine.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        debug_assert_eq!(gv.rows, 1);
        debug_assert_eq!(bv.rows, 1);
        debug_assert_eq!(gv.cols, xv.cols);
        let n = xv.cols as f64;
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            let orow = out.row_mut(r);
            for c in 0..xv.cols {
                orow[c] = (row[c] - mu) / s * gv.data[c] + bv.data[c];
            }
        }
        self.push(out, Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0, eps })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data.iter().sum::<f64>() / av.data.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// Feature-wise max over row groups. `groups[i]` lists the source rows
    /// pooled into output row `i`; ties pick the lowest row index.
    pub fn group_max_pool(&mut self, src: Var, groups: &[Vec<usize>]) -> Var {
        let sv = self.value(src);
        let cols = sv.cols;
        let mut out = Tensor::zeros(groups.len(), cols);
        let mut argmax = vec![0usize; groups.len() * cols];
        for (gi, group) in groups.iter().enumerate() {
            debug_assert!(!group.is_empty(), "empty pooling group");
            let orow = out.row_mut(gi);
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = group[0];
                for &r in group {
                    let v = sv.at(r, c);
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                orow[c] = best;
                argmax[gi * cols + c] = best_row;
            }
        }
        self.push(out, Op::GroupMaxPool { src: src.0, argmax })
    }

    /// `out[i,:] = sum_k w[i][k] * src[idx[i][k], :]` with fixed weights.
    pub fn weighted_gather(&mut self, src: Var, support: Vec<InterpSupport>) -> Var {
        let sv = self.value(src);
        let mut out = Tensor::zeros(support.len(), sv.cols);
        for (i, s) in support.iter().enumerate() {
            let orow = out.row_mut(i);
            for k in 0..s.k {
                let srow = sv.row(s.idx[k]);
                let w = s.w[k];
                for (o, &x) in orow.iter_mut().zip(srow) {
                    *o += w * x;
                }
            }
        }
        self.push(out, Op::WeightedGather { src: src.0, support })
    }

    /// Mean token-level cross-entropy over the rows with `mask` set;
    /// an all-false mask yields 0.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<u32>, mask: Vec<bool>) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.rows, targets.len());
        debug_assert_eq!(lv.rows, mask.len());
        let count = mask.iter().filter(|m| **m).count();
        let mut total = 0.0;
        if count > 0 {
            for r in 0..lv.rows {
                if !mask[r] {
                    continue;
                }
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += logsum - row[targets[r] as usize];
            }
            total /= count as f64;
        }
        self.push(Tensor::scalar(total), Op::CrossEntropyRows { logits: logits.0, targets, mask })
    }

    /// Mean binary cross-entropy on `sigmoid(logits)` over all cells.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.shape(), target.shape());
        let n = lv.data.len() as f64;
        let mut total = 0.0;
        for (&x, &t) in lv.data.iter().zip(&target.data) {
            // max(x,0) - x*t + ln(1 + exp(-|x|)) is the stable form.
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(total / n);
        self.push(out, Op::BceWithLogits { logits: logits.0, target })
    }

    /// Soft Dice loss on `sigmoid(logits)`, averaged over columns.
    pub fn dice_loss(&mut self, logits: Var, target: Tensor, eps: f64) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.shape(), target.shape());
        let q = lv.cols;
        let mut total = 0.0;
        for c in 0..q {
            let (mut s_pg, mut s_p, mut s_g) = (0.0, 0.0, 0.0);
            for r in 0..lv.rows {
                let p = sigmoid(lv.at(r, c));
                let g = target.at(r, c);
                s_pg += p * g;
                s_p += p;
                s_g += g;
            }
            total += 1.0 - (2.0 * s_pg + eps) / (s_p + s_g + eps);
        }
        let out = Tensor::scalar(total / q as f64);
        self.push(out, Op::DiceLoss { logits: logits.0, target, eps })
    }

    /// Runs the backward pass from a scalar `loss` node and returns one
    /// gradient slot per tape node (filled only where gradients flowed).
    pub fn backward(&mut self, loss: Var) -> Gradients {
        debug_assert_eq!(self.value(loss).shape(), (1, 1));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], target: usize, update: Tensor| {
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&update),
                slot @ None => *slot = Some(update),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(a, b) => {
                acc(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, &gv) in db.data.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(grads, *b, db);
            }
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(grads, *a, matmul_nt(g, bv));
                acc(grads, *b, matmul_tn(av, g));
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::ConcatRows(a, b) => {
                let ar = self.nodes[*a].value.rows;
                let da = Tensor::from_vec(ar, g.cols, g.data[..ar * g.cols].to_vec());
                let db =
                    Tensor::from_vec(g.rows - ar, g.cols, g.data[ar * g.cols..].to_vec());
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[*a].value.cols;
                let mut da = Tensor::zeros(g.rows, ac);
                let mut db = Tensor::zeros(g.rows, g.cols - ac);
                for r in 0..g.rows {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::SliceCols { src, from, to } => {
                let sv = &self.nodes[*src].value;
                let mut da = Tensor::zeros(sv.rows, sv.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[*from..*to].copy_from_slice(g.row(r));
                }
                acc(grads, *src, da);
            }
            Op::GatherRows { src, idx } => {
                let sv = &self.nodes[*src].value;
                let mut da = Tensor::zeros(sv.rows, sv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    let drow = da.row_mut(i);
                    for (d, &gv) in drow.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(grads, *src, da);
            }
            Op::Silu(a) => {
                let av = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&av.data)
                        .map(|(&gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                );
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                let da = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&yv.data).map(|(&gv, &y)| gv * y * (1.0 - y)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let yv = &self.nodes[id].value;
                let mut da = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let yrow = yv.row(r);
                    let grow = g.row(r);
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    let drow = da.row_mut(r);
                    for c in 0..g.cols {
                        drow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = xv.cols as f64;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dgain = Tensor::zeros(1, xv.cols);
                let mut dbias = Tensor::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let grow = g.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; xv.cols];
                    let mut dxhat = vec![0.0; xv.cols];
                    for c in 0..xv.cols {
                        xhat[c] = (row[c] - mu) / s;
                        dxhat[c] = grow[c] * gv.data[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                        dgain.data[c] += grow[c] * xhat[c];
                        dbias.data[c] += grow[c];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    let drow = dx.row_mut(r);
                    for c in 0..xv.cols {
                        drow[c] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / s;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::MeanAll(a) => {
                let av = &self.nodes[*a].value;
                let scale = g.item() / av.data.len() as f64;
                acc(grads, *a, Tensor::from_vec(av.rows, av.cols, vec![scale; av.data.len()]));
            }
            Op::SumAll(a) => {
                let av = &self.nodes[*a].value;
                let scale = g.item();
                acc(grads, *a, Tensor::from_vec(av.rows, av.cols, vec![scale; av.data.len()]));
            }
            Op::GroupMaxPool { src, argmax } => {
                let sv = &self.nodes[*src].value;
                let mut da = Tensor::zeros(sv.rows, sv.cols);
                for gi in 0..g.rows {
                    for c in 0..g.cols {
                        *da.at_mut(argmax[gi * g.cols + c], c) += g.at(gi, c);
                    }
                }
                acc(grads, *src, da);
            }
            Op::WeightedGather { src, support } => {
                let sv = &self.nodes[*src].value;
                let mut da = Tensor::zeros(sv.rows, sv.cols);
                for (i, s) in support.iter().enumerate() {
                    let grow = g.row(i);
                    for k in 0..s.k {
                        let drow = da.row_mut(s.idx[k]);
                        let w = s.w[k];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += w * gv;
                        }
                    }
                }
                acc(grads, *src, da);
            }
            Op::CrossEntropyRows { logits, targets, mask } => {
                let lv = &self.nodes[*logits].value;
                let count = mask.iter().filter(|m| **m).count();
                let mut da = Tensor::zeros(lv.rows, lv.cols);
                if count > 0 {
                    let scale = g.item() / count as f64;
                    for r in 0..lv.rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let drow = da.row_mut(r);
                        for c in 0..lv.cols {
                            let p = (row[c] - max).exp() / sum;
                            drow[c] = scale * (p - (c == targets[r] as usize) as i32 as f64);
                        }
                    }
                }
                acc(grads, *logits, da);
            }
            Op::BceWithLogits { logits, target } => {
                let lv = &self.nodes[*logits].value;
                let scale = g.item() / lv.data.len() as f64;
                let da = Tensor::from_vec(
                    lv.rows,
                    lv.cols,
                    lv.data
                        .iter()
                        .zip(&target.data)
                        .map(|(&x, &t)| scale * (sigmoid(x) - t))
                        .collect(),
                );
                acc(grads, *logits, da);
            }
            Op::DiceLoss { logits, target, eps } => {
                let lv = &self.nodes[*logits].value;
                let q = lv.cols;
                let mut da = Tensor::zeros(lv.rows, lv.cols);
                let gscale = g.item() / q as f64;
                for c in 0..q {
                    let (mut s_pg, mut s_p, mut s_g) = (0.0, 0.0, 0.0);
                    for r in 0..lv.rows {
                        let p = sigmoid(lv.at(r, c));
                        let t = target.at(r, c);
                        s_pg += p * t;
                        s_p += p;
                        s_g += t;
                    }
                    let num = 2.0 * s_pg + eps;
                    let den = s_p + s_g + eps;
                    for r in 0..lv.rows {
                        let p = sigmoid(lv.at(r, c));
                        let t = target.at(r, c);
                        // d(1 - num/den)/dp = (num - 2*t*den) / den^2
                        let dp = (num - 2.0 * t * den) / (den * den);
                        *da.at_mut(r, c) = gscale * dp * p * (1.0 - p);
                    }
                }
                acc(grads, *logits, da);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Loss built from a handful of chained ops; gradient checked against
    /// central differences on every input.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a0 = rand_tensor(&mut rng, 3, 4);
        let b0 = rand_tensor(&mut rng, 4, 5);
        let c0 = rand_tensor(&mut rng, 1, 5);
        let inputs = vec![a0, b0, c0];
        let max_rel = finite_difference_check(&inputs, |t, vars| {
            let m = t.matmul(vars[0], vars[1]);
            let biased = t.add_row_broadcast(m, vars[2]);
            let act = t.silu(biased);
            let sm = t.softmax_rows(act);
            let sq = t.mul(sm, act);
            t.mean_all(sq)
        });
        assert!(max_rel < 1e-7, "max rel err {max_rel}");
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 4, 6);
        let gain = rand_tensor(&mut rng, 1, 6);
        let bias = rand_tensor(&mut rng, 1, 6);
        let max_rel = finite_difference_check(&[x, gain, bias], |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 2, 4);
        let max_rel = finite_difference_check(&[a, b], |t, v| {
            let cat = t.concat_rows(v[0], v[1]);
            let g = t.gather_rows(cat, vec![0, 4, 2, 4]);
            let s = t.slice_cols(g, 1, 3);
            let tr = t.transpose(s);
            let prod = t.matmul(tr, s);
            let sig = t.sigmoid(prod);
            t.sum_all(sig)
        });
        assert!(max_rel < 1e-7, "max rel err {max_rel}");
    }

    #[test]
    fn pooling_and_interp_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = rand_tensor(&mut rng, 6, 3);
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5]];
        let support = vec![
            InterpSupport { idx: [0, 1, 2], w: [0.5, 0.3, 0.2], k: 3 },
            InterpSupport { idx: [2, 0, 0], w: [0.9, 0.1, 0.0], k: 2 },
        ];
        let max_rel = finite_difference_check(&[src], move |t, v| {
            let pooled = t.group_max_pool(v[0], &groups);
            let interp = t.weighted_gather(pooled, support.clone());
            let act = t.silu(interp);
            t.mean_all(act)
        });
        assert!(max_rel < 1e-7, "max rel err {max_rel}");
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, 5, 3);
        let target = Tensor::from_vec(
            5,
            3,
            (0..15).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        );
        let t2 = target.clone();
        let max_rel = finite_difference_check(&[logits.clone()], move |t, v| {
            let bce = t.bce_with_logits(v[0], target.clone());
            let dice = t.dice_loss(v[0], t2.clone(), 1.0);
            let wb = t.scale(bce, 2.0);
            let wd = t.scale(dice, 0.5);
            t.add(wb, wd)
        });
        assert!(max_rel < 1e-7, "max rel err {max_rel}");

        let max_rel = finite_difference_check(&[logits], |t, v| {
            t.cross_entropy_rows(v[0], vec![0, 2, 1, 0, 2], vec![true, true, false, true, false])
        });
        assert!(max_rel < 1e-7, "max rel err {max_rel}");
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::zeros(2, 4));
        let ce = t.cross_entropy_rows(logits, vec![1, 3], vec![true, true]);
        assert!((t.value(ce).item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_loss_mask_gives_zero() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::zeros(2, 4));
        let ce = t.cross_entropy_rows(logits, vec![1, 3], vec![false, false]);
        assert_eq!(t.value(ce).item(), 0.0);
        let g = t.backward(ce);
        assert!(g.get(Var(0)).unwrap().data.iter().all(|&v| v == 0.0));
    }
}
