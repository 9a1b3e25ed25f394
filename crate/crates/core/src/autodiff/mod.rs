//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the recording in reverse and accumulates gradients for every
//! node. All values are dense `ndarray` arrays in double precision.
//!
//! Convolutions are lowered to GEMM via im2col (see [`conv`]); the unrolled
//! matrix is cached on the tape node so the backward pass reuses it.

pub mod conv;
pub mod gradcheck;

use ndarray::{arr0, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4};

use conv::{col2im, conv_out_size, im2col};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul(NodeId, NodeId),
    /// `[m, n] + [n]` broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// `[B, C, H, W] + [C]` broadcast over batch and space.
    AddChanBias(NodeId, NodeId),
    Concat {
        axis: usize,
        parents: Vec<NodeId>,
        widths: Vec<usize>,
    },
    Reshape(NodeId),
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Upsample2(NodeId),
    /// Spatial mean `[B, C, H, W] -> [B, C]`.
    AvgPoolAll(NodeId),
    /// Spatial max `[B, C, H, W] -> [B, C]`; ties go to the lowest index.
    MaxPoolAll {
        x: NodeId,
        winners: Vec<u32>,
    },
    /// Element-wise max over same-shaped nodes; ties go to the lowest branch.
    MaxMany {
        parents: Vec<NodeId>,
        winners: Vec<u32>,
    },
    /// Row gather `table[V, E] -> [B, L, E]`.
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    /// Mean over unmasked rows of `[B, L, E] -> [B, E]`.
    MaskedMeanRows {
        x: NodeId,
        mask: Vec<bool>,
    },
    /// `[B, C] -> [B, C, H, W]` by spatial replication.
    BroadcastSpatial(NodeId),
    /// Fused stable softmax + cross-entropy: `logits [B, C] -> losses [B]`.
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.slots[id.0].take()
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Re-enters the value of `id` as a fresh leaf, cutting the gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a).clone();
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) + s;
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = arr0(self.value(a).sum()).into_dyn();
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let v = arr0(self.value(a).sum() / n).into_dyn();
        self.push(v, Op::Mean(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row_vec(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("add_row_vec lhs 2-d");
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().expect("add_row_vec bias 1-d");
        assert_eq!(av.ncols(), bv.len(), "bias width");
        let v = (&av + &bv).into_dyn();
        self.push(v, Op::AddRowVec(a, bias))
    }

    pub fn add_chan_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().expect("add_chan_bias lhs 4-d");
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().expect("add_chan_bias bias 1-d");
        assert_eq!(av.dim().1, bv.len(), "bias channels");
        let mut v = av.to_owned();
        for (mut chan, b) in v.axis_iter_mut(Axis(1)).zip(bv.iter()) {
            chan += *b;
        }
        self.push(v.into_dyn(), Op::AddChanBias(a, bias))
    }

    pub fn concat(&mut self, axis: usize, parents: &[NodeId]) -> NodeId {
        assert!(!parents.is_empty(), "concat of zero nodes");
        let views: Vec<_> = parents.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let widths = parents.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(
            v,
            Op::Concat {
                axis,
                parents: parents.to_vec(),
                widths,
            },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape size");
        self.push(v, Op::Reshape(a))
    }

    /// Axis permutation; the result is materialized in standard layout.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        assert_eq!(axes.len(), self.value(a).ndim(), "permute rank");
        let v = self
            .value(a)
            .view()
            .permuted_axes(axes.to_vec())
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(
            v,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        )
    }

    /// `x [B, Cin, H, W]` convolved with `w [Cout, Cin, KH, KW]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv input 4-d");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv kernel 4-d");
        let (b, cin, h, wid) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv channel mismatch");
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(wid, kw, stride, pad);

        let cols = im2col(&xv, kh, kw, stride, pad);
        let wmat = wv
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        // [B*OH*OW, Cout] -> [B, OH, OW, Cout] -> [B, Cout, OH, OW]
        let out = cols.dot(&wmat.t());
        let out = out
            .into_shape_with_order((b, oh, ow, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad, cols })
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().expect("upsample input 4-d");
        let (b, c, h, w) = av.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = av[(bi, ci, i, j)];
                        out[(bi, ci, 2 * i, 2 * j)] = v;
                        out[(bi, ci, 2 * i, 2 * j + 1)] = v;
                        out[(bi, ci, 2 * i + 1, 2 * j)] = v;
                        out[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2(a))
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn avg_pool_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().expect("pool input 4-d");
        let (b, c, h, w) = av.dim();
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[(bi, ci)] = av.slice(ndarray::s![bi, ci, .., ..]).sum() / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), Op::AvgPoolAll(a))
    }

    /// Global max pool `[B, C, H, W] -> [B, C]`; ties resolve to the lowest
    /// spatial index so the backward pass is deterministic.
    pub fn max_pool_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix4>().expect("pool input 4-d");
        let (b, c, h, w) = av.dim();
        let mut out = Array2::<f64>::zeros((b, c));
        let mut winners = vec![0u32; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for i in 0..h {
                    for j in 0..w {
                        let v = av[(bi, ci, i, j)];
                        if v > best {
                            best = v;
                            arg = i * w + j;
                        }
                    }
                }
                out[(bi, ci)] = best;
                winners[bi * c + ci] = arg as u32;
            }
        }
        self.push(out.into_dyn(), Op::MaxPoolAll { x: a, winners })
    }

    /// Element-wise maximum over same-shaped nodes. The gradient routes to
    /// the lowest-index argument attaining the maximum.
    pub fn max_many(&mut self, parents: &[NodeId]) -> NodeId {
        assert!(!parents.is_empty(), "max_many of zero nodes");
        let shape = self.value(parents[0]).shape().to_vec();
        for &p in parents {
            assert_eq!(self.value(p).shape(), &shape[..], "max_many shape");
        }
        let n = self.value(parents[0]).len();
        let mut out = self.value(parents[0]).clone();
        let mut winners = vec![0u32; n];
        for (ki, &p) in parents.iter().enumerate().skip(1) {
            let pv = self.value(p);
            for (i, (o, x)) in out.iter_mut().zip(pv.iter()).enumerate() {
                if *x > *o {
                    *o = *x;
                    winners[i] = ki as u32;
                }
            }
        }
        self.push(
            out,
            Op::MaxMany {
                parents: parents.to_vec(),
                winners,
            },
        )
    }

    /// Gathers embedding rows: `table [V, E]`, `ids [B*L]` -> `[B, L, E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], b: usize, l: usize) -> NodeId {
        assert_eq!(ids.len(), b * l, "embedding id count");
        let tv = self.value(table).view().into_dimensionality::<Ix2>().expect("embedding table 2-d");
        let (vocab, e) = tv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((b, l, e));
        for (pos, &id) in ids.iter().enumerate() {
            assert!((id as usize) < vocab, "token id {} out of vocabulary {}", id, vocab);
            let (bi, li) = (pos / l, pos % l);
            out.slice_mut(ndarray::s![bi, li, ..]).assign(&tv.row(id as usize));
        }
        self.push(
            out.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over rows of `[B, L, E]` where `mask` is true; a batch element
    /// with no unmasked rows yields a zero vector.
    pub fn masked_mean_rows(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("masked mean input 3-d");
        let (b, l, e) = xv.dim();
        assert_eq!(mask.len(), b * l, "mask length");
        let mut out = Array2::<f64>::zeros((b, e));
        for bi in 0..b {
            let count = (0..l).filter(|&li| mask[bi * l + li]).count();
            if count == 0 {
                continue;
            }
            for li in 0..l {
                if mask[bi * l + li] {
                    let row = xv.slice(ndarray::s![bi, li, ..]);
                    out.row_mut(bi).scaled_add(1.0 / count as f64, &row);
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    /// Replicates `[B, C]` to `[B, C, H, W]`.
    pub fn broadcast_spatial(&mut self, v: NodeId, h: usize, w: usize) -> NodeId {
        let vv = self.value(v).view().into_dimensionality::<Ix2>().expect("broadcast input 2-d");
        let (b, c) = vv.dim();
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, .., ..]).fill(vv[(bi, ci)]);
            }
        }
        self.push(out.into_dyn(), Op::BroadcastSpatial(v))
    }

    /// Numerically stable softmax cross-entropy; returns per-sample losses
    /// `-ln p[label]` of shape `[B]`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().expect("logits 2-d");
        let (b, c) = lv.dim();
        assert_eq!(labels.len(), b, "label count");
        let mut probs = Array2::<f64>::zeros((b, c));
        let mut losses = ndarray::Array1::<f64>::zeros(b);
        for bi in 0..b {
            let row = lv.row(bi);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            assert!(labels[bi] < c, "label {} out of range {}", labels[bi], c);
            for ci in 0..c {
                probs[(bi, ci)] = exps[ci] / z;
            }
            losses[bi] = -(probs[(bi, labels[bi])]).ln();
        }
        self.push(
            losses.into_dyn(),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Dense layer: `x [B, I] * w [I, O] + b [O]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mm = self.matmul(x, w);
        self.add_row_vec(mm, b)
    }

    fn accumulate(slots: &mut [Option<ArrayD<f64>>], id: NodeId, g: ArrayD<f64>) {
        match &mut slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar node; seeds `d out / d out = 1`.
    pub fn backward(&mut self, out: NodeId) -> Grads {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar");
        let mut slots: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(ArrayD::ones(self.value(out).shape()));

        for idx in (0..=out.0).rev() {
            let g = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    slots[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut slots, a, g.clone());
                    Self::accumulate(&mut slots, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut slots, a, g.clone());
                    Self::accumulate(&mut slots, b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = g * &self.nodes[a.0].value;
                    Self::accumulate(&mut slots, a, ga);
                    Self::accumulate(&mut slots, b, gb);
                }
                Op::Neg(a) => {
                    let a = *a;
                    Self::accumulate(&mut slots, a, -g);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    Self::accumulate(&mut slots, a, g);
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    Self::accumulate(&mut slots, a, g * s);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(&mut slots, a, g * mask);
                }
                Op::LeakyRelu(a, alpha) => {
                    let (a, alpha) = (*a, *alpha);
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { alpha });
                    Self::accumulate(&mut slots, a, g * mask);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let d = self.nodes[idx].value.mapv(|y| 1.0 - y * y);
                    Self::accumulate(&mut slots, a, g * d);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let d = self.nodes[idx].value.mapv(|y| y * (1.0 - y));
                    Self::accumulate(&mut slots, a, g * d);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let d = self.nodes[idx].value.clone();
                    Self::accumulate(&mut slots, a, g * d);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let d = self.nodes[a.0].value.mapv(|x| 1.0 / x);
                    Self::accumulate(&mut slots, a, g * d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let mask = self.nodes[a.0].value.mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                    Self::accumulate(&mut slots, a, g * mask);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let scale = g.iter().copied().next().unwrap();
                    let ga = ArrayD::from_elem(self.nodes[a.0].value.shape(), scale);
                    Self::accumulate(&mut slots, a, ga);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len() as f64;
                    let scale = g.iter().copied().next().unwrap() / n;
                    let ga = ArrayD::from_elem(self.nodes[a.0].value.shape(), scale);
                    Self::accumulate(&mut slots, a, ga);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = gv.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&gv).into_dyn();
                    Self::accumulate(&mut slots, a, ga);
                    Self::accumulate(&mut slots, b, gb);
                }
                Op::AddRowVec(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let gb = gv.sum_axis(Axis(0)).into_dyn();
                    Self::accumulate(&mut slots, a, g.clone());
                    Self::accumulate(&mut slots, bias, gb);
                }
                Op::AddChanBias(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let c = gv.dim().1;
                    let mut gb = ndarray::Array1::<f64>::zeros(c);
                    for (ci, chan) in gv.axis_iter(Axis(1)).enumerate() {
                        gb[ci] = chan.sum();
                    }
                    Self::accumulate(&mut slots, a, g.clone());
                    Self::accumulate(&mut slots, bias, gb.into_dyn());
                }
                Op::Concat { axis, parents, widths } => {
                    let axis = *axis;
                    let parents = parents.clone();
                    let widths = widths.clone();
                    let mut start = 0usize;
                    for (p, w) in parents.iter().zip(widths.iter()) {
                        let gp = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + w))
                            .to_owned();
                        Self::accumulate(&mut slots, *p, gp);
                        start += w;
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let gshape = g.shape().to_vec();
                    let ga = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(&shape[..])
                        .unwrap_or_else(|e| {
                            panic!("reshape backward {gshape:?} -> {shape:?}: {e}")
                        });
                    Self::accumulate(&mut slots, a, ga);
                }
                Op::Permute { a, axes } => {
                    let a = *a;
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let ga = g
                        .view()
                        .permuted_axes(inverse)
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn();
                    Self::accumulate(&mut slots, a, ga);
                }
                Op::Conv2d { x, w, stride, pad, cols } => {
                    let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, cin, h, wid) = xv.dim();
                    let (cout, _, kh, kw) = wv.dim();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (_, _, oh, ow) = gv.dim();
                    // [B, Cout, OH, OW] -> [B*OH*OW, Cout]
                    let gm = gv
                        .permuted_axes([0, 2, 3, 1])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((b * oh * ow, cout))
                        .unwrap();
                    let gw = gm
                        .t()
                        .dot(cols)
                        .into_shape_with_order((cout, cin, kh, kw))
                        .unwrap();
                    let wmat = wv
                        .to_owned()
                        .into_shape_with_order((cout, cin * kh * kw))
                        .unwrap();
                    let gcols = gm.dot(&wmat);
                    let gx = col2im(&gcols, b, cin, h, wid, kh, kw, stride, pad);
                    Self::accumulate(&mut slots, x, gx.into_dyn());
                    Self::accumulate(&mut slots, w, gw.into_dyn());
                }
                Op::Upsample2(a) => {
                    let a = *a;
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut ga = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    ga[(bi, ci, i, j)] = gv[(bi, ci, 2 * i, 2 * j)]
                                        + gv[(bi, ci, 2 * i, 2 * j + 1)]
                                        + gv[(bi, ci, 2 * i + 1, 2 * j)]
                                        + gv[(bi, ci, 2 * i + 1, 2 * j + 1)];
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut slots, a, ga.into_dyn());
                }
                Op::AvgPoolAll(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut ga = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            ga.slice_mut(ndarray::s![bi, ci, .., ..])
                                .fill(gv[(bi, ci)] / (h * w) as f64);
                        }
                    }
                    Self::accumulate(&mut slots, a, ga.into_dyn());
                }
                Op::MaxPoolAll { x, winners } => {
                    let x = *x;
                    let winners = winners.clone();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut ga = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let arg = winners[bi * c + ci] as usize;
                            ga[(bi, ci, arg / w, arg % w)] = gv[(bi, ci)];
                        }
                    }
                    Self::accumulate(&mut slots, x, ga.into_dyn());
                }
                Op::MaxMany { parents, winners } => {
                    let parents = parents.clone();
                    let winners = winners.clone();
                    for (ki, p) in parents.iter().enumerate() {
                        let mut gp = ArrayD::<f64>::zeros(g.shape());
                        let mut any = false;
                        for ((gi, go), &win) in gp.iter_mut().zip(g.iter()).zip(winners.iter()) {
                            if win as usize == ki {
                                *gi = *go;
                                any = true;
                            }
                        }
                        if any {
                            Self::accumulate(&mut slots, *p, gp);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let tshape = self.nodes[table.0].value.shape().to_vec();
                    let e = tshape[1];
                    let mut gt = Array2::<f64>::zeros((tshape[0], e));
                    let g = g.as_standard_layout();
                    let gflat = g.as_slice().expect("embedding grad contiguous");
                    for (pos, &id) in ids.iter().enumerate() {
                        let row = &gflat[pos * e..(pos + 1) * e];
                        let mut trow = gt.row_mut(id as usize);
                        for (t, r) in trow.iter_mut().zip(row.iter()) {
                            *t += *r;
                        }
                    }
                    Self::accumulate(&mut slots, table, gt.into_dyn());
                }
                Op::MaskedMeanRows { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (b, l, e) = (shape[0], shape[1], shape[2]);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut ga = ndarray::Array3::<f64>::zeros((b, l, e));
                    for bi in 0..b {
                        let count = (0..l).filter(|&li| mask[bi * l + li]).count();
                        if count == 0 {
                            continue;
                        }
                        for li in 0..l {
                            if mask[bi * l + li] {
                                ga.slice_mut(ndarray::s![bi, li, ..])
                                    .scaled_add(1.0 / count as f64, &gv.row(bi));
                            }
                        }
                    }
                    Self::accumulate(&mut slots, x, ga.into_dyn());
                }
                Op::BroadcastSpatial(v) => {
                    let v = *v;
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, _, _) = gv.dim();
                    let mut ga = Array2::<f64>::zeros((b, c));
                    for bi in 0..b {
                        for ci in 0..c {
                            ga[(bi, ci)] = gv.slice(ndarray::s![bi, ci, .., ..]).sum();
                        }
                    }
                    Self::accumulate(&mut slots, v, ga.into_dyn());
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let mut gl = probs.clone();
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    for (bi, &label) in labels.iter().enumerate() {
                        gl[(bi, label)] -= 1.0;
                        let gb = gv[bi];
                        gl.row_mut(bi).mapv_inplace(|x| x * gb);
                    }
                    Self::accumulate(&mut slots, logits, gl.into_dyn());
                }
            }
        }
        Grads { slots }
    }
}
