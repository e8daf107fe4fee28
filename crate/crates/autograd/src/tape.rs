use crate::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f32>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    BiasAdd(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f32),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, invstd: Vec<f32> },
    BatchNormFrozen { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, invstd: Vec<f32> },
    ChannelAffine { x: Var, scale: Vec<f32> },
    ChannelMoments { x: Var, mean: Vec<f32> },
    Embedding { table: Var, idx: Vec<usize> },
    StraightThrough { x: Var, pass: Vec<bool> },
    Softmax(Var),
    LogSoftmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<f32> },
    Sum(Var),
    Mean(Var),
    Nll { logp: Var, labels: Vec<usize> },
    ShortcutPad { x: Var, stride: usize, pad_c: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Operations panic on shape mismatches: callers validate user-facing shapes
/// before building a graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `(batch, channels, spatial)` view of a rank-2 `[N, C]` or rank-4 `[N, C, H, W]` shape.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("expected rank-2 or rank-4 tensor, got {shape:?}"),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "expected a matrix, got {:?}", t.shape());
    (t.dim(0), t.dim(1))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Trainable leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f32) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Adds a per-channel bias `[C]` to a `[N, C]` or `[N, C, H, W]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        let bv = self.value(bias);
        assert_eq!(bv.numel(), c, "bias width");
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let b = bv.data()[ch];
                for v in &mut data[(i * c + ch) * s..][..s] {
                    *v += b;
                }
            }
        }
        self.push(out, Op::BiasAdd(x, bias), &[x, bias])
    }

    /// Matrix product of two rank-2 values, optionally transposing either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = rows_cols(self.value(a));
        let (br, bc) = rows_cols(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        let mut am = Mat::new(self.value(a).data(), ar, ac);
        let mut bm = Mat::new(self.value(b).data(), br, bc);
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        gemm(1.0, am, bm, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out).expect("gemm output");
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, w, false, true);
        match b {
            Some(b) => self.bias_add(y, b),
            None => y,
        }
    }

    /// 2-D cross-correlation of `x: [N, C, H, W]` with square kernels `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.rank(), 4, "conv2d input rank");
        assert_eq!(wv.rank(), 4, "conv2d weight rank");
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oc, wc, k, k2) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_per = c * h * wd;
        let out_per = oc * ncols;
        let mut out = vec![0.0; n * out_per];
        let mut cols = vec![0.0; rows * ncols];
        for i in 0..n {
            im2col(&xv.data()[i * in_per..(i + 1) * in_per], &geom, &mut cols);
            gemm(
                1.0,
                Mat::new(wv.data(), oc, rows),
                Mat::new(&cols, rows, ncols),
                0.0,
                &mut out[i * out_per..(i + 1) * out_per],
            );
        }
        let value = Tensor::new(&[n, oc, geom.out_h, geom.out_w], out).expect("conv output");
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::ln);
        self.push(value, Op::Log(a), &[a])
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), &[a])
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rank(), 4, "upsample input rank");
        let (n, c, h, w) = (av.dim(0), av.dim(1), av.dim(2), av.dim(3));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &av.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out).expect("upsample output");
        self.push(value, Op::Upsample2x(a), &[a])
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c, s) = channel_layout(av.shape());
        let out: Vec<f32> = av
            .data()
            .chunks(s)
            .map(|plane| plane.iter().sum::<f32>() / s as f32)
            .collect();
        let value = Tensor::new(&[n, c], out).expect("pool output");
        self.push(value, Op::GlobalAvgPool(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape size");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Batch norm with statistics measured on this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        let m = n * s;
        let (mean, var) = channel_moments(xv.data(), n, c, s);
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let (mu, is, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for v in &mut data[(i * c + ch) * s..][..s] {
                    *v = (*v - mu) * is * gg + bb;
                }
            }
        }
        let stats = BatchStats {
            mean,
            var,
            count: m,
        };
        let var_out = self.push(out, Op::BatchNorm { x, gamma, beta, invstd }, &[x, gamma, beta]);
        (var_out, stats)
    }

    /// Batch norm using externally supplied (running) statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        assert_eq!(mean.len(), c);
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let (mu, is, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for v in &mut data[(i * c + ch) * s..][..s] {
                    *v = (*v - mu) * is * gg + bb;
                }
            }
        }
        let op = Op::BatchNormFrozen {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            invstd,
        };
        self.push(out, op, &[x, gamma, beta])
    }

    /// Constant per-channel affine map `x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        assert!(scale.len() == c && shift.len() == c, "affine width");
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut data[(i * c + ch) * s..][..s] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        let op = Op::ChannelAffine {
            x,
            scale: scale.to_vec(),
        };
        self.push(out, op, &[x])
    }

    /// Per-channel batch mean and biased variance, returned as a `[2, C]` tensor.
    pub fn channel_moments(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_layout(xv.shape());
        let (mean, var) = channel_moments(xv.data(), n, c, s);
        let mut data = mean.clone();
        data.extend_from_slice(&var);
        let value = Tensor::new(&[2, c], data).expect("moments output");
        self.push(value, Op::ChannelMoments { x, mean }, &[x])
    }

    /// Gathers rows of `table: [V, D]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let (vocab, d) = rows_cols(tv);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < vocab, "embedding index {i} out of range {vocab}");
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[idx.len(), d], out).expect("embedding output");
        let op = Op::Embedding {
            table,
            idx: idx.to_vec(),
        };
        self.push(value, op, &[table])
    }

    /// Emits `value` in the forward pass and routes the upstream gradient to `x`
    /// unchanged where `pass` is set and blocks it elsewhere.
    pub fn straight_through(&mut self, x: Var, value: Tensor, pass: Vec<bool>) -> Var {
        assert_eq!(self.value(x).shape(), value.shape(), "straight-through shape");
        assert_eq!(pass.len(), value.numel());
        self.push(value, Op::StraightThrough { x, pass }, &[x])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), false);
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), true);
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = rows_cols(av);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c.max(1)).take(r) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::L2NormalizeRows { x: a, norms }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.data().iter().sum::<f32>() / av.numel() as f32);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Var {
        let lv = self.value(logp);
        let (r, c) = rows_cols(lv);
        assert_eq!(r, labels.len(), "nll batch size");
        let total: f32 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                assert!(y < c, "label {y} out of range {c}");
                -lv.data()[i * c + y]
            })
            .sum();
        let value = Tensor::scalar(total / r.max(1) as f32);
        let op = Op::Nll {
            logp,
            labels: labels.to_vec(),
        };
        self.push(value, op, &[logp])
    }

    /// Parameter-free residual shortcut: spatial subsampling plus zero channel padding.
    pub fn shortcut_pad(&mut self, x: Var, stride: usize, pad_c: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let oc = c + 2 * pad_c;
        let mut out = vec![0.0; n * oc * oh * ow];
        for i in 0..n {
            for ch in 0..c {
                let src = &xv.data()[(i * c + ch) * h * w..][..h * w];
                let dst = &mut out[(i * oc + ch + pad_c) * oh * ow..][..oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        dst[y * ow + x] = src[y * stride * w + x * stride];
                    }
                }
            }
        }
        let value = Tensor::new(&[n, oc, oh, ow], out).expect("shortcut output");
        self.push(value, Op::ShortcutPad { x, stride, pad_c }, &[x])
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.value(*a).shape()).expect("same size");
                self.accumulate(grads, *a, shaped);
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (n, c, s) = channel_layout(g.shape());
                    let mut gb = vec![0.0; c];
                    for i in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += g.data()[(i * c + ch) * s..][..s].iter().sum::<f32>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[c], gb).expect("bias grad"));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ar, ac) = rows_cols(av);
                let (br, bc) = rows_cols(bv);
                let (m, n) = rows_cols(g);
                let gm = Mat::new(g.data(), m, n);
                if self.wants(*a) {
                    // dA_logical = G @ B_logical^T; stored A may be transposed.
                    let bm = Mat::new(bv.data(), br, bc);
                    let b_logical = if *tb { bm.t() } else { bm };
                    let mut ga = vec![0.0; ar * ac];
                    if *ta {
                        gemm(1.0, b_logical, gm.t(), 0.0, &mut ga);
                    } else {
                        gemm(1.0, gm, b_logical.t(), 0.0, &mut ga);
                    }
                    self.accumulate(grads, *a, Tensor::new(&[ar, ac], ga).expect("matmul grad"));
                }
                if self.wants(*b) {
                    let am = Mat::new(av.data(), ar, ac);
                    let a_logical = if *ta { am.t() } else { am };
                    let mut gb = vec![0.0; br * bc];
                    if *tb {
                        gemm(1.0, gm.t(), a_logical, 0.0, &mut gb);
                    } else {
                        gemm(1.0, a_logical.t(), gm, 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[br, bc], gb).expect("matmul grad"));
                }
            }
            Op::Conv2d { x, w, geom } => self.conv2d_backward(*x, *w, geom, g, grads),
            Op::Relu(a) => {
                let gx = zip_map(g, out, |gv, y| if y > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let gx = zip_map(g, out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, gx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y)),
            Op::Log(a) => {
                let gx = zip_map(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, gx);
            }
            Op::ClampMin(a, floor) => {
                let gx = zip_map(g, self.value(*a), |gv, x| if x > *floor { gv } else { 0.0 });
                self.accumulate(grads, *a, gx);
            }
            Op::Upsample2x(a) => {
                let av = self.value(*a);
                let (n, c, h, w) = (av.dim(0), av.dim(1), av.dim(2), av.dim(3));
                let ow = 2 * w;
                let mut gx = vec![0.0; av.numel()];
                for plane in 0..n * c {
                    let src = &g.data()[plane * 4 * h * w..][..4 * h * w];
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for y in 0..2 * h {
                        for x in 0..ow {
                            dst[(y / 2) * w + x / 2] += src[y * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), gx).expect("upsample grad"));
            }
            Op::GlobalAvgPool(a) => {
                let av = self.value(*a);
                let (_, _, s) = channel_layout(av.shape());
                let mut gx = Vec::with_capacity(av.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv / s as f32).take(s));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), gx).expect("pool grad"));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                invstd,
            } => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv.shape());
                let m = (n * s) as f32;
                let gam = self.value(*gamma).data();
                let (mean, _) = channel_moments(xv.data(), n, c, s);
                let xhat = |base: usize, k: usize, ch: usize| (xv.data()[base + k] - mean[ch]) * invstd[ch];
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for k in 0..s {
                            let gy = g.data()[base + k];
                            sum_dy[ch] += gy;
                            sum_dy_xhat[ch] += gy * xhat(base, k, ch);
                        }
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; xv.numel()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let k1 = gam[ch] * invstd[ch] / m;
                            for k in 0..s {
                                gx[base + k] = k1
                                    * (m * g.data()[base + k] - sum_dy[ch] - xhat(base, k, ch) * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx).expect("bn grad"));
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat).expect("bn grad"));
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy).expect("bn grad"));
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv.shape());
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                let want_x = self.wants(*x);
                let mut gx = if want_x { vec![0.0; xv.numel()] } else { Vec::new() };
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        let k1 = gam[ch] * invstd[ch];
                        for k in 0..s {
                            let gy = g.data()[base + k];
                            let xhat = (xv.data()[base + k] - mean[ch]) * invstd[ch];
                            sum_dy[ch] += gy;
                            sum_dy_xhat[ch] += gy * xhat;
                            if want_x {
                                gx[base + k] = gy * k1;
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx).expect("bn grad"));
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat).expect("bn grad"));
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy).expect("bn grad"));
            }
            Op::ChannelAffine { x, scale } => {
                let (n, c, s) = channel_layout(g.shape());
                let mut gx = g.clone();
                let data = gx.data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        for v in &mut data[(i * c + ch) * s..][..s] {
                            *v *= scale[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelMoments { x, mean } => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv.shape());
                let m = (n * s) as f32;
                let mut gx = vec![0.0; xv.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let gm = g.data()[ch] / m;
                        let gv = 2.0 * g.data()[c + ch] / m;
                        let base = (i * c + ch) * s;
                        for k in 0..s {
                            gx[base + k] = gm + gv * (xv.data()[base + k] - mean[ch]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), gx).expect("moments grad"));
            }
            Op::Embedding { table, idx } => {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut gt = Tensor::zeros(tv.shape());
                let data = gt.data_mut();
                for (row, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        data[i * d + k] += g.data()[row * d + k];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::StraightThrough { x, pass } => {
                let data = g
                    .data()
                    .iter()
                    .zip(pass)
                    .map(|(&gv, &p)| if p { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("ste grad"));
            }
            Op::Softmax(a) => {
                let (r, c) = rows_cols(out);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gx[i * c + k] = y[k] * (gy[k] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&[r, c], gx).expect("softmax grad"));
            }
            Op::LogSoftmax(a) => {
                let (r, c) = rows_cols(out);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let total: f32 = gy.iter().sum();
                    for k in 0..c {
                        gx[i * c + k] = gy[k] - y[k].exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&[r, c], gx).expect("log_softmax grad"));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = rows_cols(out);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gx[i * c + k] = (gy[k] - y[k] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx).expect("normalize grad"));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item() / av.numel() as f32;
                self.accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::Nll { logp, labels } => {
                let lv = self.value(*logp);
                let (r, c) = rows_cols(lv);
                let mut gx = Tensor::zeros(lv.shape());
                let gv = -g.item() / r.max(1) as f32;
                for (i, &y) in labels.iter().enumerate() {
                    gx.data_mut()[i * c + y] = gv;
                }
                self.accumulate(grads, *logp, gx);
            }
            Op::ShortcutPad { x, stride, pad_c } => {
                let xv = self.value(*x);
                let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let (oc, oh, ow) = (out.dim(1), out.dim(2), out.dim(3));
                let mut gx = vec![0.0; xv.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let src = &g.data()[(i * oc + ch + pad_c) * oh * ow..][..oh * ow];
                        let dst = &mut gx[(i * c + ch) * h * w..][..h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[y * stride * w + xx * stride] = src[y * ow + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), gx).expect("shortcut grad"));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, geom: &ConvGeom, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.dim(0);
        let oc = wv.dim(0);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_per = geom.in_c * geom.in_h * geom.in_w;
        let out_per = oc * ncols;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut cols = vec![0.0; rows * ncols];
        let mut gw = if want_w { vec![0.0; wv.numel()] } else { Vec::new() };
        let mut gx = if want_x { vec![0.0; xv.numel()] } else { Vec::new() };
        for i in 0..n {
            let gy = Mat::new(&g.data()[i * out_per..(i + 1) * out_per], oc, ncols);
            if want_w {
                im2col(&xv.data()[i * in_per..(i + 1) * in_per], geom, &mut cols);
                gemm(1.0, gy, Mat::new(&cols, rows, ncols).t(), 1.0, &mut gw);
            }
            if want_x {
                gemm(1.0, Mat::new(wv.data(), oc, rows).t(), gy, 0.0, &mut cols);
                col2im(&cols, geom, &mut gx[i * in_per..(i + 1) * in_per]);
            }
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wv.shape(), gw).expect("conv grad"));
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xv.shape(), gx).expect("conv grad"));
        }
    }
}

fn channel_moments(data: &[f32], n: usize, c: usize, s: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    for i in 0..n {
        for (ch, acc) in mean.iter_mut().enumerate() {
            *acc += data[(i * c + ch) * s..][..s].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for (ch, acc) in var.iter_mut().enumerate() {
            let mu = mean[ch];
            *acc += data[(i * c + ch) * s..][..s]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (
        mean.into_iter().map(|v| v as f32).collect(),
        var.into_iter().map(|v| v as f32).collect(),
    )
}

fn softmax_rows(t: &Tensor, log: bool) -> Tensor {
    let (r, c) = rows_cols(t);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c.max(1)).take(r) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        if log {
            let log_denom = denom.ln();
            row.iter_mut().for_each(|v| *v = *v - max - log_denom);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / denom);
        }
    }
    out
}
