use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, inv_std: Vec<f32>, xhat: Vec<f32> },
    Relu(Var),
    Tanh(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: usize },
    Concat { a: Var, b: Var },
    Softmax(Var),
    SliceChannels { x: Var, start: usize, end: usize },
    SumChannels(Var),
    MulChannelBroadcast { m: Var, a: Var },
    Add(Var, Var),
    Dense { x: Var, w: Var, b: Var },
    SpectralNorm { w: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32 },
    Loss { x: Var, grad: Tensor },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics recorded by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

/// Reverse-mode tape. Nodes are appended in evaluation order; `backward`
/// walks them in reverse, so the tape can hold several independent roots.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf: its gradient is kept by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Convolution with a `[out, in, k, k]` weight, square kernel and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (co, ci, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
        assert_eq!(kh, kw, "conv2d: only square kernels are supported");
        let geom = ConvGeometry { in_channels: c, in_h: h, in_w: wd, kernel: kh, stride, pad };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            co,
        );
        let value = Tensor::new(&[n, co, geom.out_h(), geom.out_w()], out);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { x, w, b, geom, batch: n }, needs)
    }

    /// Training-mode batch normalization. Returns the output and the batch moments.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchMoments) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xs = self.value(x).data();
        let (mean, var) = kernels::channel_moments(xs, n, c, hw);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let moments = BatchMoments { mean, var, count: n * hw };
        (self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, needs), moments)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f32], var: &[f32]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xs = self.value(x).data();
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::ChannelAffine { x, gamma, beta, inv_std, xhat }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::tanh);
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out);
        let needs = self.needs(x);
        self.push(value, Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::new(&[n, c, h * factor, w * factor], out);
        let needs = self.needs(x);
        self.push(value, Op::Upsample { x, factor }, needs)
    }

    /// Channel concatenation; `a` comes first.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch and spatial dims must agree");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Concat { a, b }, needs)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::softmax_channels(self.value(x).data(), n, c, h * w);
        let value = Tensor::new(&[n, c, h, w], out);
        let needs = self.needs(x);
        self.push(value, Op::Softmax(x), needs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start < end && end <= c, "slice_channels: bad range {start}..{end} of {c}");
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * (end - start) * hw);
        for s in 0..n {
            out.extend_from_slice(&d[(s * c + start) * hw..(s * c + end) * hw]);
        }
        let value = Tensor::new(&[n, end - start, h, w], out);
        let needs = self.needs(x);
        self.push(value, Op::SliceChannels { x, start, end }, needs)
    }

    /// Sums all channels into a single-channel map.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &d[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out);
        let needs = self.needs(x);
        self.push(value, Op::SumChannels(x), needs)
    }

    /// Hadamard product of a `k`-channel map with a single-channel map broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, m: Var, a: Var) -> Var {
        let (n, c, h, w) = self.value(m).dims4();
        assert_eq!(self.value(a).dims4(), (n, 1, h, w), "mul_channel_broadcast: shape mismatch");
        let hw = h * w;
        let (dm, da) = (self.value(m).data(), self.value(a).data());
        let mut out = vec![0.0; dm.len()];
        for s in 0..n {
            let att = &da[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] = dm[off + i] * att[i];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out);
        let needs = self.needs(m) || self.needs(a);
        self.push(value, Op::MulChannelBroadcast { m, a }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Fully connected layer over the flattened per-sample features: `[N, ...] -> [N, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.shape(x)[0];
        let features = self.value(x).len() / n;
        let (o, f) = match self.shape(w) {
            [o, f] => (*o, *f),
            s => panic!("dense: weight must be rank 2, got {s:?}"),
        };
        assert_eq!(f, features, "dense: weight expects {f} features, got {features}");
        let mut out = vec![0.0; n * o];
        kernels::gemm(n, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(&[n, o], out);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Dense { x, w, b }, needs)
    }

    /// Divides `w` (viewed as `rows × rest`) by `sigma = uᵀ W v`, with `u`, `v`
    /// held constant. The gradient includes the path through `sigma`.
    pub fn spectral_norm(&mut self, w: Var, u: &[f32], v: &[f32]) -> Var {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        assert_eq!((u.len(), v.len()), (rows, cols), "spectral_norm: singular vector sizes");
        let d = wt.data();
        let mut sigma = 0.0f64;
        for r in 0..rows {
            let mut acc = 0.0f64;
            for c in 0..cols {
                acc += d[r * cols + c] as f64 * v[c] as f64;
            }
            sigma += u[r] as f64 * acc;
        }
        let sigma = sigma as f32;
        let value = wt.map(|x| x / sigma);
        let needs = self.needs(w);
        self.push(value, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, needs)
    }

    /// Scalar node whose value and input-gradient were computed outside the graph.
    pub fn loss(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "loss: gradient shape must match its input");
        let needs = self.needs(x);
        self.push(Tensor::scalar(value as f32), Op::Loss { x, grad }, needs)
    }

    /// `Σ weight · term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut total = 0.0f32;
        let mut needs = false;
        for &(v, wgt) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum: terms must be scalars");
            total += wgt * self.value(v).data()[0];
            needs |= self.needs(v);
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `root`. Gradients are kept for leaves only.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let wt = self.value(*w);
                let res = kernels::conv2d_backward(
                    self.value(*x).data(),
                    *batch,
                    geom,
                    wt.data(),
                    wt.shape()[0],
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = res.dx {
                    Self::accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if let Some(dw) = res.dweight {
                    Self::accumulate(grads, *w, Tensor::new(wt.shape(), dw));
                }
                if let (Some(b), Some(db)) = (b, res.dbias) {
                    Self::accumulate(grads, *b, Tensor::new(self.shape(*b), db));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let count = (n * hw) as f32;
                let dy = g.data();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch] / count;
                            for i in off..off + hw {
                                dx[i] = k * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new(g.shape(), dx));
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, Tensor::new(&[c], dgamma));
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, Tensor::new(&[c], dbeta));
                }
            }
            Op::ChannelAffine { x, gamma, beta, inv_std, xhat } => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let dy = g.data();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0; dy.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                            dx[i] = dy[i] * gm[ch] * inv_std[ch];
                        }
                    }
                }
                if self.needs(*x) {
                    Self::accumulate(grads, *x, Tensor::new(g.shape(), dx));
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, Tensor::new(&[c], dgamma));
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, Tensor::new(&[c], dbeta));
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = g.data().iter().zip(xs).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                Self::accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                let dx = g.data().iter().zip(ys).map(|(&d, &y)| d * (1.0 - y * y)).collect();
                Self::accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let buf = dx.data_mut();
                for (&idx, &d) in argmax.iter().zip(g.data()) {
                    buf[idx as usize] += d;
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let dx = kernels::upsample_nearest_backward(g.data(), n * c, h, w, *factor);
                Self::accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let d = g.data();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        let off = s * (ca + cb) * hw;
                        da.extend_from_slice(&d[off..off + ca * hw]);
                    }
                    Self::accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let off = s * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&d[off..off + cb * hw]);
                    }
                    Self::accumulate(grads, *b, Tensor::new(&[n, cb, h, w], db));
                }
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = g.dims4();
                let dx = kernels::softmax_channels_backward(node.value.data(), g.data(), n, c, h * w);
                Self::accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::SliceChannels { x, start, end } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let buf = dx.data_mut();
                let width = (end - start) * hw;
                for s in 0..n {
                    buf[(s * c + start) * hw..(s * c + end) * hw]
                        .copy_from_slice(&g.data()[s * width..(s + 1) * width]);
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::SumChannels(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Vec::with_capacity(n * c * hw);
                for s in 0..n {
                    for _ in 0..c {
                        dx.extend_from_slice(&g.data()[s * hw..(s + 1) * hw]);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx));
            }
            Op::MulChannelBroadcast { m, a } => {
                let (n, c, h, w) = self.value(*m).dims4();
                let hw = h * w;
                let (dm, da) = (self.value(*m).data(), self.value(*a).data());
                let dy = g.data();
                if self.needs(*m) {
                    let mut gm = vec![0.0; dm.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for i in 0..hw {
                                gm[off + i] = dy[off + i] * da[s * hw + i];
                            }
                        }
                    }
                    Self::accumulate(grads, *m, Tensor::new(&[n, c, h, w], gm));
                }
                if self.needs(*a) {
                    let mut ga = vec![0.0; n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for i in 0..hw {
                                ga[s * hw + i] += dy[off + i] * dm[off + i];
                            }
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(&[n, 1, h, w], ga));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Dense { x, w, b } => {
                let n = self.shape(*x)[0];
                let (o, f) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, o, f, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                    Self::accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * f];
                    kernels::gemm(o, n, f, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                    Self::accumulate(grads, *w, Tensor::new(&[o, f], dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Self::accumulate(grads, *b, Tensor::new(&[o], db));
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let normalized = node.value.data();
                let gd = g.data();
                let cols = v.len();
                let inner: f64 = gd.iter().zip(normalized).map(|(&a, &b)| a as f64 * b as f64).sum();
                let inner = inner as f32;
                let mut dw = vec![0.0; gd.len()];
                for (r, &ur) in u.iter().enumerate() {
                    for (c, &vc) in v.iter().enumerate() {
                        let idx = r * cols + c;
                        dw[idx] = (gd[idx] - inner * ur * vc) / sigma;
                    }
                }
                Self::accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
            }
            Op::Loss { x, grad } => {
                let mut dx = grad.clone();
                dx.scale(g.data()[0]);
                Self::accumulate(grads, *x, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, wgt) in terms {
                    if self.needs(v) {
                        Self::accumulate(grads, v, Tensor::scalar(wgt * g.data()[0]));
                    }
                }
            }
        }
    }
}
