use super::conv::{col2im, im2col};
use super::resample::{resample_3d, resample_3d_transpose, AxisResampler};
use super::{Real, Tensor};

pub type NodeId = usize;

const GROUP_NORM_EPS: f64 = 1e-5;

/// Values that were treated as constants during one forward pass.
///
/// A pass recorded with [`Graph::record`] can be replayed so that token
/// assignments and every stop-gradient value stay fixed while other inputs
/// are perturbed. Finite differences of the replayed function then agree with
/// the analytic gradient of the original pass.
#[derive(Clone, Debug, Default)]
pub struct Replay<T> {
    pub tokens: Vec<Vec<usize>>,
    pub constants: Vec<Tensor<T>>,
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: T,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Resample {
        x: NodeId,
        axes: Box<[AxisResampler; 3]>,
    },
    Lookup {
        table: NodeId,
        indices: Vec<usize>,
    },
    StraightThrough {
        latent: NodeId,
    },
    MeanSquaredError {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    log: Replay<T>,
    replay: Option<Replay<T>>,
    token_cursor: usize,
    constant_cursor: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            log: Replay::default(),
            replay: None,
            token_cursor: 0,
            constant_cursor: 0,
        }
    }

    /// A graph that replays the constants and tokens of an earlier pass.
    pub fn replaying(replay: Replay<T>) -> Self {
        Self {
            replay: Some(replay),
            ..Self::new()
        }
    }

    pub fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    /// Everything treated as constant during this pass, in call order.
    pub fn record(&self) -> &Replay<T> {
        &self.log
    }

    pub fn into_record(self) -> Replay<T> {
        self.log
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf without gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A stop-gradient constant. While replaying, the recorded value is used instead.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let value = self.next_constant(value);
        self.push(value, Op::Leaf, false)
    }

    /// `sg[x]`: a constant copy of a node's current value.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.constant(v)
    }

    fn next_constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        let value = match &self.replay {
            Some(r) => {
                let v = r
                    .constants
                    .get(self.constant_cursor)
                    .cloned()
                    .expect("replay has fewer constants than the current pass");
                self.constant_cursor += 1;
                assert_eq!(v.shape(), value.shape(), "replayed constant shape mismatch");
                v
            }
            None => value,
        };
        self.log.constants.push(value.clone());
        value
    }

    /// Token assignment, either computed or taken from the replay.
    pub fn tokens(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        let tokens = match &self.replay {
            Some(r) => {
                let t = r
                    .tokens
                    .get(self.token_cursor)
                    .cloned()
                    .expect("replay has fewer token grids than the current pass");
                self.token_cursor += 1;
                t
            }
            None => compute(),
        };
        self.log.tokens.push(tokens.clone());
        tokens
    }

    /// 3D convolution with a cubic kernel. `x` is `[cin, d, h, w]`, `w` is `[cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [C, D, H, W]");
        assert_eq!(ws.len(), 5, "conv3d weight must be [Cout, Cin, k, k, k]");
        assert_eq!(xs[0], ws[1], "conv3d channel mismatch");
        let (cout, cin, kernel) = (ws[0], ws[1], ws[2]);
        let kdim = cin * kernel * kernel * kernel;
        let xv = self.nodes[x].value.data();
        let (col_owned, od) = if kernel == 1 && stride == 1 && pad == 0 {
            (None, dims3(&xs))
        } else {
            let (c, od) = im2col(xv, cin, dims3(&xs), kernel, stride, pad);
            (Some(c), od)
        };
        let col: &[T] = col_owned.as_deref().unwrap_or(xv);
        let p = od[0] * od[1] * od[2];
        let mut out = vec![T::zero(); cout * p];
        if let Some(b) = b {
            let bv = self.nodes[b].value.data();
            for (c, row) in out.chunks_mut(p).enumerate() {
                row.fill(bv[c]);
            }
        }
        let wv = self.nodes[w].value.data();
        T::gemm(
            cout,
            kdim,
            p,
            T::one(),
            wv,
            kdim as isize,
            1,
            col,
            p as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            p as isize,
            1,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_vec(&[cout, od[0], od[1], od[2]], out),
            Op::Conv3d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Group normalization over `[C, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let c = xv.channels();
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let s = xv.spatial_len();
        let per = (c / groups) * s;
        let n = T::from_usize(per).unwrap();
        let eps = T::lit(GROUP_NORM_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); groups];
        for g in 0..groups {
            let seg = &xv.data()[g * per..(g + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[g] = r;
            for (o, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let mut out = xhat.clone();
        for ch in 0..c {
            for v in &mut out[ch * s..(ch + 1) * s] {
                *v = *v * gv[ch] + bv[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Silu { x }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign(&self.nodes[b].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.sub_assign(&self.nodes[b].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub { a, b }, ng)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        v.scale(s);
        let ng = self.ng(x);
        self.push(v, Op::Scale { x, s }, ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat spatial mismatch");
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), Op::Concat { a, b }, ng)
    }

    /// Separable spatial resampling of a `[C, D, H, W]` map.
    pub fn resample(&mut self, x: NodeId, axes: [AxisResampler; 3]) -> NodeId {
        let xv = &self.nodes[x].value;
        let c = xv.channels();
        let (data, od) = resample_3d(xv.data(), c, dims3(xv.shape()), &axes);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[c, od[0], od[1], od[2]], data),
            Op::Resample {
                x,
                axes: Box::new(axes),
            },
            ng,
        )
    }

    /// Gathers rows of a `[K, C]` table into a `[C, d, h, w]` map.
    pub fn lookup(&mut self, table: NodeId, indices: Vec<usize>, dims: [usize; 3]) -> NodeId {
        let tv = &self.nodes[table].value;
        let (k, c) = (tv.shape()[0], tv.shape()[1]);
        let p = dims[0] * dims[1] * dims[2];
        assert_eq!(indices.len(), p, "lookup index count mismatch");
        let mut data = vec![T::zero(); c * p];
        for (pos, &idx) in indices.iter().enumerate() {
            assert!(idx < k, "token {idx} out of codebook range {k}");
            let row = &tv.data()[idx * c..(idx + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                data[ch * p + pos] = v;
            }
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], data),
            Op::Lookup { table, indices },
            ng,
        )
    }

    /// Forward value of `quantized`, gradient routed to `latent` unchanged.
    ///
    /// Equivalent to `latent + sg[quantized - latent]`; the offset is recorded
    /// so a replayed pass follows perturbations of `latent`.
    pub fn straight_through(&mut self, latent: NodeId, quantized: NodeId) -> NodeId {
        let lv = &self.nodes[latent].value;
        let qv = &self.nodes[quantized].value;
        assert_eq!(lv.shape(), qv.shape(), "straight-through shape mismatch");
        let mut offset = qv.clone();
        offset.sub_assign(lv);
        let value = if self.is_replaying() {
            let off = self.next_constant(offset);
            let mut v = self.nodes[latent].value.clone();
            v.add_assign(&off);
            v
        } else {
            let v = qv.clone();
            self.next_constant(offset);
            v
        };
        let ng = self.ng(latent);
        self.push(value, Op::StraightThrough { latent }, ng)
    }

    /// Scalar `mean((a - b)^2)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = T::from_usize(av.len()).unwrap();
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / n), Op::MeanSquaredError { a, b }, ng)
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }

    /// Reverse pass from a scalar node. Only leaf gradients are retained.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward requires a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss).rev() {
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(gy);
                continue;
            }
            self.backward_node(id, gy);
        }
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, id: NodeId, gy: Tensor<T>) {
        let mut updates: Vec<(NodeId, Tensor<T>)> = Vec::with_capacity(3);
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            &Op::Conv3d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
                let kdim = cin * kernel * kernel * kernel;
                let p = gy.spatial_len();
                let pointwise = kernel == 1 && stride == 1 && pad == 0;
                if self.ng(w) {
                    let col_owned = if pointwise {
                        None
                    } else {
                        Some(im2col(xv.data(), cin, dims3(xv.shape()), kernel, stride, pad).0)
                    };
                    let col: &[T] = col_owned.as_deref().unwrap_or(xv.data());
                    let mut gw = vec![T::zero(); cout * kdim];
                    T::gemm(
                        cout,
                        p,
                        kdim,
                        T::one(),
                        gy.data(),
                        p as isize,
                        1,
                        col,
                        1,
                        p as isize,
                        T::zero(),
                        &mut gw,
                        kdim as isize,
                        1,
                    );
                    updates.push((w, Tensor::from_vec(wv.shape(), gw)));
                }
                if let Some(b) = b {
                    if self.ng(b) {
                        let gb: Vec<T> = gy.data().chunks(p).map(|r| r.iter().copied().sum()).collect();
                        updates.push((b, Tensor::from_vec(&[cout], gb)));
                    }
                }
                if self.ng(x) {
                    let mut gcol = vec![T::zero(); kdim * p];
                    T::gemm(
                        kdim,
                        cout,
                        p,
                        T::one(),
                        wv.data(),
                        1,
                        kdim as isize,
                        gy.data(),
                        p as isize,
                        1,
                        T::zero(),
                        &mut gcol,
                        p as isize,
                        1,
                    );
                    let gx = if pointwise {
                        gcol
                    } else {
                        col2im(&gcol, cin, dims3(xv.shape()), kernel, stride, pad)
                    };
                    updates.push((x, Tensor::from_vec(xv.shape(), gx)));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let shape = self.nodes[x].value.shape().to_vec();
                let c = shape[0];
                let s: usize = shape[1..].iter().product();
                let gv = self.nodes[gamma].value.data();
                if self.ng(gamma) || self.ng(beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for ch in 0..c {
                        let dy = &gy.data()[ch * s..(ch + 1) * s];
                        let xh = &xhat[ch * s..(ch + 1) * s];
                        gg[ch] = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        gb[ch] = dy.iter().copied().sum();
                    }
                    updates.push((gamma, Tensor::from_vec(&[c], gg)));
                    updates.push((beta, Tensor::from_vec(&[c], gb)));
                }
                if self.ng(x) {
                    let per = (c / groups) * s;
                    let n = T::from_usize(per).unwrap();
                    let mut dxhat = gy.data().to_vec();
                    for ch in 0..c {
                        for v in &mut dxhat[ch * s..(ch + 1) * s] {
                            *v *= gv[ch];
                        }
                    }
                    let mut gx = vec![T::zero(); c * s];
                    for g in 0..groups {
                        let r = g * per..(g + 1) * per;
                        let dxh = &dxhat[r.clone()];
                        let xh = &xhat[r.clone()];
                        let sum_d: T = dxh.iter().copied().sum();
                        let sum_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let k = rstd[g] / n;
                        for ((o, &d), &h) in gx[r].iter_mut().zip(dxh).zip(xh) {
                            *o = k * (n * d - sum_d - h * sum_dx);
                        }
                    }
                    updates.push((x, Tensor::from_vec(&shape, gx)));
                }
            }
            &Op::Silu { x } => {
                let xv = &self.nodes[x].value;
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| {
                        let sg = T::one() / (T::one() + (-v).exp());
                        g * sg * (T::one() + v * (T::one() - sg))
                    })
                    .collect();
                updates.push((x, Tensor::from_vec(xv.shape(), data)));
            }
            &Op::Add { a, b } => {
                updates.push((a, gy.clone()));
                updates.push((b, gy));
            }
            &Op::Sub { a, b } => {
                let mut neg = gy.clone();
                neg.scale(-T::one());
                updates.push((a, gy));
                updates.push((b, neg));
            }
            &Op::Scale { x, s } => {
                let mut g = gy;
                g.scale(s);
                updates.push((x, g));
            }
            &Op::Concat { a, b } => {
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let na = self.nodes[a].value.len();
                let data = gy.into_data();
                updates.push((a, Tensor::from_vec(&sa, data[..na].to_vec())));
                updates.push((b, Tensor::from_vec(&sb, data[na..].to_vec())));
            }
            Op::Resample { x, axes } => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let g = resample_3d_transpose(gy.data(), shape[0], dims3(&shape), axes);
                updates.push((x, Tensor::from_vec(&shape, g)));
            }
            Op::Lookup { table, indices } => {
                let table = *table;
                let tshape = self.nodes[table].value.shape().to_vec();
                let c = tshape[1];
                let p = indices.len();
                let mut gt = vec![T::zero(); tshape[0] * c];
                for (pos, &idx) in indices.iter().enumerate() {
                    for ch in 0..c {
                        gt[idx * c + ch] += gy.data()[ch * p + pos];
                    }
                }
                updates.push((table, Tensor::from_vec(&tshape, gt)));
            }
            &Op::StraightThrough { latent } => {
                updates.push((latent, gy));
            }
            &Op::MeanSquaredError { a, b } => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let k = gy.item() * T::lit(2.0) / T::from_usize(av.len()).unwrap();
                let da: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| k * (x - y)).collect();
                let shape = av.shape().to_vec();
                if self.ng(b) {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    updates.push((b, Tensor::from_vec(&shape, db)));
                }
                updates.push((a, Tensor::from_vec(&shape, da)));
            }
        }
        for (id, g) in updates {
            self.accumulate(id, g);
        }
    }
}
