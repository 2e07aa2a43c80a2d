//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every op evaluates eagerly and appends a node holding its value plus what
//! the backward rule needs. `backward` walks the record in reverse and leaves
//! gradients on every node that requires one.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{HpnetError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    PatchSqDist {
        z: Var,
        protos: Var,
    },
    Similarity {
        dist: Var,
        eps: f64,
    },
    /// Spatial reduction; `arg` holds the chosen flat HW offset per (n, m).
    SpatialPick {
        x: Var,
        arg: Vec<usize>,
    },
    MinOver {
        x: Var,
        arg: usize,
    },
    MatmulT {
        a: Var,
        w: Var,
    },
    LogSoftmax(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(HpnetError::Dimension(msg))
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

    /// Records a leaf; it takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last `backward`, if any reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of a node, or zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&a| f(a)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("conv2d input")?;
        let (f, kc, kh, kw) = self.value(kernel).dims4("conv2d kernel")?;
        if kc != c {
            return dim_err(format!(
                "conv2d: input channel axis (1) has {c} but kernel channel axis (1) has {kc}"
            ));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive".into());
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return dim_err(format!(
                "conv2d: kernel spatial axes (2,3) {kh}x{kw} exceed padded input axes (2,3) {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let t = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("add_channel_bias")?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return dim_err(format!(
                "add_channel_bias: bias shape {:?} does not match channel axis (1) of size {c}",
                b.shape()
            ));
        }
        let mut out = self.value(x).data().to_vec();
        let hw = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let bv = b.data()[ci];
                let base = (ni * c + ci) * hw;
                out[base..base + hw].iter_mut().for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddChannelBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Squared distances between every patch vector `z[n,:,h,w]` and every
    /// prototype `protos[m,:]`, as an `[N, M, H, W]` tensor.
    pub fn patch_sq_distances(&mut self, z: Var, protos: Var) -> Result<Var> {
        let (n, d, h, w) = self.value(z).dims4("patch distances latent")?;
        let (m, pd) = self.value(protos).dims2("patch distances prototypes")?;
        if pd != d {
            return dim_err(format!(
                "patch distances: latent channel axis (1) has {d} but prototype axis (1) has {pd}"
            ));
        }
        let zv = self.value(z).data();
        let pv = self.value(protos).data();
        let hw = h * w;
        let mut out = vec![0.0; n * m * hw];
        for ni in 0..n {
            let zn = &zv[ni * d * hw..(ni + 1) * d * hw];
            for mi in 0..m {
                let p = &pv[mi * d..(mi + 1) * d];
                let dst = &mut out[(ni * m + mi) * hw..(ni * m + mi + 1) * hw];
                for (k, &pk) in p.iter().enumerate() {
                    let plane = &zn[k * hw..(k + 1) * hw];
                    for (o, &zk) in dst.iter_mut().zip(plane) {
                        let diff = zk - pk;
                        *o += diff * diff;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, m, h, w], out)?;
        let rg = self.rg(&[z, protos]);
        Ok(self.push(t, Op::PatchSqDist { z, protos }, rg))
    }

    /// Elementwise `log(1 + 1/(d + eps))`.
    pub fn similarity(&mut self, dist: Var, eps: f64) -> Var {
        self.unary(dist, Op::Similarity { dist, eps }, |d| {
            (1.0 + 1.0 / (d + eps)).ln()
        })
    }

    fn spatial_pick(&mut self, x: Var, take_max: bool) -> Result<(Var, Vec<(usize, usize)>)> {
        let (n, m, h, w) = self.value(x).dims4("spatial reduction")?;
        if h == 0 || w == 0 {
            return dim_err("spatial reduction over an empty grid".into());
        }
        let hw = h * w;
        let data = self.value(x).data();
        let mut values = Vec::with_capacity(n * m);
        let mut arg = Vec::with_capacity(n * m);
        for block in data.chunks_exact(hw) {
            let mut best = 0;
            for (i, &v) in block.iter().enumerate().skip(1) {
                let better = if take_max {
                    v > block[best]
                } else {
                    v < block[best]
                };
                if better {
                    best = i;
                }
            }
            values.push(block[best]);
            arg.push(best);
        }
        let positions = arg.iter().map(|&a| (a / w, a % w)).collect();
        let t = Tensor::new(vec![n, m], values)?;
        let rg = self.rg(&[x]);
        Ok((self.push(t, Op::SpatialPick { x, arg }, rg), positions))
    }

    /// Max over the spatial axes of `[N, M, H, W]`; ties go to the first
    /// position in row-major order and receive the whole gradient.
    pub fn spatial_max(&mut self, maps: Var) -> Result<(Var, Vec<(usize, usize)>)> {
        self.spatial_pick(maps, true)
    }

    pub fn spatial_min(&mut self, maps: Var) -> Result<(Var, Vec<(usize, usize)>)> {
        self.spatial_pick(maps, false)
    }

    /// Minimum of `x` over the given flat indices (first index wins ties).
    pub fn min_over(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let data = self.value(x).data();
        let mut best: Option<usize> = None;
        for &i in indices {
            if i >= data.len() {
                return dim_err(format!("min_over: index {i} out of range {}", data.len()));
            }
            if best.is_none_or(|b| data[i] < data[b]) {
                best = Some(i);
            }
        }
        let arg = best.ok_or_else(|| HpnetError::Dimension("min_over: empty index set".into()))?;
        let t = Tensor::scalar(data[arg]);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MinOver { x, arg }, rg))
    }

    /// `a[N,M] · wᵀ` for `w[C,M]`, giving `[N,C]`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("matmul lhs")?;
        let (c, wm) = self.value(w).dims2("matmul weights")?;
        if wm != m {
            return dim_err(format!(
                "matmul: lhs axis (1) has {m} but weight axis (1) has {wm}"
            ));
        }
        let av = self.value(a).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let row = &av[ni * m..(ni + 1) * m];
            for ci in 0..c {
                let wr = &wv[ci * m..(ci + 1) * m];
                out[ni * c + ci] = row.iter().zip(wr).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[a, w]);
        Ok(self.push(t, Op::MatmulT { a, w }, rg))
    }

    /// Row-wise log-softmax of a 2-d tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("log_softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let row = &xv[ni * c..(ni + 1) * c];
            let lse = log_sum_exp(row);
            for (o, &v) in out[ni * c..(ni + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Scalar `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x).data();
        if weights.len() != xv.len() {
            return dim_err(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                xv.len()
            ));
        }
        let s = xv.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(format!(
                "add: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            ));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Sums scalars (or equally shaped tensors); `None` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &t in terms {
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Back-propagates from the scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.zero_grad();
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (di, dk) = conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(di) = di {
                    acc(*input, &|s| add_into(s, &di));
                }
                if let Some(dk) = dk {
                    acc(*kernel, &|s| add_into(s, &dk));
                }
            }
            Op::AddChannelBias { x, bias } => {
                acc(*x, &|s| add_into(s, g));
                let shape = node.value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                acc(*bias, &|s| {
                    for (blk, chunk) in g.chunks_exact(hw).enumerate() {
                        s[blk % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &|s| {
                for ((s, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *s += gi * y * (1.0 - y);
                }
            }),
            Op::PatchSqDist { z, protos } => {
                let shape = node.value.shape();
                let (n, m, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let zv = self.value(*z).data();
                let pv = self.value(*protos).data();
                let d = self.value(*protos).shape()[1];
                acc(*z, &|s| {
                    for ni in 0..n {
                        for mi in 0..m {
                            let gb = &g[(ni * m + mi) * hw..(ni * m + mi + 1) * hw];
                            for k in 0..d {
                                let pk = pv[mi * d + k];
                                let base = (ni * d + k) * hw;
                                for p in 0..hw {
                                    s[base + p] += 2.0 * gb[p] * (zv[base + p] - pk);
                                }
                            }
                        }
                    }
                });
                acc(*protos, &|s| {
                    for ni in 0..n {
                        for mi in 0..m {
                            let gb = &g[(ni * m + mi) * hw..(ni * m + mi + 1) * hw];
                            for k in 0..d {
                                let pk = pv[mi * d + k];
                                let base = (ni * d + k) * hw;
                                let mut t = 0.0;
                                for p in 0..hw {
                                    t += gb[p] * (zv[base + p] - pk);
                                }
                                s[mi * d + k] -= 2.0 * t;
                            }
                        }
                    }
                });
            }
            Op::Similarity { dist, eps } => {
                let dv = self.value(*dist).data();
                acc(*dist, &|s| {
                    for ((s, &gi), &d) in s.iter_mut().zip(g).zip(dv) {
                        let a = d + eps;
                        *s -= gi / (a * (a + 1.0));
                    }
                });
            }
            Op::SpatialPick { x, arg } => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                acc(*x, &|s| {
                    for (k, (&a, &gi)) in arg.iter().zip(g).enumerate() {
                        s[k * hw + a] += gi;
                    }
                });
            }
            Op::MinOver { x, arg } => acc(*x, &|s| s[*arg] += g[0]),
            Op::MatmulT { a, w } => {
                let (n, m) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let c = self.value(*w).shape()[0];
                let av = self.value(*a).data();
                let wv = self.value(*w).data();
                acc(*a, &|s| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let gi = g[ni * c + ci];
                            for j in 0..m {
                                s[ni * m + j] += gi * wv[ci * m + j];
                            }
                        }
                    }
                });
                acc(*w, &|s| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let gi = g[ni * c + ci];
                            for j in 0..m {
                                s[ci * m + j] += gi * av[ni * m + j];
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                acc(*x, &|s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.chunks_exact(c))
                    {
                        let gs: f64 = grow.iter().sum();
                        for ((s, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += gi - y.exp() * gs;
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => acc(*x, &|s| {
                for (s, w) in s.iter_mut().zip(weights) {
                    *s += g[0] * w;
                }
            }),
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                for (s, &gi) in s.iter_mut().zip(g) {
                    *s += c * gi;
                }
            }),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *s += 2.0 * xi * gi;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        // subgradient 0 at the kink
                        if xi > 0.0 {
                            *s += gi;
                        } else if xi < 0.0 {
                            *s -= gi;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}
