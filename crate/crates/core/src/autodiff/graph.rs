//! Define-by-run computation graph.
//!
//! Every primitive computes its value eagerly and records what its
//! vector-Jacobian product needs. [`Graph::backward`] walks the record in
//! reverse and returns gradients for the parameters that were read.

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::lif::{self, Firing, LifParams, LifTrace};
use crate::sdtw::{self, SdtwConfig};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<R>,
        inv_std: Vec<R>,
        batch_stats: bool,
    },
    Lif {
        current: Var,
        trace: LifTrace<R>,
        params: LifParams,
    },
    GlobalAvgPool(Var),
    MeanLeading(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
    Mse {
        x: Var,
        target: Tensor<R>,
    },
    /// Scalar whose gradient with respect to `x` was computed alongside the value.
    WithGrad {
        x: Var,
        grad: Tensor<R>,
    },
}

struct Node<R> {
    value: Option<Tensor<R>>,
    op: Op<R>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<R>,
    /// Number of values per channel.
    pub count: usize,
}

pub struct Graph<'p, R> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input. Never receives gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Read a trainable parameter. Repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: R) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / R::from_usize(t.numel()).unwrap());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(R::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); n * m];
        R::gemm(
            n,
            k,
            m,
            R::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            R::zero(),
            &mut out,
            m as isize,
            1,
        );
        let v = Tensor::new(&[n, m], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let (n, k, m) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![R::zero(); n * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        R::gemm(
            n,
            k,
            m,
            R::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            1,
            k as isize,
            R::one(),
            &mut out,
            m as isize,
            1,
        );
        let v = Tensor::new(&[n, m], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Linear { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom { stride, pad };
        let v = kernels::conv2d_forward(self.value(x), self.value(w), geom)?;
        self.push(v, Op::Conv2d { x, w, geom }, &[x, w])
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let (_, c, _) = kernels::channel_layout(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(c)
    }

    /// Batch norm over `[N, C]` or `[N, C, H, W]` using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<R>)> {
        self.check_bn(x, gamma, beta)?;
        let (n, _, hw) = kernels::channel_layout(self.shape(x))?;
        let (mean, var) = kernels::channel_moments(self.value(x))?;
        let inv_std: Vec<R> = var.iter().map(|v| (*v + R::lit(eps)).sqrt().recip()).collect();
        let x_hat = kernels::normalize(self.value(x), &mean, &inv_std)?;
        let y = kernels::affine(&x_hat, self.value(gamma).data(), self.value(beta).data())?;
        let stats = BatchStats {
            mean,
            var,
            count: n * hw,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat: x_hat.into_data(),
            inv_std,
            batch_stats: true,
        };
        Ok((self.push(y, op, &[x, gamma, beta])?, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[R], var: &[R], eps: f64) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics"));
        }
        let inv_std: Vec<R> = var.iter().map(|v| (*v + R::lit(eps)).sqrt().recip()).collect();
        let x_hat = kernels::normalize(self.value(x), mean, &inv_std)?;
        let y = kernels::affine(&x_hat, self.value(gamma).data(), self.value(beta).data())?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat: x_hat.into_data(),
            inv_std,
            batch_stats: false,
        };
        self.push(y, op, &[x, gamma, beta])
    }

    /// LIF layer over a time-major input whose leading axis is `steps * batch`.
    /// Output has the input's shape and holds binary spikes.
    pub fn lif(&mut self, current: Var, steps: usize, params: &LifParams) -> Result<Var> {
        let t = self.value(current);
        let trace = lif::unroll(t.data(), steps, params, Firing::Heaviside, None)?;
        let v = Tensor::new(t.shape(), trace.spikes.clone())?;
        let op = Op::Lif {
            current,
            trace,
            params: *params,
        };
        self.push(v, op, &[current])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let denom = R::from_usize(hw).unwrap();
        let data: Vec<R> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<R>() / denom)
            .collect();
        let v = Tensor::new(&[s[0], s[1]], data)?;
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// Mean over the leading axis: `[T, ...] -> [...]`.
    pub fn mean_leading(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 1 || t.rows() == 0 {
            return Err(Error::shape("mean_leading", format!("{:?}", t.shape())));
        }
        let (rows, rl) = (t.rows(), t.row_len());
        let mut acc = vec![R::zero(); rl];
        for r in t.data().chunks(rl) {
            for (a, v) in acc.iter_mut().zip(r) {
                *a = *a + *v;
            }
        }
        let denom = R::from_usize(rows).unwrap();
        acc.iter_mut().for_each(|a| *a = *a / denom);
        let v = Tensor::new(&t.shape()[1..], acc)?;
        self.push(v, Op::MeanLeading(x), &[x])
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid("label", format!("{bad} out of range [0, {c})")));
        }
        let mut probs = Vec::with_capacity(s[0] * c);
        let mut total = R::zero();
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z: R = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total = total + lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let v = Tensor::scalar(total / R::from_usize(s[0]).unwrap());
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(v, op, &[logits])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<R>) -> Result<Var> {
        if self.shape(x) != target.shape() || target.numel() == 0 {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(x), target.shape()),
            ));
        }
        let n = R::from_usize(target.numel()).unwrap();
        let total: R = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let v = Tensor::scalar(total / n);
        self.push(v, Op::Mse { x, target }, &[x])
    }

    /// Mean soft-DTW loss between per-sample slices of time-major logits and
    /// constant target sequences.
    ///
    /// `seq` is `[T, N, C]`; `samples[k]` picks the column compared against
    /// `targets[k]` (`[T_k, C]`). With `length_normalize` each value is divided
    /// by `T + T_k`.
    pub fn soft_dtw(
        &mut self,
        seq: Var,
        samples: &[usize],
        targets: &[&Tensor<R>],
        cfg: &SdtwConfig,
        length_normalize: bool,
    ) -> Result<Var> {
        let s = self.shape(seq).to_vec();
        if s.len() != 3 || samples.len() != targets.len() || samples.is_empty() {
            return Err(Error::shape(
                "soft_dtw",
                format!("seq {s:?}, {} samples, {} targets", samples.len(), targets.len()),
            ));
        }
        let (t, n, c) = (s[0], s[1], s[2]);
        let src = self.value(seq).data();
        let mut grad = vec![R::zero(); src.len()];
        let mut total = R::zero();
        let count = R::from_usize(samples.len()).unwrap();
        for (&col, target) in samples.iter().zip(targets) {
            if col >= n {
                return Err(Error::shape("soft_dtw", format!("sample {col} of {n}")));
            }
            let mut frames = Vec::with_capacity(t * c);
            for step in 0..t {
                let off = (step * n + col) * c;
                frames.extend_from_slice(&src[off..off + c]);
            }
            let a = Tensor::new(&[t, c], frames)?;
            let (value, g) = sdtw::sdtw_value_and_grad(&a, target, cfg)?;
            let norm = if length_normalize {
                R::from_usize(t + target.rows()).unwrap()
            } else {
                R::one()
            };
            total = total + value / norm;
            let w = R::one() / (norm * count);
            for step in 0..t {
                let off = (step * n + col) * c;
                for k in 0..c {
                    grad[off + k] = grad[off + k] + w * g.data()[step * c + k];
                }
            }
        }
        let v = Tensor::scalar(total / count);
        let grad = Tensor::new(&s, grad)?;
        self.push(v, Op::WithGrad { x: seq, grad }, &[seq])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(
                "loss was not produced by a forward pass on this graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), R::one()));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[idx].op {
                out.entries.push((id, g));
                continue;
            }
            self.vjp(idx, &g, &mut grads)?;
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("op nodes own their value");
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || elementwise(g, vb, |x, y| x * y));
                self.send(grads, *b, || elementwise(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => self.send(grads, *a, || g.map(|v| v * *c)),
            Op::Sum(a) => {
                let gv = g.item();
                self.send(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = R::from_usize(self.value(*a).numel()).unwrap();
                let gv = g.item() / n;
                self.send(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.send(grads, *a, || {
                    elementwise(g, va, |gv, x| if x > R::zero() { gv } else { R::zero() })
                });
            }
            Op::Tanh(a) => {
                self.send(grads, *a, || elementwise(g, out, |gv, y| gv * (R::one() - y * y)));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.send(grads, *a, || {
                    // da = g [n,m] * b^T [m,k]
                    let mut d = vec![R::zero(); n * k];
                    R::gemm(
                        n,
                        m,
                        k,
                        R::one(),
                        g.data(),
                        m as isize,
                        1,
                        vb.data(),
                        1,
                        m as isize,
                        R::zero(),
                        &mut d,
                        k as isize,
                        1,
                    );
                    Tensor::new(&[n, k], d).unwrap()
                });
                self.send(grads, *b, || {
                    // db = a^T [k,n] * g [n,m]
                    let mut d = vec![R::zero(); k * m];
                    R::gemm(
                        k,
                        n,
                        m,
                        R::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        m as isize,
                        1,
                        R::zero(),
                        &mut d,
                        m as isize,
                        1,
                    );
                    Tensor::new(&[k, m], d).unwrap()
                });
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k, m) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                self.send(grads, *x, || {
                    // dx = g [n,m] * w [m,k]
                    let mut d = vec![R::zero(); n * k];
                    R::gemm(
                        n,
                        m,
                        k,
                        R::one(),
                        g.data(),
                        m as isize,
                        1,
                        vw.data(),
                        k as isize,
                        1,
                        R::zero(),
                        &mut d,
                        k as isize,
                        1,
                    );
                    Tensor::new(&[n, k], d).unwrap()
                });
                self.send(grads, *w, || {
                    // dw = g^T [m,n] * x [n,k]
                    let mut d = vec![R::zero(); m * k];
                    R::gemm(
                        m,
                        n,
                        k,
                        R::one(),
                        g.data(),
                        1,
                        m as isize,
                        vx.data(),
                        k as isize,
                        1,
                        R::zero(),
                        &mut d,
                        k as isize,
                        1,
                    );
                    Tensor::new(&[m, k], d).unwrap()
                });
                if let Some(b) = b {
                    self.send(grads, *b, || {
                        let mut d = vec![R::zero(); m];
                        for row in g.data().chunks(m) {
                            for (a, v) in d.iter_mut().zip(row) {
                                *a = *a + *v;
                            }
                        }
                        Tensor::new(&[m], d).unwrap()
                    });
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *geom, g, self.wants(*x), self.wants(*w))?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, hw) = kernels::channel_layout(g.shape())?;
                let (sum_g, sum_gx) = kernels::channel_sums(g, x_hat)?;
                let gam = self.value(*gamma).data();
                self.send(grads, *gamma, || Tensor::new(&[c], sum_gx.clone()).unwrap());
                self.send(grads, *beta, || Tensor::new(&[c], sum_g.clone()).unwrap());
                self.send(grads, *x, || {
                    let mut d = g.clone();
                    let m = R::from_usize(n * hw).unwrap();
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for (i, v) in d.data_mut()[off..off + hw].iter_mut().enumerate() {
                                *v = if *batch_stats {
                                    k * (*v - sum_g[ch] / m - x_hat[off + i] * sum_gx[ch] / m)
                                } else {
                                    k * *v
                                };
                            }
                        }
                    }
                    d
                });
            }
            Op::Lif { current, trace, params } => {
                let lg = lif::backward(trace, g.data(), params)?;
                self.send(grads, *current, || {
                    Tensor::new(self.shape(*current), lg.currents).unwrap()
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let denom = R::from_usize(hw).unwrap();
                self.send(grads, *x, || {
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v / denom, hw))
                        .collect();
                    Tensor::new(s, data).unwrap()
                });
            }
            Op::MeanLeading(x) => {
                let s = self.shape(*x);
                let denom = R::from_usize(s[0]).unwrap();
                self.send(grads, *x, || {
                    let row: Vec<R> = g.data().iter().map(|&v| v / denom).collect();
                    let data = (0..s[0]).flat_map(|_| row.iter().copied()).collect();
                    Tensor::new(s, data).unwrap()
                });
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let len = g.shape()[*axis];
                self.send(grads, *x, || {
                    let mut d = Tensor::zeros(s);
                    for o in 0..outer {
                        let dst = (o * s[*axis] + start) * inner;
                        let src = o * len * inner;
                        d.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    d
                });
            }
            Op::Reshape(x) => {
                self.send(grads, *x, || g.clone().reshape(self.shape(*x)).unwrap());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits);
                let c = s[1];
                let k = g.item() / R::from_usize(s[0]).unwrap();
                self.send(grads, *logits, || {
                    let mut d = probs.clone();
                    for (row, &y) in d.chunks_mut(c).zip(labels) {
                        row[y] = row[y] - R::one();
                        row.iter_mut().for_each(|v| *v = *v * k);
                    }
                    Tensor::new(s, d).unwrap()
                });
            }
            Op::Mse { x, target } => {
                let k = R::lit(2.0) * g.item() / R::from_usize(target.numel()).unwrap();
                let vx = self.value(*x);
                self.send(grads, *x, || elementwise(vx, target, |a, b| k * (a - b)));
            }
            Op::WithGrad { x, grad } => {
                let k = g.item();
                self.send(grads, *x, || grad.map(|v| v * k));
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<R>>], to: Var, make: impl FnOnce() -> Tensor<R>) {
        if self.wants(to) {
            accumulate(grads, to, make());
        }
    }
}

fn elementwise<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], to: Var, g: Tensor<R>) {
    match &mut grads[to.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn op_name<R>(op: &Op<R>) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Lif { .. } => "lif",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::MeanLeading(_) => "mean_leading",
        Op::Narrow { .. } => "narrow",
        Op::Reshape(_) => "reshape",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Mse { .. } => "mse",
        Op::WithGrad { .. } => "soft_dtw",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).to_f64_vec(), vec![3., 7.]);
        let bad = g.constant(t(&[3, 1], &[1., 1., 1.]));
        let err = g.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 2]") && err.contains("[3, 1]"));
    }

    #[test]
    fn add_zero_and_relu() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).to_f64_vec(), vec![0., 0., 2.]);
    }

    #[test]
    fn linear_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[2., 3.])).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let x = g.constant(t(&[2], &[5., 7.]));
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p).unwrap();
        assert_eq!(g.value(loss).item(), 31.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().to_f64_vec(), vec![5., 7.]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[2., 3.])).unwrap();
        let mut g = Graph::new(&store);
        let _ = g.param(w);
        let c = g.constant(Tensor::scalar(0.0));
        let loss = g.scale(c, 3.0).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads).unwrap();
        assert!(store.grad(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[1], &[1.5])).unwrap();
        for _ in 0..3 {
            let mut g = Graph::new(&store);
            let wv = g.param(w);
            let loss = g.sum(wv).unwrap();
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.grad(w).item(), 3.0);
        store.zero_grad();
        assert_eq!(store.grad(w).item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let store = ParamStore::<f64>::new();
        let g = Graph::new(&store);
        assert!(matches!(g.backward(Var(0)), Err(Error::Backward(_))));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[3, 10]));
        let l = g.cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(x, &[0, 4, 10]).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(g.add(x, x), Err(Error::NonFinite { op: "add" })));
    }
}
