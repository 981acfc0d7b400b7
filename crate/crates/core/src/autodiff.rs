//! Tape-style reverse-mode differentiation over the handful of operations the
//! embedding networks and losses need.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of batch-norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates and dropout masks drawn from `seed`.
    Train {
        seed: u64,
    },
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub initialized: bool,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], T::one()),
            initialized: false,
        }
    }
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
    },
    Blur(NodeId),
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    AdaptivePool(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    CalLoss {
        to: NodeId,
        ti: Tensor<T>,
    },
    EuclideanLoss {
        to: NodeId,
        ti: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// `(parameter slot, gradient)` for every parameter leaf reached by the loss.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(slot, id)| self.wrt(id).map(|g| (slot, g)))
    }
}

/// Numerically stable softplus-form of the per-entry composition-aware loss.
pub fn cal_entry<T: Real>(to: T, ti: T) -> T {
    to.max(T::zero()) - ti * to + (T::one() + (-to.abs()).exp()).ln()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, op_name: &'static str) -> Result<NodeId> {
        let value = value.check_finite(op_name)?;
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self
                .inputs(&op)
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match *op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, k, b } => vec![x, k, b],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::MatMul { a, b } | Op::Add(a, b) => vec![a, b],
            Op::Blur(x)
            | Op::LeakyRelu { x, .. }
            | Op::Dropout { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::AdaptivePool(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::CalLoss { to: x, .. }
            | Op::EuclideanLoss { to: x, .. } => vec![x],
        }
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, t, "input")
    }

    /// Leaf whose gradient is tracked (used by gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.param(usize::MAX, t)
    }

    /// Trainable leaf tagged with the caller's parameter slot.
    pub fn param(&mut self, slot: usize, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Param(slot), t, "param")
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(x), self.value(k), self.value(b))?;
        self.push(Op::Conv2d { x, k, b }, v, "conv2d")
    }

    pub fn gaussian_blur(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::blur(self.value(x))?;
        self.push(Op::Blur(x), v, "gaussian_blur")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> Result<NodeId> {
        let v = kernels::leaky_relu(self.value(x), slope);
        self.push(Op::LeakyRelu { x, slope }, v, "leaky_relu")
    }

    /// Channel-wise normalization over all leading axes.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let c = *xv
            .dims()
            .last()
            .ok_or_else(|| Error::shape("batch_norm", "scalar input"))?;
        if self.value(gamma).dims() != [c]
            || self.value(beta).dims() != [c]
            || state.mean.dims() != [c]
        {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels vs parameter dims"),
            ));
        }
        let rows = xv.len() / c;
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let eps = T::of(BN_EPS);
        match mode {
            Mode::Train { .. } => {
                let batch = xv.dims().first().copied().unwrap_or(1);
                if xv.ndim() == 4 && batch < 2 {
                    return Err(Error::InvalidArgument(
                        "batch norm in train mode needs B >= 2".into(),
                    ));
                }
                let n = T::of(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in xv.data().chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m = *m + *v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in xv.data().chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = *v - *m;
                        *s = *s + d * d;
                    }
                }
                let biased: Vec<T> = var.iter().map(|s| *s / n).collect();
                let inv_std: Vec<T> = biased
                    .iter()
                    .map(|v| T::one() / (*v + eps).sqrt())
                    .collect();
                let mut xhat = Vec::with_capacity(xv.len());
                let mut out = Vec::with_capacity(xv.len());
                for row in xv.data().chunks_exact(c) {
                    for ch in 0..c {
                        let h = (row[ch] - mean[ch]) * inv_std[ch];
                        xhat.push(h);
                        out.push(g[ch] * h + bta[ch]);
                    }
                }
                let mom = T::of(BN_MOMENTUM);
                let unbiased_div = T::of((rows.max(2) - 1) as f64);
                for ch in 0..c {
                    let uv = var[ch] / unbiased_div;
                    let rm = &mut state.mean.data_mut()[ch];
                    *rm = if state.initialized {
                        (T::one() - mom) * *rm + mom * mean[ch]
                    } else {
                        mean[ch]
                    };
                    let rv = &mut state.var.data_mut()[ch];
                    *rv = if state.initialized {
                        (T::one() - mom) * *rv + mom * uv
                    } else {
                        uv
                    };
                }
                state.initialized = true;
                let value = Tensor::new(xv.dims().to_vec(), out)?;
                self.push(
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    value,
                    "batch_norm",
                )
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::UninitializedStats);
                }
                let mean = state.mean.data().to_vec();
                let inv_std: Vec<T> = state
                    .var
                    .data()
                    .iter()
                    .map(|v| T::one() / (*v + eps).sqrt())
                    .collect();
                let mut out = Vec::with_capacity(xv.len());
                for row in xv.data().chunks_exact(c) {
                    for ch in 0..c {
                        out.push(g[ch] * (row[ch] - mean[ch]) * inv_std[ch] + bta[ch]);
                    }
                }
                let value = Tensor::new(xv.dims().to_vec(), out)?;
                self.push(
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    value,
                    "batch_norm",
                )
            }
        }
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        let seed = match mode {
            Mode::Eval => return Ok(x),
            _ if p == 0.0 => return Ok(x),
            Mode::Train { seed } => seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = Tensor::from_fn(xv.dims().to_vec(), |i| xv.data()[i] * mask[i]);
        self.push(Op::Dropout { x, mask }, value, "dropout")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (av.dims(), bv.dims()) else {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.dims(), bv.dims()),
            ));
        };
        let (m, k, n) = (*m, *k, *n);
        if k != *k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.dims(), bv.dims()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a, b }, value, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let [r, c] = *xv.dims() else {
            return Err(Error::shape("transpose", format!("{:?}", xv.dims())));
        };
        let value = Tensor::from_fn(vec![c, r], |i| xv.data()[(i % r) * c + i / r]);
        self.push(Op::Transpose(x), value, "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(dims)?;
        self.push(Op::Reshape(x), value, "reshape")
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::avg_pool2(self.value(x))?;
        self.push(Op::AdaptivePool(x), value, "avg_pool2")
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let value = kernels::adaptive_avg_pool(self.value(x), oh, ow)?;
        self.push(Op::AdaptivePool(x), value, "adaptive_avg_pool")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.dims(), bv.dims()),
            ));
        }
        let value = Tensor::from_fn(av.dims().to_vec(), |i| av.data()[i] + bv.data()[i]);
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.dims().to_vec(), |i| xv.data()[i] * s);
        self.push(Op::Scale(x, s), value, "scale")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(total), "sum")
    }

    fn check_pair(&self, to: NodeId, ti: &Tensor<T>, op: &'static str) -> Result<()> {
        let tv = self.value(to);
        if tv.dims() != ti.dims() {
            return Err(Error::shape(
                op,
                format!("To {:?} vs Ti {:?}", tv.dims(), ti.dims()),
            ));
        }
        if !ti.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Mean over entries of `max(To,0) - Ti*To + log(1 + exp(-|To|))`.
    pub fn cal_loss(&mut self, to: NodeId, ti: Tensor<T>) -> Result<NodeId> {
        self.check_pair(to, &ti, "cal_loss")?;
        let tv = self.value(to);
        let n = T::of(tv.len().max(1) as f64);
        let total: T = tv
            .data()
            .iter()
            .zip(ti.data())
            .map(|(&o, &i)| cal_entry(o, i))
            .sum();
        self.push(
            Op::CalLoss { to, ti },
            Tensor::scalar(total / n),
            "cal_loss",
        )
    }

    /// Mean over entries of `(Ti - σ(To))²`.
    pub fn euclidean_loss(&mut self, to: NodeId, ti: Tensor<T>) -> Result<NodeId> {
        self.check_pair(to, &ti, "euclidean_loss")?;
        let tv = self.value(to);
        let n = T::of(tv.len().max(1) as f64);
        let total: T = tv
            .data()
            .iter()
            .zip(ti.data())
            .map(|(&o, &i)| {
                let d = i - sigmoid(o);
                d * d
            })
            .sum();
        self.push(
            Op::EuclideanLoss { to, ti },
            Tensor::scalar(total / n),
            "euclidean_loss",
        )
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.dims().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(&node.op, &dy)?;
            for (target, g) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[target.0], g);
            }
            grads[idx] = Some(dy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) if slot != usize::MAX => Some((slot, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, op: &Op<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let same = |id: NodeId, data: Vec<T>| -> Result<(NodeId, Tensor<T>)> {
            Ok((id, Tensor::new(self.value(id).dims().to_vec(), data)?))
        };
        Ok(match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, k, b } => {
                let g = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    self.value(*b),
                    dy,
                    self.wants(*x),
                )?;
                let mut v = vec![(*k, g.kernel), (*b, g.bias)];
                if let Some(dx) = g.input {
                    v.push((*x, dx));
                }
                v
            }
            Op::Blur(x) => vec![(*x, kernels::blur(dy)?)],
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                vec![same(*x, d)?]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let rows = T::of((xhat.len() / c) as f64);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (drow, hrow) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dbeta[ch] = dbeta[ch] + drow[ch];
                        dgamma[ch] = dgamma[ch] + drow[ch] * hrow[ch];
                    }
                }
                let mut dx = Vec::with_capacity(xhat.len());
                for (drow, hrow) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        let t = rows * drow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch];
                        dx.push(g[ch] * inv_std[ch] / rows * t);
                    }
                }
                vec![same(*x, dx)?, same(*gamma, dgamma)?, same(*beta, dbeta)?]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let g = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Vec::with_capacity(xv.len());
                for (drow, xrow) in dy.data().chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for ch in 0..c {
                        dbeta[ch] = dbeta[ch] + drow[ch];
                        dgamma[ch] = dgamma[ch] + drow[ch] * (xrow[ch] - mean[ch]) * inv_std[ch];
                        dx.push(drow[ch] * g[ch] * inv_std[ch]);
                    }
                }
                vec![same(*x, dx)?, same(*gamma, dgamma)?, same(*beta, dbeta)?]
            }
            Op::Dropout { x, mask } => {
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![same(*x, d)?]
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                let mut v = Vec::with_capacity(2);
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dy.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    v.push(same(*a, da)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (1, k as isize),
                        dy.data(),
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    v.push(same(*b, db)?);
                }
                v
            }
            Op::Transpose(x) => {
                let [r, c] = *self.value(*x).dims() else {
                    unreachable!()
                };
                // dy is [c, r]
                let d = (0..r * c).map(|i| dy.data()[(i % c) * r + i / c]).collect();
                vec![same(*x, d)?]
            }
            Op::Reshape(x) => vec![same(*x, dy.data().to_vec())?],
            Op::AdaptivePool(x) => vec![(
                *x,
                kernels::adaptive_avg_pool_backward(self.value(*x).dims(), dy)?,
            )],
            Op::Add(a, b) => vec![same(*a, dy.data().to_vec())?, same(*b, dy.data().to_vec())?],
            Op::Scale(x, s) => vec![same(*x, dy.data().iter().map(|&g| g * *s).collect())?],
            Op::Sum(x) => {
                let g = dy.data()[0];
                vec![same(*x, vec![g; self.value(*x).len()])?]
            }
            Op::CalLoss { to, ti } => {
                let g = dy.data()[0] / T::of(ti.len().max(1) as f64);
                let tv = self.value(*to).data();
                let d = tv
                    .iter()
                    .zip(ti.data())
                    .map(|(&o, &i)| (sigmoid(o) - i) * g)
                    .collect();
                vec![same(*to, d)?]
            }
            Op::EuclideanLoss { to, ti } => {
                let g = dy.data()[0] / T::of(ti.len().max(1) as f64);
                let two = T::of(2.0);
                let tv = self.value(*to).data();
                let d = tv
                    .iter()
                    .zip(ti.data())
                    .map(|(&o, &i)| {
                        let s = sigmoid(o);
                        -two * (i - s) * s * (T::one() - s) * g
                    })
                    .collect();
                vec![same(*to, d)?]
            }
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every input entry of `build` against central differences.
    fn grad_check(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) -> f64 {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<_> = ins.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
            let l = build(&mut g, &ids);
            (g, ids, l)
        };
        let (g, ids, l) = eval(&inputs);
        let grads = g.backward(l).unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(ids[which])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.dims().to_vec()));
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[which].data_mut()[e] -= eps;
                let (gp, _, lp) = eval(&plus);
                let (gm, _, lm) = eval(&minus);
                let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g
            .variable(Tensor::from_fn(vec![2, 3], |i| i as f64))
            .unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dot_self_gradient_is_twice_x() {
        let mut g = Graph::<f64>::new();
        let x = g
            .variable(Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap())
            .unwrap();
        let xt = g.transpose(x).unwrap();
        let d = g.matmul(x, xt).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
        assert_eq!(g.value(d).data(), &[1.0 + 4.0 + 0.25 + 9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_matches_loop_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&[1, 6], &mut rng);
        let b = rand_t(&[6, 1], &mut rng);
        let mut g = Graph::new();
        let (an, bn) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
        let p = g.matmul(an, bn).unwrap();
        let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        assert!((g.value(p).data()[0] - want).abs() < 1e-12);

        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let m = rand_t(&[3, 2], &mut rng);
        let (e, mn) = (g.input(eye).unwrap(), g.input(m.clone()).unwrap());
        let p = g.matmul(e, mn).unwrap();
        assert_eq!(g.value(p), &m);
        let z = g.input(Tensor::zeros(vec![2, 4])).unwrap();
        let p = g.matmul(mn, z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        assert!(g.matmul(mn, mn).is_err());
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = rand_t(&[2, 4, 5, 2], &mut rng);
            let k = rand_t(&[3, 3, 2, 3], &mut rng);
            let b = rand_t(&[3], &mut rng);
            let err = grad_check(vec![x.clone(), k, b], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
                let w = g
                    .input(Tensor::from_fn(g.value(y).dims().to_vec(), |i| {
                        (i as f64 * 0.37).sin()
                    }))
                    .unwrap();
                let r = g.reshape(y, vec![1, 2 * 4 * 5 * 3]).unwrap();
                let wr = g.reshape(w, vec![2 * 4 * 5 * 3, 1]).unwrap();
                g.matmul(r, wr).unwrap()
            });
            assert!(err <= 1e-4, "conv {err}");

            let weights = |g: &mut Graph<f64>, y: NodeId| {
                let dims = g.value(y).dims().to_vec();
                let n: usize = dims.iter().product();
                let w = g
                    .input(Tensor::from_fn(vec![n, 1], |i| (i as f64 * 0.71).cos()))
                    .unwrap();
                let r = g.reshape(y, vec![1, n]).unwrap();
                g.matmul(r, w).unwrap()
            };
            let err = grad_check(vec![x.clone()], |g, ids| {
                let y = g.gaussian_blur(ids[0]).unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "blur {err}");
            let err = grad_check(vec![x.clone()], |g, ids| {
                let y = g.leaky_relu(ids[0], 0.2).unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "lrelu {err}");
            let x8 = rand_t(&[2, 8, 6, 2], &mut rng);
            let err = grad_check(vec![x8.clone()], |g, ids| {
                let y = g.avg_pool2(ids[0]).unwrap();
                let y = g.adaptive_avg_pool(y, 3, 2).unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "pool {err}");
            let gamma = rand_t(&[2], &mut rng);
            let beta = rand_t(&[2], &mut rng);
            let err = grad_check(vec![x.clone(), gamma.clone(), beta.clone()], |g, ids| {
                let mut st = BatchNormState::new(2);
                let y = g
                    .batch_norm(ids[0], ids[1], ids[2], &mut st, Mode::Train { seed: 0 })
                    .unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "bn train {err}");
            let err = grad_check(vec![x.clone(), gamma, beta], |g, ids| {
                let mut st = BatchNormState::new(2);
                st.mean = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
                st.var = Tensor::new(vec![2], vec![0.5, 2.0]).unwrap();
                st.initialized = true;
                let y = g
                    .batch_norm(ids[0], ids[1], ids[2], &mut st, Mode::Eval)
                    .unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "bn eval {err}");
            let err = grad_check(vec![x.clone()], |g, ids| {
                let y = g.dropout(ids[0], 0.5, Mode::Train { seed: 4 }).unwrap();
                weights(g, y)
            });
            assert!(err <= 1e-4, "dropout {err}");
            let a = rand_t(&[3, 4], &mut rng);
            let bm = rand_t(&[3, 4], &mut rng);
            let ti = Tensor::from_fn(vec![3, 3], |i| (i as f64 * 0.13) % 1.0);
            let err = grad_check(vec![a.clone(), bm.clone()], |g, ids| {
                let bt = g.transpose(ids[1]).unwrap();
                let to = g.matmul(ids[0], bt).unwrap();
                let to = g.scale(to, 1.7).unwrap();
                let l1 = g.cal_loss(to, ti.clone()).unwrap();
                let l2 = g.euclidean_loss(to, ti.clone()).unwrap();
                g.add(l1, l2).unwrap()
            });
            assert!(err <= 1e-4, "losses {err}");
        }
    }

    #[test]
    fn batch_norm_two_values_normalize_to_unit() {
        let mut g = Graph::<f64>::new();
        let a = 3.0;
        let x = g
            .input(Tensor::new(vec![2, 1, 1, 1], vec![-a, a]).unwrap())
            .unwrap();
        let gamma = g.input(Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let beta = g.input(Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let mut st = BatchNormState::new(1);
        let y = g
            .batch_norm(x, gamma, beta, &mut st, Mode::Train { seed: 0 })
            .unwrap();
        let norm = a / (a * a + BN_EPS).sqrt();
        assert!((g.value(y).data()[0] - (-norm * 2.0 + 0.5)).abs() < 1e-12);
        assert!((g.value(y).data()[1] - (norm * 2.0 + 0.5)).abs() < 1e-12);
        // running stats: first update copies batch statistics (unbiased var = 2a²)
        assert_eq!(st.mean.data(), &[0.0]);
        assert!((st.var.data()[0] - 2.0 * a * a).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_requires_stats_and_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g
            .input(Tensor::from_fn(vec![1, 2, 2, 1], |i| i as f32))
            .unwrap();
        let gamma = g.input(Tensor::full(vec![1], 1.0)).unwrap();
        let beta = g.input(Tensor::zeros(vec![1])).unwrap();
        let mut st = BatchNormState::new(1);
        assert!(matches!(
            g.batch_norm(x, gamma, beta, &mut st, Mode::Eval),
            Err(Error::UninitializedStats)
        ));
        st.initialized = true;
        let a = g.batch_norm(x, gamma, beta, &mut st, Mode::Eval).unwrap();
        let b = g.batch_norm(x, gamma, beta, &mut st, Mode::Eval).unwrap();
        assert_eq!(g.value(a), g.value(b));
        // unit stats pass through up to eps
        assert!(g.value(a).max_abs_diff(g.value(x)) < 1e-4);
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 2, 1])).unwrap();
        let gamma = g.input(Tensor::full(vec![1], 1.0)).unwrap();
        let beta = g.input(Tensor::zeros(vec![1])).unwrap();
        let mut st = BatchNormState::new(1);
        assert!(g
            .batch_norm(x, gamma, beta, &mut st, Mode::Train { seed: 1 })
            .is_err());
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![100_000], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.5, Mode::Eval).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, Mode::Train { seed: 1 }).unwrap(), x);
        assert!(g.dropout(x, 1.0, Mode::Train { seed: 1 }).is_err());
        let d = g.dropout(x, 0.5, Mode::Train { seed: 42 }).unwrap();
        let survivors = g.value(d).data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((survivors - 0.5).abs() <= 0.01, "{survivors}");
        assert!(g.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let d2 = g.dropout(x, 0.5, Mode::Train { seed: 42 }).unwrap();
        assert_eq!(g.value(d), g.value(d2));
    }

    #[test]
    fn non_finite_values_are_surfaced() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![1, 2], f32::MAX)).unwrap();
        let y = g.input(Tensor::full(vec![2, 1], f32::MAX)).unwrap();
        assert!(matches!(g.matmul(x, y), Err(Error::NonFinite { .. })));
    }
}
