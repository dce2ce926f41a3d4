//! Reverse-mode automatic differentiation over the tensor operation set.
//!
//! A [`Tape`] is a Wengert list: forward calls append nodes holding the op,
//! its input node ids, and whatever forward values the backward rule needs.
//! [`Tape::backward`] traverses the list exactly once in reverse creation
//! order, accumulating adjoints by addition in that fixed order, and returns
//! one gradient per registered parameter with the parameter's exact shape.
//!
//! One tape per training step; tapes are not shared across threads. No
//! higher-order derivatives.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::{BinOp, MapOp, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss; got {elements} elements")]
    NonScalarLoss { elements: usize },
    #[error("backward called twice without a new forward")]
    BackwardConsumed,
    #[error("batch norm in train mode requires batch >= 2; got {batch}")]
    BatchTooSmall { batch: usize },
}

/// Stable identifier of a trainable parameter across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Saved forward state for the train-mode batch-norm backward rule.
#[derive(Debug, Clone)]
struct BnSaved<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Contract {
        a: NodeId,
        b: NodeId,
        axes_a: Vec<usize>,
        axes_b: Vec<usize>,
    },
    BatchMatmul {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        op: BinOp,
    },
    Map {
        x: NodeId,
        op: MapOp<T>,
    },
    SumAll {
        x: NodeId,
    },
    Select {
        x: NodeId,
        axis: usize,
        index: usize,
    },
    Stack {
        xs: Vec<NodeId>,
    },
    LogSoftmax {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradient map: parameter id to a tensor of the parameter's shape.
/// Untracked (constant) inputs are absent.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T>(pub BTreeMap<ParamId, Tensor<T>>);

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.0.get(&id)
    }
}

/// Record of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers an untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable parameter; its gradient appears in the map
    /// returned by [`Tape::backward`].
    pub fn parameter(&mut self, id: ParamId, value: Tensor<T>) -> NodeId {
        let node = self.push(value, Op::Leaf, true);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn contract(
        &mut self,
        a: NodeId,
        b: NodeId,
        axes_a: &[usize],
        axes_b: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).contract(self.value(b), axes_a, axes_b)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            Op::Contract {
                a,
                b,
                axes_a: axes_a.to_vec(),
                axes_b: axes_b.to_vec(),
            },
            needs,
        ))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).batch_matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BatchMatmul { a, b }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).permute(perm)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, op: BinOp) -> Result<NodeId, AutodiffError> {
        let value = self.value(a).elementwise(self.value(b), op)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { a, b, op }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, BinOp::Mul)
    }

    pub fn map(&mut self, x: NodeId, op: MapOp<T>) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).map(op)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Map { x, op }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.map(x, MapOp::Scale(c))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).sum_all()?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SumAll { x }, needs))
    }

    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId, AutodiffError> {
        let value = self.value(x).select(axis, index)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Select { x, axis, index }, needs))
    }

    /// Stacks `(B, f...)` nodes into `(B, N, f...)`.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let parts: Vec<Tensor<T>> = xs.iter().map(|&id| self.value(id).clone()).collect();
        let value = Tensor::stack_axis1(&parts)?;
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, Op::Stack { xs: xs.to_vec() }, needs))
    }

    /// Log-softmax over the last axis, computed via the log-sum-exp
    /// stabilized form.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let cols = *xv.shape().last().expect("log_softmax needs rank >= 1");
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::LogSoftmax { x }, needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let data: Vec<T> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Sigmoid { x }, needs))
    }

    /// Train-mode batch normalization of `(batch, ..., features)` per feature
    /// channel over all leading axes. Returns the output node plus the batch
    /// mean/variance (biased) for the caller's running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>), AutodiffError> {
        let xv = self.value(x).clone();
        let batch = xv.shape()[0];
        if batch < 2 {
            return Err(AutodiffError::BatchTooSmall { batch });
        }
        let features = *xv.shape().last().unwrap();
        let groups = xv.len() / features;
        let count = T::real(groups as f64);

        let mut mean = vec![T::zero(); features];
        for chunk in xv.data().chunks(features) {
            for (m, &v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![T::zero(); features];
        for chunk in xv.data().chunks(features) {
            for ((s, &v), &m) in var.iter_mut().zip(chunk).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in var.iter_mut() {
            *s /= count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

        let mut x_hat = Vec::with_capacity(xv.len());
        for chunk in xv.data().chunks(features) {
            for ((&v, &m), &is) in chunk.iter().zip(&mean).zip(&inv_std) {
                x_hat.push((v - m) * is);
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(xv.len());
        for chunk in x_hat.chunks(features) {
            for ((&h, &g), &b) in chunk.iter().zip(&gv).zip(&bv) {
                out.push(g * h + b);
            }
        }
        let x_hat = Tensor::from_vec(xv.shape().to_vec(), x_hat)?;
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    x_hat,
                    inv_std: inv_std.clone(),
                },
            },
            needs,
        );
        let mean_t = Tensor::from_vec(vec![features], mean)?;
        let var_t = Tensor::from_vec(vec![features], var)?;
        Ok((node, mean_t, var_t))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let features = *xv.shape().last().unwrap();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| (v + eps).sqrt().recip())
            .collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mv = running_mean.data();
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.data().chunks(features) {
            for (f, &v) in chunk.iter().enumerate() {
                out.push(gv[f] * (v - mv[f]) * inv_std[f] + bv[f]);
            }
        }
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                inv_std,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the tape's single backward
    /// budget; recording a new forward requires a new tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::BackwardConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                elements: loss_value.len(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Contract {
                    a,
                    b,
                    axes_a,
                    axes_b,
                } => {
                    let (a, b) = (*a, *b);
                    let (axes_a, axes_b) = (axes_a.clone(), axes_b.clone());
                    if self.needs(a) {
                        let da = contract_adjoint_left(
                            &g,
                            self.value(b),
                            self.value(a).ndim(),
                            &axes_a,
                            &axes_b,
                        )?;
                        accumulate(&mut grads, a.0, da)?;
                    }
                    if self.needs(b) {
                        let db = contract_adjoint_right(
                            self.value(a),
                            &g,
                            self.value(b).ndim(),
                            &axes_a,
                            &axes_b,
                        )?;
                        accumulate(&mut grads, b.0, db)?;
                    }
                }
                Op::BatchMatmul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bt = self.value(b).permute(&[0, 2, 1])?;
                        accumulate(&mut grads, a.0, g.batch_matmul(&bt)?)?;
                    }
                    if self.needs(b) {
                        let at = self.value(a).permute(&[0, 2, 1])?;
                        accumulate(&mut grads, b.0, at.batch_matmul(&g)?)?;
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let dx = g.reshape(self.value(x).shape())?;
                    accumulate(&mut grads, x.0, dx)?;
                }
                Op::Permute { x, perm } => {
                    let x = *x;
                    let mut inverse = vec![0usize; perm.len()];
                    for (j, &p) in perm.iter().enumerate() {
                        inverse[p] = j;
                    }
                    accumulate(&mut grads, x.0, g.permute(&inverse)?)?;
                }
                Op::Binary { a, b, op } => {
                    let (a, b, op) = (*a, *b, *op);
                    if self.needs(a) {
                        let full = match op {
                            BinOp::Add | BinOp::Sub => g.clone(),
                            BinOp::Mul => g.mul(self.value(b))?,
                        };
                        accumulate(&mut grads, a.0, reduce_to_shape(full, self.value(a))?)?;
                    }
                    if self.needs(b) {
                        let full = match op {
                            BinOp::Add => g.clone(),
                            BinOp::Sub => g.neg()?,
                            BinOp::Mul => g.mul(self.value(a))?,
                        };
                        accumulate(&mut grads, b.0, reduce_to_shape(full, self.value(b))?)?;
                    }
                }
                Op::Map { x, op } => {
                    let (x, op) = (*x, *op);
                    let dx = match op {
                        MapOp::Scale(c) => g.scale(c)?,
                        MapOp::Sin => g.mul(&self.value(x).map(MapOp::Cos)?)?,
                        MapOp::Cos => g.mul(&self.value(x).map(MapOp::Sin)?)?.neg()?,
                        MapOp::Log => {
                            let xv = self.value(x);
                            let data: Vec<T> = g
                                .data()
                                .iter()
                                .zip(xv.data())
                                .map(|(&gv, &v)| gv / v)
                                .collect();
                            Tensor::from_vec(xv.shape().to_vec(), data)?
                        }
                        MapOp::Exp => g.mul(&self.nodes[i].value)?,
                        MapOp::Neg => g.neg()?,
                    };
                    accumulate(&mut grads, x.0, dx)?;
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let dx = Tensor::filled(self.value(x).shape().to_vec(), g.item());
                    accumulate(&mut grads, x.0, dx)?;
                }
                Op::Select { x, axis, index } => {
                    let (x, axis, index) = (*x, *axis, *index);
                    let xv = self.value(x);
                    let outer: usize = xv.shape()[..axis].iter().product();
                    let extent = xv.shape()[axis];
                    let inner: usize = xv.shape()[axis + 1..].iter().product();
                    let mut data = vec![T::zero(); xv.len()];
                    for o in 0..outer {
                        let dst = (o * extent + index) * inner;
                        data[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                    accumulate(&mut grads, x.0, Tensor::from_vec(xv.shape().to_vec(), data)?)?;
                }
                Op::Stack { xs } => {
                    let xs = xs.clone();
                    for (j, xid) in xs.iter().enumerate() {
                        if self.needs(*xid) {
                            accumulate(&mut grads, xid.0, g.select(1, j)?)?;
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let cols = *y.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(y.len());
                    for (grow, yrow) in g.data().chunks(cols).zip(y.data().chunks(cols)) {
                        let mut gsum = T::zero();
                        for &gv in grow {
                            gsum += gv;
                        }
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dx.push(gv - yv.exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, x.0, Tensor::from_vec(y.shape().to_vec(), dx)?)?;
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    accumulate(&mut grads, x.0, Tensor::from_vec(y.shape().to_vec(), data)?)?;
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let x_hat = saved.x_hat.clone();
                    let inv_std = saved.inv_std.clone();
                    let features = inv_std.len();
                    let groups = x_hat.len() / features;
                    let count = T::real(groups as f64);
                    let gv = self.value(gamma).data().to_vec();

                    // per-feature reductions of g and g*x_hat
                    let mut sum_g = vec![T::zero(); features];
                    let mut sum_gh = vec![T::zero(); features];
                    for (grow, hrow) in g.data().chunks(features).zip(x_hat.data().chunks(features)) {
                        for f in 0..features {
                            sum_g[f] += grow[f];
                            sum_gh[f] += grow[f] * hrow[f];
                        }
                    }
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(x_hat.len());
                        for (grow, hrow) in g.data().chunks(features).zip(x_hat.data().chunks(features)) {
                            for f in 0..features {
                                let term = count * grow[f] - sum_g[f] - hrow[f] * sum_gh[f];
                                dx.push(gv[f] * inv_std[f] / count * term);
                            }
                        }
                        accumulate(
                            &mut grads,
                            x.0,
                            Tensor::from_vec(x_hat.shape().to_vec(), dx)?,
                        )?;
                    }
                    if self.needs(gamma) {
                        accumulate(&mut grads, gamma.0, Tensor::from_vec(vec![features], sum_gh)?)?;
                    }
                    if self.needs(beta) {
                        accumulate(&mut grads, beta.0, Tensor::from_vec(vec![features], sum_g)?)?;
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let features = inv_std.len();
                    let gv = self.value(gamma).data().to_vec();
                    let xv = self.value(x).clone();
                    let mut sum_g = vec![T::zero(); features];
                    let mut sum_gh = vec![T::zero(); features];
                    for (grow, xrow) in g.data().chunks(features).zip(xv.data().chunks(features)) {
                        for f in 0..features {
                            sum_g[f] += grow[f];
                            sum_gh[f] += grow[f] * (xrow[f] - mean.data()[f]) * inv_std[f];
                        }
                    }
                    if self.needs(x) {
                        let data: Vec<T> = g
                            .data()
                            .chunks(features)
                            .flat_map(|grow| {
                                grow.iter()
                                    .enumerate()
                                    .map(|(f, &gvl)| gvl * gv[f] * inv_std[f])
                                    .collect::<Vec<T>>()
                            })
                            .collect();
                        accumulate(&mut grads, x.0, Tensor::from_vec(xv.shape().to_vec(), data)?)?;
                    }
                    if self.needs(gamma) {
                        accumulate(&mut grads, gamma.0, Tensor::from_vec(vec![features], sum_gh)?)?;
                    }
                    if self.needs(beta) {
                        accumulate(&mut grads, beta.0, Tensor::from_vec(vec![features], sum_g)?)?;
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(grad) = grads[i].take() {
                    debug_assert_eq!(grad.shape(), node.value.shape());
                    out.insert(pid, grad);
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    idx: usize,
    contribution: Tensor<T>,
) -> Result<(), TensorError> {
    grads[idx] = Some(match grads[idx].take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}

/// Reduces a full-shaped adjoint to a rank-0 operand shape when the forward
/// broadcast a scalar.
fn reduce_to_shape<T: Real>(full: Tensor<T>, operand: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if operand.ndim() == 0 && full.ndim() != 0 {
        full.sum_all()
    } else {
        Ok(full)
    }
}

/// Adjoint of `c = contract(a, b)` with respect to `a`:
/// `da = contract(g, b over b's free axes)`, permuted back to `a`'s layout.
fn contract_adjoint_left<T: Real>(
    g: &Tensor<T>,
    b: &Tensor<T>,
    a_ndim: usize,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let free_a: Vec<usize> = (0..a_ndim).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|i| !axes_b.contains(i)).collect();
    let g_axes: Vec<usize> = (free_a.len()..free_a.len() + free_b.len()).collect();
    let da = g.contract(b, &g_axes, &free_b)?;
    // result layout: free_a (ascending), then b's contracted axes ascending
    let mut sorted_axes_b = axes_b.to_vec();
    sorted_axes_b.sort_unstable();
    let mut source_axis_of = vec![0usize; a_ndim];
    for (pos, &ax) in free_a.iter().enumerate() {
        source_axis_of[ax] = pos;
    }
    for (pos, &b_ax) in sorted_axes_b.iter().enumerate() {
        let pair = axes_b.iter().position(|&x| x == b_ax).unwrap();
        source_axis_of[axes_a[pair]] = free_a.len() + pos;
    }
    da.permute(&source_axis_of)
}

/// Adjoint of `c = contract(a, b)` with respect to `b`.
fn contract_adjoint_right<T: Real>(
    a: &Tensor<T>,
    g: &Tensor<T>,
    b_ndim: usize,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let free_a: Vec<usize> = (0..a.ndim()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b_ndim).filter(|i| !axes_b.contains(i)).collect();
    let g_axes: Vec<usize> = (0..free_a.len()).collect();
    let db = a.contract(g, &free_a, &g_axes)?;
    // result layout: a's contracted axes ascending, then free_b (ascending)
    let mut sorted_axes_a = axes_a.to_vec();
    sorted_axes_a.sort_unstable();
    let mut source_axis_of = vec![0usize; b_ndim];
    for (pos, &a_ax) in sorted_axes_a.iter().enumerate() {
        let pair = axes_a.iter().position(|&x| x == a_ax).unwrap();
        source_axis_of[axes_b[pair]] = pos;
    }
    for (pos, &ax) in free_b.iter().enumerate() {
        source_axis_of[ax] = sorted_axes_a.len() + pos;
    }
    db.permute(&source_axis_of)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut StdRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t64(shape, &data)
    }

    /// Central finite differences against the analytic gradient for a scalar
    /// function of several parameters.
    fn fd_check<F>(params: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.parameter(ParamId(i), p.clone()))
            .collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(ParamId(pi)).expect("gradient present");
            assert_eq!(analytic.shape(), p.shape());
            for e in 0..p.len() {
                let eval = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = params
                        .iter()
                        .enumerate()
                        .map(|(i, q)| {
                            let mut data = q.data().to_vec();
                            if i == pi {
                                data[e] += delta;
                            }
                            let t = Tensor::from_vec(q.shape().to_vec(), data).unwrap();
                            tape.parameter(ParamId(i), t)
                        })
                        .collect();
                    let loss = build(&mut tape, &ids);
                    tape.value(loss).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                assert!(
                    err <= 1e-8 || err / scale <= 1e-4,
                    "param {pi} elem {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn square_forward_and_grad() {
        let x = t64(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let xn = tape.parameter(ParamId(0), x);
        let y = tape.mul(xn, xn).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 4.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reshape_backward_is_inverse_reshape() {
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let xn = tape.parameter(ParamId(0), x);
        let r = tape.reshape(xn, &[6]).unwrap();
        let loss = tape.sum_all(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn tracked_contract_matches_untracked_bitwise() {
        let mut rng = StdRng::seed_from_u64(21);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let plain = a.contract(&b, &[1], &[0]).unwrap();
        let mut tape = Tape::new();
        let an = tape.constant(a);
        let bn = tape.constant(b);
        let cn = tape.contract(an, bn, &[1], &[0]).unwrap();
        assert_eq!(tape.value(cn), &plain);
    }

    #[test]
    fn matrix_product_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(22);
        let a = random(&[3, 3], &mut rng);
        let b = random(&[3, 3], &mut rng);
        fd_check(&[a, b], |tape, ids| {
            let c = tape.contract(ids[0], ids[1], &[1], &[0]).unwrap();
            tape.sum_all(c).unwrap()
        });
    }

    #[test]
    fn matrix_grad_closed_form() {
        // for C = A.B and L = sum(C): dA = 1.Bt, dB = At.1
        let mut rng = StdRng::seed_from_u64(23);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let an = tape.parameter(ParamId(0), a.clone());
        let bn = tape.parameter(ParamId(1), b.clone());
        let c = tape.contract(an, bn, &[1], &[0]).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ones = Tensor::filled(vec![2, 2], 1.0);
        let want_da = ones.contract(&b.permute(&[1, 0]).unwrap(), &[1], &[0]).unwrap();
        let want_db = a.permute(&[1, 0]).unwrap().contract(&ones, &[1], &[0]).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &want_da);
        assert_eq!(grads.get(ParamId(1)).unwrap(), &want_db);
    }

    #[test]
    fn constant_inputs_absent_from_gradient_map() {
        let mut tape = Tape::new();
        let x = tape.parameter(ParamId(0), t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(t64(&[2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.0.len(), 1);
        assert!(grads.get(ParamId(0)).is_some());
    }

    #[test]
    fn fd_contract_multi_axis_unordered() {
        let mut rng = StdRng::seed_from_u64(24);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[3, 5, 2], &mut rng);
        fd_check(&[a, b], |tape, ids| {
            let c = tape.contract(ids[0], ids[1], &[1, 0], &[0, 2]).unwrap();
            let s = tape.mul(c, c).unwrap();
            tape.sum_all(s).unwrap()
        });
    }

    #[test]
    fn fd_batch_matmul() {
        let mut rng = StdRng::seed_from_u64(25);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 2], &mut rng);
        fd_check(&[a, b], |tape, ids| {
            let c = tape.batch_matmul(ids[0], ids[1]).unwrap();
            let s = tape.mul(c, c).unwrap();
            tape.sum_all(s).unwrap()
        });
    }

    #[test]
    fn fd_permute_and_reshape() {
        let mut rng = StdRng::seed_from_u64(26);
        let a = random(&[2, 3, 4], &mut rng);
        fd_check(&[a], |tape, ids| {
            let p = tape.permute(ids[0], &[2, 0, 1]).unwrap();
            let r = tape.reshape(p, &[8, 3]).unwrap();
            let s = tape.mul(r, r).unwrap();
            tape.sum_all(s).unwrap()
        });
    }

    #[test]
    fn fd_elementwise_and_maps() {
        let mut rng = StdRng::seed_from_u64(27);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        fd_check(&[a, b], |tape, ids| {
            let sum = tape.add(ids[0], ids[1]).unwrap();
            let diff = tape.sub(ids[0], ids[1]).unwrap();
            let prod = tape.mul(sum, diff).unwrap();
            let s = tape.map(prod, MapOp::Sin).unwrap();
            let c = tape.map(s, MapOp::Cos).unwrap();
            let e = tape.map(c, MapOp::Exp).unwrap();
            let l = tape.map(e, MapOp::Log).unwrap();
            let n = tape.map(l, MapOp::Neg).unwrap();
            let sc = tape.scale(n, 0.7).unwrap();
            tape.sum_all(sc).unwrap()
        });
    }

    #[test]
    fn fd_scalar_broadcast() {
        let a = Tensor::scalar(0.8);
        let b = t64(&[3], &[0.2, -0.4, 0.6]);
        fd_check(&[a, b], |tape, ids| {
            let y = tape.mul(ids[0], ids[1]).unwrap();
            let z = tape.add(y, ids[1]).unwrap();
            tape.sum_all(z).unwrap()
        });
    }

    #[test]
    fn fd_select_and_stack() {
        let mut rng = StdRng::seed_from_u64(28);
        let a = random(&[2, 4, 3], &mut rng);
        fd_check(&[a], |tape, ids| {
            let s1 = tape.select(ids[0], 1, 0).unwrap();
            let s2 = tape.select(ids[0], 1, 2).unwrap();
            let st = tape.stack(&[s1, s2, s1]).unwrap();
            let sq = tape.mul(st, st).unwrap();
            tape.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn fd_log_softmax_and_sigmoid() {
        let mut rng = StdRng::seed_from_u64(29);
        let a = random(&[4, 3], &mut rng);
        fd_check(&[a.clone()], |tape, ids| {
            let ls = tape.log_softmax(ids[0]).unwrap();
            let sq = tape.mul(ls, ls).unwrap();
            tape.sum_all(sq).unwrap()
        });
        fd_check(&[a], |tape, ids| {
            let s = tape.sigmoid(ids[0]).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn fd_batch_norm_train_and_eval() {
        let mut rng = StdRng::seed_from_u64(30);
        let x = random(&[4, 2, 3], &mut rng);
        let gamma = t64(&[3], &[1.1, 0.9, 1.3]);
        let beta = t64(&[3], &[0.1, -0.2, 0.0]);
        fd_check(&[x.clone(), gamma.clone(), beta.clone()], |tape, ids| {
            let (y, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq).unwrap()
        });
        let mean = t64(&[3], &[0.05, -0.1, 0.2]);
        let var = t64(&[3], &[0.7, 1.2, 0.9]);
        fd_check(&[x, gamma, beta], |tape, ids| {
            let y = tape
                .batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)
                .unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.parameter(ParamId(0), Tensor::scalar(2.0));
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(AutodiffError::BackwardConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.parameter(ParamId(0), t64(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss { elements: 2 })
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(31);
            let a = random(&[3, 3], &mut rng);
            let b = random(&[3, 3], &mut rng);
            let mut tape = Tape::new();
            let an = tape.parameter(ParamId(0), a);
            let bn = tape.parameter(ParamId(1), b);
            let c = tape.contract(an, bn, &[1], &[0]).unwrap();
            let d = tape.add(c, an).unwrap();
            let e = tape.mul(d, bn).unwrap();
            let loss = tape.sum_all(e).unwrap();
            tape.backward(loss).unwrap()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1.get(ParamId(0)), g2.get(ParamId(0)));
        assert_eq!(g1.get(ParamId(1)), g2.get(ParamId(1)));
    }

    #[test]
    fn batch_norm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 2, 3], &[0.0; 6]));
        let g = tape.constant(t64(&[3], &[1.0; 3]));
        let b = tape.constant(t64(&[3], &[0.0; 3]));
        assert!(matches!(
            tape.batch_norm_train(x, g, b, 1e-5),
            Err(AutodiffError::BatchTooSmall { batch: 1 })
        ));
    }
}
