//! Dense row-major tensors with shape manipulation and pairwise contraction.
//!
//! [`Tensor`] is the universal value type of the crate: an immutable,
//! cheaply-clonable (`Arc`-backed) dense array of reals with explicit shape.
//! All operations are pure functions returning new tensors. There is no
//! implicit broadcasting; the only exception is elementwise arithmetic
//! against a rank-0 scalar.
//!
//! Contraction is implemented as permute-to-matrix plus matrix multiply,
//! which reproduces textbook matrix product exactly for the two-matrix case.
//! Every operation validates that its output is finite and reports a
//! [`TensorError::NonFinite`] instead of letting NaN/Inf propagate.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Real;

/// Errors from tensor construction and algebra.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("zero extent in shape {shape:?}; extents must be positive")]
    ZeroExtent { shape: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} (expects {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} out of range for tensor of {ndim} dimensions")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("duplicate axis {axis} in contraction axis list")]
    DuplicateAxis { axis: usize },
    #[error("contraction axis lists have different lengths: {left} vs {right}")]
    AxisCountMismatch { left: usize, right: usize },
    #[error("paired extents differ: {left} (axis {axis_left}) vs {right} (axis {axis_right})")]
    ExtentMismatch {
        left: usize,
        axis_left: usize,
        right: usize,
        axis_right: usize,
    },
    #[error("shape mismatch for elementwise op: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("cannot reshape {elements} elements into {requested:?} ({requested_elements})")]
    ReshapeCount {
        elements: usize,
        requested: Vec<usize>,
        requested_elements: usize,
    },
    #[error("{perm:?} is not a valid permutation of 0..{ndim}")]
    InvalidPermutation { perm: Vec<usize>, ndim: usize },
    #[error("log of non-positive value {value}")]
    LogNonPositive { value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("batch_matmul expects rank-3 operands with matching batch; got {left:?} and {right:?}")]
    BatchShape { left: Vec<usize>, right: Vec<usize> },
}

/// Binary elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

/// Unary pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapOp<T> {
    Scale(T),
    Sin,
    Cos,
    Log,
    Exp,
    Neg,
}

/// Dense real tensor with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

/// Row-major strides for a shape (last axis fastest).
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from a shape and row-major data, validating lengths
    /// and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected = element_count(&shape);
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op results whose inputs were already valid.
    fn from_op(shape: Vec<usize>, data: Vec<T>, op: &'static str) -> Result<Self, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        debug_assert_eq!(element_count(&shape), data.len());
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    /// Basis vector e_index of the given length.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut data = vec![T::zero(); len];
        data[index] = T::one();
        Self {
            shape: vec![len],
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value at a multi-index.
    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let s = strides(&self.shape);
        let flat: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[flat]
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterprets the shape without touching data.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self, TensorError> {
        if new_shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent {
                shape: new_shape.to_vec(),
            });
        }
        let requested = element_count(new_shape);
        if requested != self.data.len() {
            return Err(TensorError::ReshapeCount {
                elements: self.data.len(),
                requested: new_shape.to_vec(),
                requested_elements: requested,
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Reorders axes: `result[i_perm(0), ...] = self[i_0, ...]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let ndim = self.ndim();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidPermutation {
                perm: perm.to_vec(),
                ndim,
            });
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        // stride to advance in the input when the k-th output axis increments
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        let mut counter = vec![0usize; ndim];
        let mut offset = 0usize;
        let src = self.data.as_slice();
        for _ in 0..n {
            out.push(src[offset]);
            for axis in (0..ndim).rev() {
                counter[axis] += 1;
                offset += step[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                counter[axis] = 0;
                offset -= step[axis] * out_shape[axis];
            }
        }
        Ok(Self {
            shape: out_shape,
            data: Arc::new(out),
        })
    }

    /// Pairwise tensor contraction: sums over the paired axes
    /// (`axes_a[i]` against `axes_b[i]`); the result carries the free axes of
    /// `self` followed by the free axes of `other`. Empty axis lists give the
    /// outer product.
    pub fn contract(
        &self,
        other: &Self,
        axes_a: &[usize],
        axes_b: &[usize],
    ) -> Result<Self, TensorError> {
        if axes_a.len() != axes_b.len() {
            return Err(TensorError::AxisCountMismatch {
                left: axes_a.len(),
                right: axes_b.len(),
            });
        }
        validate_axes(axes_a, self.ndim())?;
        validate_axes(axes_b, other.ndim())?;
        for (&ia, &ib) in axes_a.iter().zip(axes_b) {
            if self.shape[ia] != other.shape[ib] {
                return Err(TensorError::ExtentMismatch {
                    left: self.shape[ia],
                    axis_left: ia,
                    right: other.shape[ib],
                    axis_right: ib,
                });
            }
        }
        let free_a: Vec<usize> = (0..self.ndim()).filter(|i| !axes_a.contains(i)).collect();
        let free_b: Vec<usize> = (0..other.ndim()).filter(|i| !axes_b.contains(i)).collect();
        let fa: usize = free_a.iter().map(|&i| self.shape[i]).product();
        let fb: usize = free_b.iter().map(|&i| other.shape[i]).product();
        let k: usize = axes_a.iter().map(|&i| self.shape[i]).product();

        let mut perm_a = free_a.clone();
        perm_a.extend_from_slice(axes_a);
        let mut perm_b = axes_b.to_vec();
        perm_b.extend_from_slice(&free_b);
        let a_mat = self.permute(&perm_a)?;
        let b_mat = other.permute(&perm_b)?;

        let mut out = vec![T::zero(); fa * fb];
        matmul(a_mat.data(), b_mat.data(), fa, k, fb, &mut out);

        let mut out_shape: Vec<usize> = free_a.iter().map(|&i| self.shape[i]).collect();
        out_shape.extend(free_b.iter().map(|&i| other.shape[i]));
        Self::from_op(out_shape, out, "contract")
    }

    /// Batched matrix multiply: `(B, p, q) x (B, q, r) -> (B, p, r)`.
    ///
    /// Plumbing for vectorizing MPS chain products over a batch; not part of
    /// the pairwise-contraction algebra.
    pub fn batch_matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return Err(TensorError::BatchShape {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (bsz, p, q) = (self.shape[0], self.shape[1], self.shape[2]);
        let r = other.shape[2];
        let mut out = vec![T::zero(); bsz * p * r];
        let work = bsz * p * q * r;
        let a = self.data.as_slice();
        let b = other.data.as_slice();
        if work > 1 << 16 {
            out.par_chunks_mut(p * r)
                .enumerate()
                .for_each(|(i, chunk)| matmul(&a[i * p * q..(i + 1) * p * q], &b[i * q * r..(i + 1) * q * r], p, q, r, chunk));
        } else {
            for i in 0..bsz {
                matmul(
                    &a[i * p * q..(i + 1) * p * q],
                    &b[i * q * r..(i + 1) * q * r],
                    p,
                    q,
                    r,
                    &mut out[i * p * r..(i + 1) * p * r],
                );
            }
        }
        Self::from_op(vec![bsz, p, r], out, "batch_matmul")
    }

    /// Elementwise binary op. Shapes must match exactly, except that a rank-0
    /// scalar operand broadcasts against any shape.
    pub fn elementwise(&self, other: &Self, op: BinOp) -> Result<Self, TensorError> {
        let apply = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<T>) = if self.shape == other.shape {
            (
                self.shape.clone(),
                self.data.iter().zip(other.data.iter()).map(|(&x, &y)| apply(x, y)).collect(),
            )
        } else if other.ndim() == 0 {
            let y = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&x| apply(x, y)).collect())
        } else if self.ndim() == 0 {
            let x = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&y| apply(x, y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        };
        Self::from_op(shape, data, "elementwise")
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.elementwise(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.elementwise(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.elementwise(other, BinOp::Mul)
    }

    /// Pointwise map over all elements.
    pub fn map(&self, op: MapOp<T>) -> Result<Self, TensorError> {
        if let MapOp::Log = op {
            if let Some(bad) = self.data.iter().find(|v| **v <= T::zero()) {
                return Err(TensorError::LogNonPositive {
                    value: bad.to_f64_lossy(),
                });
            }
        }
        let data: Vec<T> = self
            .data
            .iter()
            .map(|&x| match op {
                MapOp::Scale(c) => x * c,
                MapOp::Sin => x.sin(),
                MapOp::Cos => x.cos(),
                MapOp::Log => x.ln(),
                MapOp::Exp => x.exp(),
                MapOp::Neg => -x,
            })
            .collect();
        Self::from_op(self.shape.clone(), data, "map")
    }

    pub fn scale(&self, c: T) -> Result<Self, TensorError> {
        self.map(MapOp::Scale(c))
    }

    pub fn neg(&self) -> Result<Self, TensorError> {
        self.map(MapOp::Neg)
    }

    /// Sum of all elements as a rank-0 tensor. Accumulation order is fixed
    /// (row-major) for reproducibility.
    pub fn sum_all(&self) -> Result<Self, TensorError> {
        let mut acc = T::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        Self::from_op(vec![], vec![acc], "sum_all")
    }

    /// Extracts the sub-tensor at `index` along `axis` (the axis is removed).
    pub fn select(&self, axis: usize, index: usize) -> Result<Self, TensorError> {
        if axis >= self.ndim() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                ndim: self.ndim(),
            });
        }
        if index >= self.shape[axis] {
            return Err(TensorError::AxisOutOfRange {
                axis: index,
                ndim: self.shape[axis],
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let src = self.data.as_slice();
        for o in 0..outer {
            let base = (o * extent + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self::from_op(shape, out, "select")
    }

    /// Stacks equally-shaped tensors along a new axis 1 (after the leading
    /// axis): `N x (B, f...) -> (B, N, f...)`.
    pub fn stack_axis1(parts: &[Self]) -> Result<Self, TensorError> {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let first = &parts[0];
        for p in parts.iter().skip(1) {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let b = first.shape[0];
        let inner: usize = first.shape[1..].iter().product();
        let n = parts.len();
        let mut out = vec![T::zero(); b * n * inner];
        for (j, part) in parts.iter().enumerate() {
            let src = part.data.as_slice();
            for bi in 0..b {
                let dst = (bi * n + j) * inner;
                out[dst..dst + inner].copy_from_slice(&src[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut shape = vec![b, n];
        shape.extend_from_slice(&first.shape[1..]);
        Self::from_op(shape, out, "stack")
    }
}

fn validate_axes(axes: &[usize], ndim: usize) -> Result<(), TensorError> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= ndim {
            return Err(TensorError::AxisOutOfRange { axis: a, ndim });
        }
        if axes[..i].contains(&a) {
            return Err(TensorError::DuplicateAxis { axis: a });
        }
    }
    Ok(())
}

/// Row-major matrix multiply `(m, k) x (k, n)`, accumulating into `out`.
/// Rows are independent, so the parallel path is bitwise identical to the
/// sequential one.
fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n > 1 << 16 && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
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

    /// Brute-force contraction oracle: explicit loop nest over free and
    /// paired indices, independent of the permute+matmul path.
    fn contract_oracle(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        axes_a: &[usize],
        axes_b: &[usize],
    ) -> Tensor<f64> {
        let free_a: Vec<usize> = (0..a.ndim()).filter(|i| !axes_a.contains(i)).collect();
        let free_b: Vec<usize> = (0..b.ndim()).filter(|i| !axes_b.contains(i)).collect();
        let mut out_shape: Vec<usize> = free_a.iter().map(|&i| a.shape()[i]).collect();
        out_shape.extend(free_b.iter().map(|&i| b.shape()[i]));
        let k_dims: Vec<usize> = axes_a.iter().map(|&i| a.shape()[i]).collect();
        let out_len: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; out_len];
        let multi = |mut flat: usize, dims: &[usize]| -> Vec<usize> {
            let mut idx = vec![0; dims.len()];
            for i in (0..dims.len()).rev() {
                idx[i] = flat % dims[i];
                flat /= dims[i];
            }
            idx
        };
        let k_total: usize = k_dims.iter().product::<usize>().max(1);
        for (flat, slot) in out.iter_mut().enumerate() {
            let out_idx = multi(flat, &out_shape);
            let mut acc = 0.0;
            for kf in 0..k_total {
                let k_idx = multi(kf, &k_dims);
                let mut ia = vec![0; a.ndim()];
                for (pos, &ax) in free_a.iter().enumerate() {
                    ia[ax] = out_idx[pos];
                }
                for (pos, &ax) in axes_a.iter().enumerate() {
                    ia[ax] = k_idx[pos];
                }
                let mut ib = vec![0; b.ndim()];
                for (pos, &ax) in free_b.iter().enumerate() {
                    ib[ax] = out_idx[free_a.len() + pos];
                }
                for (pos, &ax) in axes_b.iter().enumerate() {
                    ib[ax] = k_idx[pos];
                }
                acc += a.get(&ia) * b.get(&ib);
            }
            *slot = acc;
        }
        Tensor::from_vec(out_shape, out).unwrap()
    }

    #[test]
    fn identity_contract_leaves_matrix_unchanged() {
        let eye = t64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = t64(&[3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let c = eye.contract(&b, &[1], &[0]).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn dot_product() {
        let a = t64(&[3], &[1.0, 2.0, 3.0]);
        let b = t64(&[3], &[4.0, 5.0, 6.0]);
        let c = a.contract(&b, &[0], &[0]).unwrap();
        assert_eq!(c.shape(), &[] as &[usize]);
        assert_eq!(c.item(), 32.0);
    }

    #[test]
    fn contract_matches_loop_nest_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let got = a.contract(&b, &[2], &[0]).unwrap();
        let want = contract_oracle(&a, &b, &[2], &[0]);
        assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_relative_eq!(g, w, max_relative = 1e-12);
        }
    }

    #[test]
    fn contract_multi_axis_matches_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[3, 5, 2], &mut rng);
        let got = a.contract(&b, &[1, 0], &[0, 2]).unwrap();
        let want = contract_oracle(&a, &b, &[1, 0], &[0, 2]);
        assert_eq!(got.shape(), &[4, 5]);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_relative_eq!(g, w, max_relative = 1e-12);
        }
    }

    #[test]
    fn matrix_contract_equals_triple_loop_exactly_on_integers() {
        let a = t64(&[3, 4], &(0..12).map(|v| (v % 7) as f64 - 3.0).collect::<Vec<_>>());
        let b = t64(&[4, 5], &(0..20).map(|v| (v % 5) as f64 - 2.0).collect::<Vec<_>>());
        let c = a.contract(&b, &[1], &[0]).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                assert_eq!(c.get(&[i, j]), acc);
            }
        }
    }

    #[test]
    fn contract_is_bilinear() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random(&[2, 3], &mut rng);
            let a2 = random(&[2, 3], &mut rng);
            let b = random(&[3, 2], &mut rng);
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let lhs = a
                .scale(alpha)
                .unwrap()
                .add(&a2.scale(beta).unwrap())
                .unwrap()
                .contract(&b, &[1], &[0])
                .unwrap();
            let rhs = a
                .contract(&b, &[1], &[0])
                .unwrap()
                .scale(alpha)
                .unwrap()
                .add(&a2.contract(&b, &[1], &[0]).unwrap().scale(beta).unwrap())
                .unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                assert_relative_eq!(l, r, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn outer_product_via_empty_axes() {
        let a = t64(&[2], &[1.0, 2.0]);
        let b = t64(&[3], &[3.0, 4.0, 5.0]);
        let c = a.contract(&b, &[], &[]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn contract_shape_mismatch_names_extents() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[4, 2], &[0.0; 8]);
        let err = a.contract(&b, &[1], &[0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "got: {msg}");
    }

    #[test]
    fn contract_axis_out_of_range() {
        let a = t64(&[2], &[0.0; 2]);
        let b = t64(&[2], &[0.0; 2]);
        assert!(matches!(
            a.contract(&b, &[1], &[0]),
            Err(TensorError::AxisOutOfRange { axis: 1, ndim: 1 })
        ));
    }

    #[test]
    fn reshape_preserves_order() {
        let a = t64(&[6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = a.reshape(&[2, 3]).unwrap();
        assert_eq!(b.get(&[1, 0]), 3.0);
        assert_eq!(b.data(), a.data());
    }

    #[test]
    fn reshape_roundtrip_is_identity() {
        let mut rng = StdRng::seed_from_u64(14);
        let a = random(&[2, 3, 4], &mut rng);
        let b = a.reshape(&[24]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reshape_matches_index_arithmetic() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = t64(&[2, 3, 4], &data);
        let b = a.reshape(&[24]).unwrap().reshape(&[4, 6]).unwrap();
        // row-major flat index is invariant across reshapes
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let flat = (i * 3 + j) * 4 + k;
                    assert_eq!(a.get(&[i, j, k]), b.get(&[flat / 6, flat % 6]));
                }
            }
        }
    }

    #[test]
    fn reshape_count_mismatch() {
        let a = t64(&[6], &[0.0; 6]);
        assert!(matches!(a.reshape(&[4]), Err(TensorError::ReshapeCount { .. })));
    }

    #[test]
    fn permute_transposes_matrix() {
        let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.permute(&[1, 0]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(b.get(&[j, i]), a.get(&[i, j]));
            }
        }
    }

    #[test]
    fn identity_permutation_is_bitwise_equal() {
        let mut rng = StdRng::seed_from_u64(15);
        let a = random(&[3, 4], &mut rng);
        assert_eq!(a.permute(&[0, 1]).unwrap(), a);
    }

    #[test]
    fn permute_matches_exhaustive_index_check() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = t64(&[2, 3, 4], &data);
        let b = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(b.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(b.get(&[k, i, j]), a.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn invalid_permutation_rejected() {
        let a = t64(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.permute(&[0, 0]), Err(TensorError::InvalidPermutation { .. })));
        assert!(matches!(a.permute(&[0]), Err(TensorError::InvalidPermutation { .. })));
    }

    #[test]
    fn elementwise_add_and_scale() {
        let a = t64(&[2], &[1.0, 2.0]);
        let b = t64(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.scale(0.0).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(
            a.add(&t64(&[3], &[0.0; 3])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scalar_broadcast_allowed() {
        let a = t64(&[2], &[1.0, 2.0]);
        let s = Tensor::scalar(10.0);
        assert_eq!(a.mul(&s).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[9.0, 8.0]);
    }

    #[test]
    fn sin_asin_roundtrip() {
        let xs: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let t = t64(&[21], &xs);
        let back = t.map(MapOp::Sin).unwrap();
        for (x, y) in xs.iter().zip(back.data()) {
            assert!((y.asin() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_non_positive_is_error() {
        let a = t64(&[2], &[1.0, 0.0]);
        assert!(matches!(a.map(MapOp::Log), Err(TensorError::LogNonPositive { .. })));
    }

    #[test]
    fn non_finite_result_is_reported() {
        let a = t64(&[1], &[1e308]);
        assert!(matches!(a.map(MapOp::Exp), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn batch_matmul_matches_per_slice_contract() {
        let mut rng = StdRng::seed_from_u64(16);
        let a = random(&[3, 2, 4], &mut rng);
        let b = random(&[3, 4, 5], &mut rng);
        let c = a.batch_matmul(&b).unwrap();
        for i in 0..3 {
            let ai = a.select(0, i).unwrap();
            let bi = b.select(0, i).unwrap();
            let ci = ai.contract(&bi, &[1], &[0]).unwrap();
            assert_eq!(c.select(0, i).unwrap(), ci);
        }
    }

    #[test]
    fn select_and_stack_roundtrip() {
        let mut rng = StdRng::seed_from_u64(17);
        let x = random(&[2, 5, 3], &mut rng);
        let parts: Vec<_> = (0..5).map(|j| x.select(1, j).unwrap()).collect();
        let back = Tensor::stack_axis1(&parts).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn sum_all_scalar() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.sum_all().unwrap().item(), 10.0);
    }

    proptest! {
        #[test]
        fn prop_reshape_roundtrip(data in proptest::collection::vec(-1.0f64..1.0, 24..=24)) {
            let a = t64(&[2, 3, 4], &data);
            prop_assert_eq!(a.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap(), a);
        }

        #[test]
        fn prop_permute_inverse_roundtrip(data in proptest::collection::vec(-1.0f64..1.0, 24..=24)) {
            let a = t64(&[2, 3, 4], &data);
            // inverse of (2, 0, 1) is (1, 2, 0)
            let b = a.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
