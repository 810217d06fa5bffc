use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient buffer of the same
/// shape. Values are immutable from the perspective of ops: every operation
/// produces a fresh tensor, only optimizers and initializers write in place.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); len], grad: None }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; len], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Dimension {
                op: "tensor",
                axis: "element count for shape",
                expected: len,
                got: data.len(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    #[inline(always)]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        i * self.shape[1] + j
    }

    #[inline(always)]
    pub fn idx3(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + c
    }

    /// Contiguous row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Sum of all elements, accumulated in the wide type and rounded once.
    pub fn sum(&self) -> S {
        let mut acc = S::accum_zero();
        for &v in &self.data {
            acc += v.accum();
        }
        S::from_accum(acc)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Largest element's multi-index (first occurrence wins ties).
    pub fn argmax(&self) -> Vec<usize> {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        let mut idx = vec![0; self.shape.len()];
        let mut rem = best;
        for ax in (0..self.shape.len()).rev() {
            idx[ax] = rem % self.shape[ax];
            rem /= self.shape[ax];
        }
        idx
    }

    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![S::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn add_to_grad(&mut self, contribution: &[S]) {
        self.enable_grad();
        let g = self.grad.as_mut().unwrap();
        debug_assert_eq!(g.len(), contribution.len());
        for (gi, &ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }
}

pub(crate) fn dims2<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension { op, axis: "rank", expected: 2, got: t.rank() });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn dims3<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::Dimension { op, axis: "rank", expected: 3, got: t.rank() });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

pub(crate) fn dims4<S: Scalar>(
    op: &'static str,
    t: &Tensor<S>,
) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::Dimension { op, axis: "rank", expected: 4, got: t.rank() });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}
