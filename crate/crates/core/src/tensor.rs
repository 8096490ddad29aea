//! Dense row-major tensors, named parameter collections and the strided
//! matrix views used by the model kernels.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named collection of model arrays. Iteration order is lexicographic by
/// name, which is also the on-disk order of checkpoints.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Option<Tensor<S>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    /// Looks up a tensor, failing with a descriptive error when absent.
    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    /// Digest restricted to the names accepted by `keep`.
    pub fn digest_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| keep(k)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

impl<S> FromIterator<(String, Tensor<S>)> for ParamSet<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    /// Contiguous row-major matrix.
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with row
    /// stride `stride`.
    pub fn columns(data: &'a [S], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub(crate) struct MatMut<'a, S> {
    pub data: &'a mut [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> MatMut<'a, S> {
    pub fn new(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn columns(
        data: &'a mut [S],
        rows: usize,
        stride: usize,
        col0: usize,
        cols: usize,
    ) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, c: MatMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, MatMut::new(&mut c, 2, 4));
        for (x, y) in c.iter().zip(naive(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored as its transpose [3, 2]
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64 * 0.5 - 1.0)).collect();
        let mut c2 = vec![1.0; 8];
        gemm(1.0, MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4), 1.0, MatMut::new(&mut c2, 2, 4));
        for (x, y) in c2.iter().zip(&c) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn digest_changes_with_a_single_bit() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::filled(&[2, 2], 0.25));
        let before = p.digest();
        p.get_mut("w").unwrap().data_mut()[3] = f32::from_bits(0.25f32.to_bits() + 1);
        assert_ne!(before, p.digest());
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }
}
