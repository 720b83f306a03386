//! Dense row-major tensors and the contraction primitives everything else
//! is built on.
//!
//! All values are `f64`. The last index varies fastest in the flat buffer.
//! Contractions sum in a fixed order so results are bit-reproducible for
//! fixed inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and contraction.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected} elements for {dims:?}, got {got}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("extent mismatch on contracted axes ({axis_a}, {axis_b}): {extent_a} != {extent_b}")]
    ExtentMismatch {
        axis_a: usize,
        axis_b: usize,
        extent_a: usize,
        extent_b: usize,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("axis {0} listed more than once")]
    DuplicateAxis(usize),
    #[error("shapes differ: {0:?} vs {1:?}")]
    Incompatible(Vec<usize>, Vec<usize>),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value in tensor data")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Norms below this are treated as zero by cosine and normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Ordered list of positive extents. A rank-0 shape describes a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(TensorError::InvalidShape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the element count and finiteness.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != data.len() {
            return Err(TensorError::ShapeMismatch {
                dims: dims.to_vec(),
                expected: shape.numel(),
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    // Internal constructor for results whose length is known to be right.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// One-hot vector of length `n` with a one at `index`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(TensorError::InvalidAxis { axis: index, rank: n });
        }
        let mut t = Self::zeros(&[n])?;
        t.data[index] = 1.0;
        Ok(t)
    }

    /// Stacks equally-shaped rows into a `(rows.len(), width)` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(TensorError::InvalidShape("empty row set".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(TensorError::ShapeMismatch {
                    dims: vec![rows.len(), width],
                    expected: width,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(&[rows.len(), width], data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a multi-index. Panics on an out-of-range index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let strides = self.shape.strides();
        let mut off = 0;
        for ((&i, &d), &s) in index.iter().zip(self.dims()).zip(&strides) {
            assert!(i < d, "index {i} out of range for extent {d}");
            off += i * s;
        }
        self.data[off]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let w = self.dims()[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != self.len() {
            return Err(TensorError::ShapeMismatch {
                dims: dims.to_vec(),
                expected: shape.numel(),
                got: self.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if perm.len() != rank {
            return Err(TensorError::InvalidShape(format!(
                "permutation {perm:?} for rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank {
                return Err(TensorError::InvalidAxis { axis: p, rank });
            }
            if seen[p] {
                return Err(TensorError::DuplicateAxis(p));
            }
            seen[p] = true;
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather(&out_dims, &src_strides, &self.data);
        Ok(Tensor::from_parts(Shape(out_dims), data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::Incompatible(self.dims().to_vec(), other.dims().to_vec()));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Incompatible(self.dims().to_vec(), other.dims().to_vec()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Little-endian byte image of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

// Walks the output in row-major order, reading the source through strides.
fn gather(out_dims: &[usize], src_strides: &[usize], src: &[f64]) -> Vec<f64> {
    let n: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(n);
    if out_dims.is_empty() {
        out.push(src[0]);
        return out;
    }
    let rank = out_dims.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= src_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Reshapes a flat vector into `target` without reordering.
pub fn tensorize(v: &[f64], target: &Shape) -> Result<Tensor> {
    Tensor::from_vec(target.dims(), v.to_vec())
}

/// Row-major flattening.
pub fn vectorize(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// Sums over paired axes of `a` and `b`.
///
/// The result carries the uncontracted axes of `a` (in order) followed by
/// the uncontracted axes of `b`. An empty `axes` list gives the outer
/// product. Each output element is accumulated over the contracted
/// multi-index in row-major order of the pair list.
pub fn contract(a: &Tensor, b: &Tensor, axes: &[(usize, usize)]) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    let mut used_a = vec![false; ra];
    let mut used_b = vec![false; rb];
    for &(ia, ib) in axes {
        if ia >= ra {
            return Err(TensorError::InvalidAxis { axis: ia, rank: ra });
        }
        if ib >= rb {
            return Err(TensorError::InvalidAxis { axis: ib, rank: rb });
        }
        if used_a[ia] {
            return Err(TensorError::DuplicateAxis(ia));
        }
        if used_b[ib] {
            return Err(TensorError::DuplicateAxis(ib));
        }
        used_a[ia] = true;
        used_b[ib] = true;
        if a.dims()[ia] != b.dims()[ib] {
            return Err(TensorError::ExtentMismatch {
                axis_a: ia,
                axis_b: ib,
                extent_a: a.dims()[ia],
                extent_b: b.dims()[ib],
            });
        }
    }
    let free_a: Vec<usize> = (0..ra).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..rb).filter(|&i| !used_b[i]).collect();

    // a -> (free_a, contracted), b -> (contracted, free_b), then a matmul.
    let perm_a: Vec<usize> = free_a.iter().copied().chain(axes.iter().map(|p| p.0)).collect();
    let perm_b: Vec<usize> = axes.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
    let am = a.permute(&perm_a)?;
    let bm = b.permute(&perm_b)?;
    let m: usize = free_a.iter().map(|&i| a.dims()[i]).product();
    let n: usize = free_b.iter().map(|&i| b.dims()[i]).product();
    let k: usize = axes.iter().map(|p| a.dims()[p.0]).product();

    let data = matmul_raw(am.data(), bm.data(), m, k, n);
    let out_dims: Vec<usize> = free_a
        .iter()
        .map(|&i| a.dims()[i])
        .chain(free_b.iter().map(|&i| b.dims()[i]))
        .collect();
    Ok(Tensor::from_parts(Shape(out_dims), data))
}

// (m,k)·(k,n); for every output entry the k-sum runs in ascending order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bkj) in crow.iter_mut().zip(brow) {
                *cj += aik * bkj;
            }
        }
    }
    c
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(TensorError::Incompatible(vec![u.len()], vec![v.len()]));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(TensorError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scales `u` to unit Euclidean norm.
pub fn l2_normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if n < NORM_FLOOR {
        return Err(TensorError::ZeroNorm);
    }
    Ok(u.iter().map(|x| x / n).collect())
}
