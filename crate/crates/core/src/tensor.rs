//! Sparse and dense tensor containers and the multilinear kernels used by
//! training, evaluation and querying.
//!
//! All indices are 0-based in memory. Dense tensors are stored row-major over
//! modes `0..N` (the last mode varies fastest).

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                None,
                format!(
                    "matrix {rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    None,
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                None,
                format!(
                    "cannot multiply {}x{} by {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Dense N-mode array, row-major over modes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(
                None,
                format!("tensor dims must be positive, got {dims:?}"),
            ));
        }
        let len: usize = dims.iter().product();
        if values.len() != len {
            return Err(Error::shape(
                None,
                format!(
                    "dims {dims:?} need {len} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(DenseTensor { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        DenseTensor::new(dims, vec![0.0; len])
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.linear_index(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let l = self.linear_index(index);
        self.values[l] = v;
    }

    /// Mode-`n` product `t ×_n m` with `m` of shape `K × dims[n]`:
    /// `out[.., k, ..] = Σ_i t[.., i, ..] · m[k, i]`.
    pub fn mode_n_product(&self, m: &Matrix, n: usize) -> Result<DenseTensor> {
        if n >= self.order() {
            return Err(Error::Index(format!(
                "mode {} out of range for a {}-mode tensor",
                n + 1,
                self.order()
            )));
        }
        let in_n = self.dims[n];
        if m.cols() != in_n {
            return Err(Error::shape(
                Some(n),
                format!(
                    "matrix has {} columns but the tensor mode has size {in_n}",
                    m.cols()
                ),
            ));
        }
        let k = m.rows();
        let outer: usize = self.dims[..n].iter().product();
        let inner: usize = self.dims[n + 1..].iter().product();
        let mut dims = self.dims.clone();
        dims[n] = k;
        let mut out = vec![0.0; outer * k * inner];
        for o in 0..outer {
            let src = &self.values[o * in_n * inner..(o + 1) * in_n * inner];
            let dst = &mut out[o * k * inner..(o + 1) * k * inner];
            for (kk, dst_slab) in dst.chunks_exact_mut(inner).enumerate() {
                for (i, src_slab) in src.chunks_exact(inner).enumerate() {
                    let a = m.get(kk, i);
                    for (d, &s) in dst_slab.iter_mut().zip(src_slab) {
                        *d += a * s;
                    }
                }
            }
        }
        DenseTensor::new(dims, out)
    }
}

fn check_rows<R: AsRef<[f64]>>(dims: &[usize], rows: &[R], skip: Option<usize>) -> Result<()> {
    if rows.len() != dims.len() {
        return Err(Error::shape(
            None,
            format!("expected {} factor rows, got {}", dims.len(), rows.len()),
        ));
    }
    for (n, (r, &d)) in rows.iter().zip(dims).enumerate() {
        if Some(n) == skip {
            continue;
        }
        if r.as_ref().len() != d {
            return Err(Error::shape(
                Some(n),
                format!("factor row has length {}, core mode has size {d}", r.as_ref().len()),
            ));
        }
    }
    Ok(())
}

/// Advances a row-major multi-index; returns false after the last element.
#[inline]
fn advance(index: &mut [usize], dims: &[usize]) -> bool {
    for m in (0..dims.len()).rev() {
        index[m] += 1;
        if index[m] < dims[m] {
            return true;
        }
        index[m] = 0;
    }
    false
}

/// The cached intermediate tensor `D = G ∗ (u¹ ∘ u² ∘ … ∘ uᴺ)`.
///
/// The sum of all elements of `D` is the reconstructed value for the entry
/// selecting those rows.
pub fn scaled_core<R: AsRef<[f64]>>(core: &DenseTensor, rows: &[R]) -> Result<DenseTensor> {
    check_rows(core.dims(), rows, None)?;
    let dims = core.dims();
    let mut out = Vec::with_capacity(core.values.len());
    let mut idx = vec![0usize; dims.len()];
    for &g in &core.values {
        let p: f64 = idx
            .iter()
            .zip(rows)
            .map(|(&j, r)| r.as_ref()[j])
            .product();
        out.push(g * p);
        advance(&mut idx, dims);
    }
    DenseTensor::new(dims.to_vec(), out)
}

/// Contracts the core with every factor row except mode `n`'s.
///
/// Component `j` is `Σ_{j_n = j} g · Π_{m≠n} rows[m][j_m]`, i.e. the gradient
/// of the reconstructed value with respect to `rows[n]`. `rows[n]` is ignored.
pub fn mode_gradient_vector<R: AsRef<[f64]>>(
    core: &DenseTensor,
    rows: &[R],
    n: usize,
) -> Result<Vec<f64>> {
    if n >= core.order() {
        return Err(Error::Index(format!(
            "mode {} out of range for a {}-mode core",
            n + 1,
            core.order()
        )));
    }
    check_rows(core.dims(), rows, Some(n))?;
    let dims = core.dims();
    let mut out = vec![0.0; dims[n]];
    let mut idx = vec![0usize; dims.len()];
    for &g in &core.values {
        let p: f64 = idx
            .iter()
            .zip(rows)
            .enumerate()
            .filter(|&(m, _)| m != n)
            .map(|(_, (&j, r))| r.as_ref()[j])
            .product();
        out[idx[n]] += g * p;
        advance(&mut idx, dims);
    }
    Ok(out)
}

/// Everything one sampled entry needs from the core, computed in a single
/// pass: the reconstruction, each mode's gradient vector and the outer
/// product of the rows (the core gradient direction).
#[derive(Debug, Clone)]
pub struct CoreContraction {
    pub reconstruction: f64,
    pub mode_gradients: Vec<Vec<f64>>,
    pub outer: Vec<f64>,
    index: Vec<usize>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

impl CoreContraction {
    pub fn new(core_dims: &[usize]) -> Self {
        let n = core_dims.len();
        CoreContraction {
            reconstruction: 0.0,
            mode_gradients: core_dims.iter().map(|&d| vec![0.0; d]).collect(),
            outer: vec![0.0; core_dims.iter().product()],
            index: vec![0; n],
            prefix: vec![1.0; n + 1],
            suffix: vec![1.0; n + 1],
        }
    }

    /// `core` is the linearized core with dims `core_dims`; rows must already
    /// have been shape-checked by the caller.
    pub fn compute<R: AsRef<[f64]>>(&mut self, core: &[f64], core_dims: &[usize], rows: &[R]) {
        let n = core_dims.len();
        debug_assert_eq!(core.len(), self.outer.len());
        for g in &mut self.mode_gradients {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.index.iter_mut().for_each(|j| *j = 0);
        let mut total = 0.0;
        for (l, &g) in core.iter().enumerate() {
            for m in 0..n {
                self.prefix[m + 1] = self.prefix[m] * rows[m].as_ref()[self.index[m]];
            }
            for m in (0..n).rev() {
                self.suffix[m] = self.suffix[m + 1] * rows[m].as_ref()[self.index[m]];
            }
            let full = self.prefix[n];
            self.outer[l] = full;
            total += g * full;
            for m in 0..n {
                self.mode_gradients[m][self.index[m]] += g * self.prefix[m] * self.suffix[m + 1];
            }
            advance(&mut self.index, core_dims);
        }
        self.reconstruction = total;
    }
}

/// Square root of the sum of squared entries (stored entries only, for sparse data).
pub trait FrobeniusNorm {
    fn frobenius_norm(&self) -> f64;
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl FrobeniusNorm for DenseTensor {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.values)
    }
}

impl FrobeniusNorm for Matrix {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.data)
    }
}

impl FrobeniusNorm for SparseTensor {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.values)
    }
}

/// Observed entries of an N-mode tensor plus per-row occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    dims: Vec<usize>,
    /// Flattened 0-based index vectors, `order` per entry.
    indices: Vec<u32>,
    values: Vec<f64>,
    row_counts: Vec<Vec<u32>>,
}

/// Why a single entry was refused by [`SparseTensorBuilder::push`].
#[derive(Debug, Clone, PartialEq)]
pub enum EntryRejection {
    Arity { expected: usize, got: usize },
    OutOfRange { mode: usize, index: usize, size: usize },
    Duplicate,
}

impl std::fmt::Display for EntryRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntryRejection::Arity { expected, got } => {
                write!(f, "expected {expected} indices, got {got}")
            }
            EntryRejection::OutOfRange { mode, index, size } => write!(
                f,
                "index {} out of range 1..={size} in mode {}",
                index + 1,
                mode + 1
            ),
            EntryRejection::Duplicate => write!(f, "duplicate index vector"),
        }
    }
}

enum KeySet {
    Linear { strides: Vec<u128>, seen: HashSet<u128> },
    Full(HashSet<Box<[u32]>>),
}

/// Incrementally assembles a [`SparseTensor`], rejecting out-of-range and
/// duplicate index vectors as they arrive.
pub struct SparseTensorBuilder {
    dims: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    keys: KeySet,
}

impl SparseTensorBuilder {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(
                None,
                format!("tensor dims must be positive, got {dims:?}"),
            ));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::shape(None, "mode size exceeds u32 range"));
        }
        let mut strides = vec![1u128; dims.len()];
        let mut fits = true;
        let mut acc: u128 = 1;
        for m in (0..dims.len()).rev() {
            strides[m] = acc;
            match acc.checked_mul(dims[m] as u128) {
                Some(v) => acc = v,
                None => {
                    fits = false;
                    break;
                }
            }
        }
        let keys = if fits {
            KeySet::Linear {
                strides,
                seen: HashSet::new(),
            }
        } else {
            KeySet::Full(HashSet::new())
        };
        Ok(SparseTensorBuilder {
            dims,
            indices: Vec::new(),
            values: Vec::new(),
            keys,
        })
    }

    pub fn reserve(&mut self, entries: usize) {
        self.indices.reserve(entries * self.dims.len());
        self.values.reserve(entries);
        if let KeySet::Linear { seen, .. } = &mut self.keys {
            seen.reserve(entries);
        }
    }

    /// Adds an entry with a 0-based index vector.
    pub fn push(&mut self, index: &[usize], value: f64) -> std::result::Result<(), EntryRejection> {
        if index.len() != self.dims.len() {
            return Err(EntryRejection::Arity {
                expected: self.dims.len(),
                got: index.len(),
            });
        }
        for (mode, (&i, &size)) in index.iter().zip(&self.dims).enumerate() {
            if i >= size {
                return Err(EntryRejection::OutOfRange {
                    mode,
                    index: i,
                    size,
                });
            }
        }
        let fresh = match &mut self.keys {
            KeySet::Linear { strides, seen } => {
                let key = index
                    .iter()
                    .zip(strides.iter())
                    .map(|(&i, &s)| i as u128 * s)
                    .sum();
                seen.insert(key)
            }
            KeySet::Full(seen) => seen.insert(index.iter().map(|&i| i as u32).collect()),
        };
        if !fresh {
            return Err(EntryRejection::Duplicate);
        }
        self.indices.extend(index.iter().map(|&i| i as u32));
        self.values.push(value);
        Ok(())
    }

    pub fn build(self) -> SparseTensor {
        SparseTensor::assemble(self.dims, self.indices, self.values)
    }
}

impl SparseTensor {
    fn assemble(dims: Vec<usize>, indices: Vec<u32>, values: Vec<f64>) -> Self {
        let order = dims.len();
        let mut row_counts: Vec<Vec<u32>> = dims.iter().map(|&d| vec![0; d]).collect();
        for idx in indices.chunks_exact(order) {
            for (counts, &i) in row_counts.iter_mut().zip(idx) {
                counts[i as usize] += 1;
            }
        }
        SparseTensor {
            dims,
            indices,
            values,
            row_counts,
        }
    }

    /// Builds a tensor from 0-based `(index, value)` pairs.
    pub fn from_entries<I>(dims: Vec<usize>, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<usize>, f64)>,
    {
        let mut b = SparseTensorBuilder::new(dims)?;
        for (k, (index, value)) in entries.into_iter().enumerate() {
            b.push(&index, value).map_err(|e| match e {
                EntryRejection::Duplicate => {
                    Error::Argument(format!("entry {k} {index:?}: duplicate index vector"))
                }
                other => Error::Index(format!("entry {k}: {other}")),
            })?;
        }
        Ok(b.build())
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    #[allow(clippy::should_implement_trait)]
    pub fn index(&self, e: usize) -> &[u32] {
        let n = self.order();
        &self.indices[e * n..(e + 1) * n]
    }

    #[inline]
    pub fn value(&self, e: usize) -> f64 {
        self.values[e]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[u32], f64)> + '_ {
        self.indices
            .chunks_exact(self.order())
            .zip(self.values.iter().copied())
    }

    /// `|Ω^{mode,i}|`: how many entries have `i` as their index in `mode`.
    #[inline]
    pub fn row_count(&self, mode: usize, i: usize) -> u32 {
        self.row_counts[mode][i]
    }

    pub fn row_counts(&self, mode: usize) -> &[u32] {
        &self.row_counts[mode]
    }

    /// Same sparsity pattern with replaced values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                None,
                format!("expected {} values, got {}", self.values.len(), values.len()),
            ));
        }
        Ok(SparseTensor {
            dims: self.dims.clone(),
            indices: self.indices.clone(),
            values,
            row_counts: self.row_counts.clone(),
        })
    }

    /// The tensor restricted to the given entry positions (in the given order).
    pub fn select(&self, entries: &[usize]) -> SparseTensor {
        let n = self.order();
        let mut indices = Vec::with_capacity(entries.len() * n);
        let mut values = Vec::with_capacity(entries.len());
        for &e in entries {
            indices.extend_from_slice(self.index(e));
            values.push(self.values[e]);
        }
        SparseTensor::assemble(self.dims.clone(), indices, values)
    }
}

/// One undirected, weighted edge between two entities of the constrained mode (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// Why an edge was refused by [`ConstraintGraph::add_edge`].
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeRejection {
    OutOfRange { index: usize, node_count: usize },
    SelfLoop,
    Duplicate,
    BadWeight(f64),
}

impl std::fmt::Display for EdgeRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EdgeRejection::OutOfRange { index, node_count } => {
                write!(f, "node {} out of range 1..={node_count}", index + 1)
            }
            EdgeRejection::SelfLoop => write!(f, "self-loop"),
            EdgeRejection::Duplicate => write!(f, "duplicate undirected edge"),
            EdgeRejection::BadWeight(w) => write!(f, "weight {w} must be finite and nonnegative"),
        }
    }
}

/// Weighted undirected graph over the entities of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGraph {
    node_count: usize,
    mode: usize,
    edges: Vec<Edge>,
    seen: HashSet<u64>,
}

impl ConstraintGraph {
    pub fn new(node_count: usize, mode: usize) -> Self {
        ConstraintGraph {
            node_count,
            mode,
            edges: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn from_edges<I>(node_count: usize, mode: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut g = ConstraintGraph::new(node_count, mode);
        for (k, (a, b, w)) in edges.into_iter().enumerate() {
            g.add_edge(a, b, w)
                .map_err(|e| Error::Argument(format!("edge {k} ({a}, {b}): {e}")))?;
        }
        Ok(g)
    }

    /// Adds the 0-based undirected edge `{a, b}`.
    pub fn add_edge(&mut self, a: usize, b: usize, weight: f64) -> std::result::Result<(), EdgeRejection> {
        for i in [a, b] {
            if i >= self.node_count {
                return Err(EdgeRejection::OutOfRange {
                    index: i,
                    node_count: self.node_count,
                });
            }
        }
        if a == b {
            return Err(EdgeRejection::SelfLoop);
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(EdgeRejection::BadWeight(weight));
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if !self.seen.insert(((lo as u64) << 32) | hi as u64) {
            return Err(EdgeRejection::Duplicate);
        }
        self.edges.push(Edge {
            a: a as u32,
            b: b as u32,
            weight,
        });
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// The constrained mode (0-based).
    pub fn mode(&self) -> usize {
        self.mode
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn dims3() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=3, 3)
    }

    fn tensor_and_rows() -> impl Strategy<Value = (DenseTensor, Vec<Vec<f64>>)> {
        dims3().prop_flat_map(|dims| {
            let len: usize = dims.iter().product();
            let rows = dims
                .iter()
                .map(|&d| prop::collection::vec(-2.0f64..2.0, d))
                .collect::<Vec<_>>();
            (
                prop::collection::vec(-2.0f64..2.0, len)
                    .prop_map(move |v| DenseTensor::new(dims.clone(), v).unwrap()),
                rows,
            )
        })
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    proptest! {
        #[test]
        fn identity_product_is_identity(dims in prop::collection::vec(1usize..=4, 1..=4), n in 0usize..4, seed in any::<u64>()) {
            let n = n % dims.len();
            let len: usize = dims.iter().product();
            let vals: Vec<f64> = (0..len).map(|k| ((seed.wrapping_add(k as u64) % 97) as f64) - 48.0).collect();
            let t = DenseTensor::new(dims.clone(), vals).unwrap();
            let out = t.mode_n_product(&Matrix::identity(dims[n]), n).unwrap();
            prop_assert_eq!(out, t);
        }

        #[test]
        fn scaled_core_sum_matches_brute_force((g, rows) in tensor_and_rows()) {
            let d = scaled_core(&g, &rows).unwrap();
            let dims = g.dims();
            let mut brute = 0.0;
            for a in 0..dims[0] {
                for b in 0..dims[1] {
                    for c in 0..dims[2] {
                        brute += g.get(&[a, b, c]) * rows[0][a] * rows[1][b] * rows[2][c];
                    }
                }
            }
            let sum: f64 = d.values().iter().sum();
            prop_assert!(rel_close(sum, brute, 1e-12) || (sum - brute).abs() < 1e-13);
        }

        #[test]
        fn gradient_dot_row_is_reconstruction((g, rows) in tensor_and_rows(), n in 0usize..3) {
            let grad = mode_gradient_vector(&g, &rows, n).unwrap();
            let dot: f64 = grad.iter().zip(&rows[n]).map(|(a, b)| a * b).sum();
            let sum: f64 = scaled_core(&g, &rows).unwrap().values().iter().sum();
            prop_assert!(rel_close(dot, sum, 1e-12) || (dot - sum).abs() < 1e-13);
        }

        #[test]
        fn products_in_distinct_modes_commute(
            (g, _) in tensor_and_rows(),
            a in prop::collection::vec(-2.0f64..2.0, 9),
            b in prop::collection::vec(-2.0f64..2.0, 9),
        ) {
            let dims = g.dims().to_vec();
            let ma = Matrix::from_vec(3, dims[0], a[..3 * dims[0]].to_vec()).unwrap();
            let mb = Matrix::from_vec(3, dims[1], b[..3 * dims[1]].to_vec()).unwrap();
            let ab = g.mode_n_product(&ma, 0).unwrap().mode_n_product(&mb, 1).unwrap();
            let ba = g.mode_n_product(&mb, 1).unwrap().mode_n_product(&ma, 0).unwrap();
            for (x, y) in ab.values().iter().zip(ba.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }
}
