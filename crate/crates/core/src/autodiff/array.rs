//! Immutable dense row-major `f64` arrays.
//!
//! Data is reference counted so clones are cheap and arrays can be shared
//! between threads. Every operation returns a fresh array.

use std::fmt;
use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Array{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Array{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("array shape must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("array shape {shape:?} has a zero dimension")));
    }
    Ok(shape.iter().product())
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Array {
            shape,
            data: data.into(),
        })
    }

    /// One-dimensional array. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Array {
            shape: vec![data.len()],
            data: data.into(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v].into(),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Array {
            shape: shape.to_vec(),
            data: vec![v; n].into(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary map under the restricted broadcasting rule:
    /// equal shapes, or one side holding a single value.
    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Array {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.is_scalar() {
            let b = other.item();
            return Ok(Array {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&a| f(a, b)).collect(),
            });
        }
        if self.is_scalar() {
            let a = self.item();
            return Ok(Array {
                shape: other.shape.clone(),
                data: other.data.iter().map(|&b| f(a, b)).collect(),
            });
        }
        Err(Error::invalid(format!(
            "shapes {:?} and {:?} are not broadcast-compatible",
            self.shape, other.shape
        )))
    }

    /// Shape produced by a broadcast binary op, without computing it.
    pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let la: usize = a.iter().product();
        let lb: usize = b.iter().product();
        if a == b || lb == 1 {
            Ok(a.to_vec())
        } else if la == 1 {
            Ok(b.to_vec())
        } else {
            Err(Error::invalid(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// `op(a) · op(b)` where `op` optionally transposes a matrix.
    pub fn gemm(&self, trans_a: bool, other: &Array, trans_b: bool) -> Result<Array> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        let a = ArrayView2::from_shape((ar, ac), &self.data[..]).expect("shape checked");
        let b = ArrayView2::from_shape((br, bc), &other.data[..]).expect("shape checked");
        let a = if trans_a { a.reversed_axes() } else { a };
        let b = if trans_b { b.reversed_axes() } else { b };
        if a.ncols() != b.nrows() {
            return Err(Error::invalid(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let (m, n) = (a.nrows(), b.ncols());
        let c = a.dot(&b);
        let data: Vec<f64> = if c.is_standard_layout() {
            c.into_raw_vec_and_offset().0
        } else {
            c.iter().copied().collect()
        };
        Array::matrix(m, n, data)
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        self.gemm(false, other, false)
    }

    pub fn transpose(&self) -> Result<Array> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array::matrix(c, r, out)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Sum along `axis`, keeping it with size one.
    pub fn sum_axis(&self, axis: usize) -> Result<Array> {
        let (outer, n, inner) = self.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Array::new(shape, out)
    }

    /// Repeat a size-one `axis` `n` times.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Array> {
        let (outer, m, inner) = self.axis_split(axis)?;
        if m != 1 {
            return Err(Error::invalid(format!(
                "axis {axis} of shape {:?} must have size 1 to expand",
                self.shape
            )));
        }
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = n;
        Array::new(shape, out)
    }

    pub fn concat_cols(parts: &[&Array]) -> Result<Array> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let rows = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::invalid("concat_cols row counts differ"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Array::matrix(rows, total, out)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Array> {
        let (r, c) = self.dims2()?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "column range {start}..{end} invalid for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Array::matrix(r, w, out)
    }

    /// Embed the columns at `offset` inside a zero matrix with `total` columns.
    pub fn pad_cols(&self, offset: usize, total: usize) -> Result<Array> {
        let (r, c) = self.dims2()?;
        if offset + c > total {
            return Err(Error::invalid("pad_cols target too narrow"));
        }
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + offset..i * total + offset + c].copy_from_slice(self.row(i));
        }
        Array::matrix(r, total, out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Serialize for Array {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            shape: &'a [usize],
            data: &'a [f64],
        }
        Repr {
            shape: &self.shape,
            data: &self.data,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Array {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let r = Repr::deserialize(d)?;
        Array::new(r.shape, r.data).map_err(serde::de::Error::custom)
    }
}
