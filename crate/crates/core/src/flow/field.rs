use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, DiffNode};
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// A time-dependent velocity field `f(z, t)` on `R^d`.
pub trait VectorField {
    fn data_dim(&self) -> usize;

    /// Evaluate on a batch: `z` is `rows × d`, `t` is `rows × 1`.
    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode>;
}

impl<V: VectorField + ?Sized> VectorField for &V {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode> {
        (**self).velocity(z, t)
    }
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Tanh MLP over `[z, t]` producing a velocity in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldNet {
    data_dim: usize,
    mlp: Mlp,
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::invalid("vector field needs data_dim >= 1"));
        }
        let mut widths = vec![data_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        Ok(VectorFieldNet {
            data_dim,
            mlp: Mlp::new(&widths, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        let d = mlp.output_dim();
        if mlp.input_dim() != d + 1 {
            return Err(Error::invalid(format!(
                "vector field widths must be [d+1, .., d], got {:?}",
                mlp.widths()
            )));
        }
        Ok(VectorFieldNet { data_dim: d, mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn widths(&self) -> &[usize] {
        self.mlp.widths()
    }

    pub fn params(&self) -> &[Array] {
        self.mlp.params()
    }

    pub fn set_params(&mut self, params: Vec<Array>) -> Result<()> {
        self.mlp.set_params(params)
    }

    /// Parameters as graph leaves; with `requires_grad` the field can be trained.
    pub fn bind(&self, requires_grad: bool) -> BoundField {
        BoundField {
            data_dim: self.data_dim,
            params: self.mlp.bind(requires_grad),
        }
    }
}

/// Evaluating the net directly treats its parameters as constants.
impl VectorField for VectorFieldNet {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode> {
        self.bind(false).velocity(z, t)
    }
}

/// A [`VectorFieldNet`] whose parameters live in the current graph.
#[derive(Debug, Clone)]
pub struct BoundField {
    data_dim: usize,
    params: Vec<DiffNode>,
}

impl BoundField {
    /// Wrap existing parameter nodes laid out as in [`Mlp`].
    pub fn from_nodes(data_dim: usize, params: Vec<DiffNode>) -> Result<Self> {
        if params.is_empty() || params.len() % 2 != 0 {
            return Err(Error::invalid("parameter list must hold weight/bias pairs"));
        }
        Ok(BoundField { data_dim, params })
    }

    pub fn params(&self) -> &[DiffNode] {
        &self.params
    }
}

impl VectorField for BoundField {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode> {
        check_batch(z, t, self.data_dim)?;
        let input = DiffNode::concat_cols(&[z.clone(), t.clone()])?;
        Mlp::forward(&self.params, &input)
    }
}

pub(crate) fn check_batch(z: &DiffNode, t: &DiffNode, d: usize) -> Result<()> {
    let (rows, cols) = z.value().dims2()?;
    if cols != d {
        return Err(Error::invalid(format!("field expects {d} columns, got {cols}")));
    }
    if t.shape() != [rows, 1] {
        return Err(Error::invalid(format!(
            "time input must be {rows} x 1, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Field defined by a closure; used to inject analytic fields.
pub struct FnField<F> {
    data_dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&DiffNode, &DiffNode) -> Result<DiffNode>,
{
    pub fn new(data_dim: usize, f: F) -> Self {
        FnField { data_dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&DiffNode, &DiffNode) -> Result<DiffNode>,
{
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode> {
        check_batch(z, t, self.data_dim)?;
        (self.f)(z, t)
    }
}

/// `f(z, t) = A z + b`, time independent.
#[derive(Debug, Clone)]
pub struct AffineField {
    a: Array,
    b: Array,
}

impl AffineField {
    /// `a` is `d × d`, `b` has `d` entries.
    pub fn new(a: Array, b: Vec<f64>) -> Result<Self> {
        let (r, c) = a.dims2()?;
        if r != c || b.len() != r {
            return Err(Error::invalid("affine field needs a square A and matching b"));
        }
        Ok(AffineField {
            a,
            b: Array::matrix(1, r, b)?,
        })
    }

    pub fn zero(d: usize) -> Self {
        AffineField {
            a: Array::zeros(&[d, d]).expect("d > 0"),
            b: Array::zeros(&[1, d]).expect("d > 0"),
        }
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = s;
        }
        AffineField {
            a: Array::matrix(d, d, data).expect("d > 0"),
            b: Array::zeros(&[1, d]).expect("d > 0"),
        }
    }
}

impl VectorField for AffineField {
    fn data_dim(&self) -> usize {
        self.b.cols()
    }

    fn velocity(&self, z: &DiffNode, t: &DiffNode) -> Result<DiffNode> {
        check_batch(z, t, self.data_dim())?;
        let rows = z.shape()[0];
        let a = DiffNode::constant(self.a.clone());
        let b = DiffNode::constant(self.b.clone()).expand_axis(0, rows)?;
        z.gemm(false, &a, true)?.add(&b)
    }
}

/// Constant `rows × 1` time column.
pub fn time_column(rows: usize, t: f64) -> DiffNode {
    DiffNode::constant(Array::full(&[rows, 1], t).expect("rows > 0"))
}
