use crate::error::{shape_err, Result};
use crate::Real;

/// Row-major dense tensor. Almost everything here is 2-D `[rows, cols]`;
/// a scalar is `[1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// 2-D tensor; panics if `data.len() != rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(rows * cols, data.len(), "from_rows: {rows}x{cols} vs {}", data.len());
        Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_rows(1, 1, vec![value])
    }

    /// Row vector `[1, n]`.
    pub fn row(values: &[Real]) -> Self {
        Self::from_rows(1, values.len(), values.to_vec())
    }

    /// One-hot rows: `[indices.len(), width]`.
    pub fn one_hot(indices: &[usize], width: usize) -> Self {
        let mut t = Self::zeros(&[indices.len(), width]);
        for (r, &i) in indices.iter().enumerate() {
            t.data[r * width + i] = 1.0;
        }
        t
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stack rows of equal width.
    pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [Real]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut width = None;
        let mut n = 0;
        for r in rows {
            match width {
                None => width = Some(r.len()),
                Some(w) if w != r.len() => {
                    return Err(shape_err("stack_rows", format!("row width {} vs {w}", r.len())))
                }
                _ => {}
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Ok(Self::from_rows(n, width.unwrap_or(0), data))
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> Real {
        self.data.iter().map(|x| x * x).sum::<Real>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += other * scale`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Tensor, scale: Real) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }
}
