use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar precision used by the substrate. Training defaults to `f32`;
/// gradient verification runs in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `matrixmultiply` kernel for this precision: `c = a · b`, all row-major,
    /// with explicit row/column strides for `a` and `b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: isize,
        a_cs: isize,
        b: &[Self],
        b_rs: isize,
        b_cs: isize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_rs: isize,
                a_cs: isize,
                b: &[Self],
                b_rs: isize,
                b_cs: isize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(c.len() >= m * n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slices are sized by the callers to cover every index the
                // strides address (checked by the shape validation in the tape).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_rs,
                        a_cs,
                        b.as_ptr(),
                        b_rs,
                        b_cs,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
            grad: None,
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
            None => self.grad = Some(vec![F::zero(); self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let buf = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: self.grad.as_ref().map(|g| {
                g.iter()
                    .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
                    .collect()
            }),
        }
    }
}
