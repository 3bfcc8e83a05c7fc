//! Dense rank-4 tensors and the scalar abstraction shared by every kernel.
//!
//! Training runs in `f32`; gradient checking re-runs the same code paths in
//! `f64`. Everything numeric is generic over [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point scalar with a GEMM kernel.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every element the kernel touches.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense `(n, c, h, w)` array, contiguous row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor data has {} elements, dims {:?} need {}",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch item `i` out as a one-item tensor.
    pub fn item(&self, i: usize) -> Tensor4<T> {
        let len = self.item_len();
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} onto {:?}",
                    p.dims, first.dims
                )));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: [n, c, h, w],
            data,
        })
    }
}

impl<T> Tensor4<T> {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }
}

impl<T: Debug> Debug for Tensor4<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_lhs() {
        // a stored as 3x2 but read transposed (2x3)
        let a = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn stack_and_item_are_inverse() {
        let a = Tensor4::from_vec([1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor4::from_vec([1, 1, 1, 2], vec![3.0f32, 4.0]).unwrap();
        let s = Tensor4::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.dims(), [2, 1, 1, 2]);
        assert_eq!(s.item(0), a);
        assert_eq!(s.item(1), b);
    }
}
