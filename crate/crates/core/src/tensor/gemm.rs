use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

// below this many multiply-adds a single call beats splitting
const PAR_MIN_WORK: usize = 1 << 18;

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view.
    pub fn rows(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer, i.e. `cols x rows`.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }

    fn row_block(&self, start: usize, count: usize) -> MatRef<'a, T> {
        MatRef {
            data: &self.data[start * self.rs..],
            rows: count,
            ..*self
        }
    }
}

/// `c = a·b` (or `c += a·b` with `accumulate`), `c` row-major and contiguous.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm output has wrong length");
    assert!(a.in_bounds() && b.in_bounds(), "gemm operand strides leave the buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let threads = rayon::current_num_threads();
    if threads <= 1 || m < 2 || m * n * k < PAR_MIN_WORK {
        gemm_serial(a, b, c, accumulate);
        return;
    }
    let rows_per = m.div_ceil(threads * 4).max(4);
    c.par_chunks_mut(rows_per * n).enumerate().for_each(|(i, block)| {
        let r0 = i * rows_per;
        let count = block.len() / n;
        gemm_serial(a.row_block(r0, count), b, block, accumulate);
    });
}

fn gemm_serial<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds were checked on the full views and row blocks only
    // shrink `rows`; `c` is an exclusive borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

/// Product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.dim(0), b.dim(1));
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatRef::rows(a.data(), m, a.dim(1)),
        MatRef::rows(b.data(), b.dim(0), n),
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}
