// Strided f64 GEMM on slices, C (+)= A·B.

/// Row/column strides of a logical `rows × cols` view.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rs: isize,
    pub cs: isize,
}

impl View {
    /// Row-major, contiguous `_ × cols`.
    pub fn rm(cols: usize) -> Self {
        View {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `_ × cols` matrix.
    pub fn tr(cols: usize) -> Self {
        View {
            rs: 1,
            cs: cols as isize,
        }
    }
}

fn extent(rows: usize, cols: usize, v: View) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * v.rs + (cols - 1) as isize * v.cs) as usize + 1
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with `c` row-major contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= extent(m, k, av), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, bv), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
