//! Sequential forward/backward kernels on row-major slices.
//!
//! All reductions run in a fixed order so results are bit-identical for equal
//! inputs, and row `i` of a matmul result depends only on row `i` of the left
//! operand (batching never changes a row's value).

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] * b[k,n]`; zero entries of `a` are skipped.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`, computed as a sum of rows of `b^T`
/// so the inner loop is an axpy.
pub fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let darow = &mut da[i * k..(i + 1) * k];
        for (j, &g) in dc[i * n..(i + 1) * n].iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (d, &bv) in darow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                *d = *d + g * bv;
            }
        }
    }
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`; zero entries of `a` are skipped.
pub fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d = *d + av * g;
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of a `[m, n]` matrix.
pub fn softmax_rows<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let o = &mut out[i * n..(i + 1) * n];
        let mut s = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - mx).exp();
            s = s + *ov;
        }
        for ov in o.iter_mut() {
            *ov = *ov / s;
        }
    }
    out
}

/// Row-wise log-softmax of a `[m, n]` matrix.
pub fn log_softmax_rows<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for &v in row {
            s = s + (v - mx).exp();
        }
        let lse = mx + s.ln();
        for (ov, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *ov = v - lse;
        }
    }
    out
}

/// Non-overlapping `k x k` patch extraction.
///
/// Input rows are `batch` grids of `h x w` cells (row-major, `y` major) with
/// `c` channels each. Output row `b*(h/k)*(w/k) + py*(w/k) + px` holds the
/// patch at `(py, px)` with columns ordered `(dy, dx, channel)`.
/// Returns `(out_row, in_row)` pairs for every copied cell.
pub fn patch_index(batch: usize, h: usize, w: usize, k: usize) -> Vec<(usize, usize, usize)> {
    let (ph, pw) = (h / k, w / k);
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for py in 0..ph {
            for px in 0..pw {
                let out_row = b * ph * pw + py * pw + px;
                for dy in 0..k {
                    for dx in 0..k {
                        let in_row = b * h * w + (py * k + dy) * w + (px * k + dx);
                        idx.push((out_row, dy * k + dx, in_row));
                    }
                }
            }
        }
    }
    idx
}

/// Neumaier-compensated sum in slice order.
pub fn sum<T: Scalar>(xs: &[T]) -> T {
    let mut s = T::zero();
    let mut c = T::zero();
    for &x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c = c + ((s - t) + x);
        } else {
            c = c + ((x - t) + s);
        }
        s = t;
    }
    s + c
}
