//! Row-major matrix kernels backing the convolution and linear layers.
//!
//! All kernels accumulate each output element in a fixed index order, so
//! results are bit-identical for any worker-thread count. Parallelism only
//! splits disjoint output rows across threads.

use std::sync::OnceLock;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Worker-thread cap from `GLAM_THREADS` (default 1 for determinism-by-default;
/// results are identical either way).
pub fn thread_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("GLAM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = thread_count();
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .ok()
        }
    })
    .as_ref()
}

/// Run `f` on disjoint row chunks of `c`, in parallel when a pool exists.
fn for_each_row_chunk(
    c: &mut [f64],
    n_cols: usize,
    chunk_rows: usize,
    f: impl Fn(usize, &mut [f64]) + Sync,
) {
    let chunk = chunk_rows.max(1) * n_cols;
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            c.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(ci, rows)| f(ci * chunk_rows.max(1), rows));
        }),
        None => {
            for (ci, rows) in c.chunks_mut(chunk).enumerate() {
                f(ci * chunk_rows.max(1), rows);
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let chunk_rows = rows_per_chunk(m);
    for_each_row_chunk(&mut c, n, chunk_rows, |row0, rows| {
        for (ri, crow) in rows.chunks_mut(n).enumerate() {
            let i = row0 + ri;
            let arow = &a[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T  (rows of A dotted with rows of B).
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * k];
    let chunk_rows = rows_per_chunk(m);
    for_each_row_chunk(&mut c, k, chunk_rows, |row0, rows| {
        for (ri, crow) in rows.chunks_mut(k).enumerate() {
            let i = row0 + ri;
            let arow = &a[i * n..(i + 1) * n];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * n..(j + 1) * n];
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *cv = acc;
            }
        }
    });
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    let chunk_rows = rows_per_chunk(k);
    for_each_row_chunk(&mut c, n, chunk_rows, |row0, rows| {
        let rows_here = rows.len() / n;
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for rj in 0..rows_here {
                let j = row0 + rj;
                let av = a[i * k + j];
                if av == 0.0 {
                    continue;
                }
                let crow = &mut rows[rj * n..(rj + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

fn rows_per_chunk(m: usize) -> usize {
    let t = thread_count();
    if t <= 1 {
        m
    } else {
        m.div_ceil(t * 4).max(1)
    }
}

/// y[r] = M[r,c] * x[c].
pub fn matvec(m_data: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(m_data.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for (r, yv) in y.iter_mut().enumerate() {
        let row = &m_data[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (&mv, &xv) in row.iter().zip(x) {
            acc += mv * xv;
        }
        *yv = acc;
    }
    y
}
