//! Numeric kernels and the data-parallel dispatch layer.
//!
//! With the `parallel` feature (default) row loops run on the rayon pool;
//! without it they run sequentially. Every kernel assigns each output row to
//! exactly one task and accumulates inside the row in a fixed order, so both
//! paths produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar multiply-adds handed to one task.
#[cfg(feature = "parallel")]
const GRAIN: usize = 1 << 14;

#[cfg(feature = "parallel")]
fn rows_per_task(work_per_row: usize) -> usize {
    (GRAIN / work_per_row.max(1)).max(1)
}

/// Run `f(row_index, row)` over every `width`-sized row of `out`.
pub fn for_each_row<F>(out: &mut [f32], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let per = rows_per_task(work_per_row);
        out.par_chunks_mut(width * per)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (j, row) in chunk.chunks_mut(width).enumerate() {
                    f(c * per + j, row);
                }
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = work_per_row;
        for_each_row_seq(out, width, f);
    }
}

/// Sequential reference for [`for_each_row`].
pub fn for_each_row_seq<F>(out: &mut [f32], width: usize, f: F)
where
    F: Fn(usize, &mut [f32]),
{
    if width == 0 {
        return;
    }
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Map `0..n` through `f`, collecting in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[inline]
fn axpy(acc: &mut [f32], alpha: f32, x: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

#[inline]
fn gemm_row(a_row: &[f32], b: &[f32], n: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, &av) in a_row.iter().enumerate() {
        if av != 0.0 {
            axpy(out, av, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `a[m×k] · b[k×n]`, row-major.
pub fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, k * n, |i, row| {
        gemm_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Sequential [`gemm`], always available for comparison.
pub fn gemm_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for_each_row_seq(&mut out, n, |i, row| {
        gemm_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Transpose a `rows×cols` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `k×n`.
pub fn gemm_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let at = transpose(a, m, k);
    gemm(&at, b, k, m, n)
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, giving `m×k`.
pub fn gemm_a_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let bt = transpose(b, k, n);
    gemm(a, &bt, m, n, k)
}

/// Dot product accumulated in `f64` in index order.
#[inline]
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(gemm(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let m = 67;
        let k = 33;
        let n = 29;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32 - 48.0) / 9.0).collect();
        let p = gemm(&a, &b, m, k, n);
        let s = gemm_seq(&a, &b, m, k, n);
        assert!(p.iter().zip(&s).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn transposed_variants() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        // aᵀ b = [[1+5, 3+5],[2+6, 4+6]]
        assert_eq!(gemm_at_b(&a, &b, 3, 2, 2), vec![6.0, 8.0, 8.0, 10.0]);
        // a bᵀ, a 3x2, b 3x2 -> 3x3
        let abt = gemm_a_bt(&a, &b, 3, 2, 3);
        assert_eq!(abt, vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0, 5.0, 6.0, 11.0]);
    }
}
