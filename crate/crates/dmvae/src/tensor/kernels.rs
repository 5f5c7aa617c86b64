//! Raw numeric kernels shared by the forward ops and their backward rules.
//!
//! All kernels are deterministic: the floating-point reduction order for any
//! given output element is fixed regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold (m*k*n) above which matmul parallelizes over output rows.
const PAR_MATMUL_WORK: usize = 1 << 17;

/// Row-major matmul: `a` is m×k, `b` is k×n, result m×n.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(a, b, i, k, n, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            matmul_row(a, b, i, k, n, row);
        }
    }
    out
}

#[inline]
fn matmul_row<S: Scalar>(a: &[S], b: &[S], i: usize, k: usize, n: usize, row: &mut [S]) {
    for kk in 0..k {
        let aik = a[i * k + kk];
        let brow = &b[kk * n..kk * n + n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o = *o + aik * bv;
        }
    }
}

pub fn transpose2d_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// NumPy-style broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        // Right-aligned: dimension d of the padded rank.
        let ad = padded_dim(a, nd, d);
        let bd = padded_dim(b, nd, d);
        out[d] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(out)
}

#[inline]
fn padded_dim(shape: &[usize], rank: usize, d: usize) -> usize {
    let pad = rank - shape.len();
    if d < pad {
        1
    } else {
        shape[d - pad]
    }
}

/// Strides of a row-major shape.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides for reading `shape` as if broadcast to `full` (0 on broadcast axes).
pub fn broadcast_strides(shape: &[usize], full: &[usize]) -> Vec<usize> {
    let nd = full.len();
    let pad = nd - shape.len();
    let own = contiguous_strides(shape);
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        if d >= pad {
            let sd = shape[d - pad];
            out[d] = if sd == 1 { 0 } else { own[d - pad] };
        }
    }
    for d in 0..nd {
        if d >= pad && shape[d - pad] != full[d] && shape[d - pad] != 1 {
            debug_assert!(false, "incompatible broadcast {shape:?} -> {full:?}");
        }
    }
    out
}

/// Elementwise binary op with broadcasting. Shapes must already be compatible;
/// `out_shape` is their broadcast shape.
pub fn binary_broadcast<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let len: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(len);
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..len {
            out.push(f(a[i], b[i]));
        }
        return out;
    }
    // Suffix-cycling fast paths (bias adds and the like).
    if a_shape == out_shape && is_cycling_suffix(b_shape, out_shape) {
        let bl = b.len();
        for i in 0..len {
            out.push(f(a[i], b[i % bl]));
        }
        return out;
    }
    if b_shape == out_shape && is_cycling_suffix(a_shape, out_shape) {
        let al = a.len();
        for i in 0..len {
            out.push(f(a[i % al], b[i]));
        }
        return out;
    }
    // General strided walk with an odometer over the output index.
    let astr = broadcast_strides(a_shape, out_shape);
    let bstr = broadcast_strides(b_shape, out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..len {
        out.push(f(a[ai], b[bi]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
        }
    }
    out
}

/// True when `small` (with leading 1s stripped) equals a suffix of `full`,
/// so indexing reduces to `i % small_len`.
fn is_cycling_suffix(small: &[usize], full: &[usize]) -> bool {
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() > full.len() {
        return false;
    }
    full[full.len() - trimmed.len()..] == trimmed[..]
}

/// Sum `data` (shaped `from`) down onto `to`, reversing a broadcast.
pub fn reduce_to_shape<S: Scalar>(data: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return data.to_vec();
    }
    let to_len: usize = to.iter().product();
    let mut out = vec![S::zero(); to_len];
    if is_cycling_suffix(to, from) {
        for (i, &v) in data.iter().enumerate() {
            out[i % to_len] += v;
        }
        return out;
    }
    let tstr = broadcast_strides(to, from);
    let nd = from.len();
    let mut idx = vec![0usize; nd];
    let mut ti = 0usize;
    for &v in data {
        out[ti] += v;
        for d in (0..nd).rev() {
            idx[d] += 1;
            ti += tstr[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ti -= tstr[d] * from[d];
        }
    }
    out
}

/// Row iteration helpers over the last dimension.
pub fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("last_dim of rank-0 shape")
}

pub fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = S::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub fn logsumexp_row<S: Scalar>(row: &[S]) -> S {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[1],[1]] = [[3],[7]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![1.0f64, 1.0];
        assert_eq!(matmul_raw(&a, &b, 2, 2, 1), vec![3.0, 7.0]);
    }

    #[test]
    fn broadcast_shapes_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[2]), None);
    }

    #[test]
    fn binary_broadcast_middle_axis() {
        // [2,1,2] + [1,3,2] -> [2,3,2]
        let a = vec![0.0f64, 1.0, 10.0, 11.0];
        let b = vec![100.0f64, 200.0, 300.0, 400.0, 500.0, 600.0];
        let out = binary_broadcast(&a, &[2, 1, 2], &b, &[1, 3, 2], &[2, 3, 2], |x, y| x + y);
        assert_eq!(
            out,
            vec![
                100.0, 201.0, 300.0, 401.0, 500.0, 601.0, 110.0, 211.0, 310.0, 411.0, 510.0, 611.0
            ]
        );
    }

    #[test]
    fn reduce_reverses_broadcast() {
        // Reduce [2,3] onto [3] and onto [2,1].
        let d = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&d, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&d, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        // Above the parallel threshold the result must be bit-identical.
        let m = 64;
        let k = 64;
        let n = 64;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 + 11) % 101) as f64 * 0.013).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 + 7) % 97) as f64 * 0.017).collect();
        let fast = matmul_raw(&a, &b, m, k, n);
        let mut slow = vec![0.0f64; m * n];
        for (i, row) in slow.chunks_mut(n).enumerate() {
            matmul_row(&a, &b, i, k, n, row);
        }
        assert_eq!(fast, slow);
    }
}
