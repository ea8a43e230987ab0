#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// Stored layouts: `a` is `m x k` (or `k x m` when transposed), `b` is
/// `k x n` (or `n x k` when transposed), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    ta: Transpose,
    b: &[f64],
    tb: Transpose,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (Transpose::No, Transpose::No) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, bj) in crow.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
        }
        (Transpose::No, Transpose::Yes) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    c[i * n + j] += dot;
                }
            }
        }
        (Transpose::Yes, Transpose::No) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cj, bj) in crow.iter_mut().zip(brow) {
                        *cj += api * bj;
                    }
                }
            }
        }
        (Transpose::Yes, Transpose::Yes) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}
