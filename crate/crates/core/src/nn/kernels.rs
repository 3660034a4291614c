//! Matrix products over flat row-major slices.
//!
//! Each output element is a sum accumulated in `f64` strictly in
//! inner-index order and rounded once on store. Register tiles span output
//! rows and columns only, which leaves that order intact. Products of `f32`
//! inputs are exact in `f64`, so a fused multiply-add rounds exactly like a
//! separate multiply and add, and the FMA paths are used only for `f32`.

use super::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k, "gemm lhs");
    assert_eq!(b.len(), k * n, "gemm rhs");
    gemm_strided(a, (k, 1), b, m, k, n)
}

/// Product whose left operand element `(i, p)` sits at `i * a_stride.0 + p * a_stride.1`.
fn gemm_strided<T: Scalar>(
    a: &[T],
    a_stride: (usize, usize),
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); m * n];
    #[cfg(target_arch = "x86_64")]
    {
        let fma = T::EXACT_PRODUCT && std::is_x86_feature_detected!("fma");
        if fma && std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the features were detected at runtime.
            unsafe { gemm_avx512(a, a_stride, b, &mut out, m, k, n) };
            return out;
        }
        if fma && std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { gemm_avx2(a, a_stride, b, &mut out, m, k, n) };
            return out;
        }
    }
    gemm_tiles::<T, false>(a, a_stride, b, &mut out, m, k, n);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn gemm_avx512<T: Scalar>(
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    gemm_tiles::<T, true>(a, sa, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2<T: Scalar>(
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    gemm_tiles::<T, true>(a, sa, b, out, m, k, n)
}

/// `acc + x·y`, fused when `FMA` is set (callers guarantee the product is exact).
#[inline(always)]
fn madd<const FMA: bool>(acc: f64, x: f64, y: f64) -> f64 {
    if FMA {
        x.mul_add(y, acc)
    } else {
        acc + x * y
    }
}

#[inline(always)]
fn gemm_tiles<T: Scalar, const FMA: bool>(
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    // One column panel of `b` widened to f64, zero-padded to NR columns.
    let mut panel = vec![0.0f64; k * NR];
    let mut j = 0;
    while j < n {
        let cols = NR.min(n - j);
        for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
            for (d, s) in dst.iter_mut().zip(&b[p * n + j..p * n + j + cols]) {
                *d = s.to_f64();
            }
        }
        let mut i = 0;
        while i < m {
            let rows = MR.min(m - i);
            let acc = if rows == MR {
                tile_full::<T, FMA>(a, sa, &panel, i)
            } else {
                tile_edge::<T, FMA>(a, sa, &panel, i, rows)
            };
            for (r, accr) in acc.iter().enumerate().take(rows) {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + cols];
                for (o, &s) in o.iter_mut().zip(accr) {
                    *o = T::from_f64(s);
                }
            }
            i += MR;
        }
        j += NR;
    }
}

#[inline(always)]
fn tile_full<T: Scalar, const FMA: bool>(
    a: &[T],
    sa: (usize, usize),
    panel: &[f64],
    i: usize,
) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (p, bv) in panel.chunks_exact(NR).enumerate() {
        let bv: &[f64; NR] = bv.try_into().unwrap();
        let av: [f64; MR] = std::array::from_fn(|r| a[(i + r) * sa.0 + p * sa.1].to_f64());
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] = madd::<FMA>(acc[r][c], av[r], bv[c]);
            }
        }
    }
    acc
}

#[inline(always)]
fn tile_edge<T: Scalar, const FMA: bool>(
    a: &[T],
    sa: (usize, usize),
    panel: &[f64],
    i: usize,
    rows: usize,
) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (p, bv) in panel.chunks_exact(NR).enumerate() {
        let bv: &[f64; NR] = bv.try_into().unwrap();
        for (r, accr) in acc.iter_mut().enumerate().take(rows) {
            let av = a[(i + r) * sa.0 + p * sa.1].to_f64();
            for c in 0..NR {
                accr[c] = madd::<FMA>(accr[c], av, bv[c]);
            }
        }
    }
    acc
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const B: usize = 16;
    let mut t = vec![T::default(); x.len()];
    for i0 in (0..rows).step_by(B) {
        let i1 = (i0 + B).min(rows);
        for j0 in (0..cols).step_by(B) {
            let j1 = (j0 + B).min(cols);
            for (j, dst) in t[j0 * rows..j1 * rows].chunks_exact_mut(rows).enumerate() {
                let dst = &mut dst[i0..i1];
                for (d, src) in dst.iter_mut().zip(x[i0 * cols..].chunks(cols)) {
                    *d = src[j0 + j];
                }
            }
        }
    }
    t
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(b.len(), n * k, "gemm_nt rhs");
    gemm(a, &transpose(b, n, k), m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), k * m, "gemm_tn lhs");
    assert_eq!(b.len(), k * n, "gemm_tn rhs");
    gemm_strided(a, (1, m), b, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3×4
        let ab = gemm(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(gemm_nt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        assert_eq!(gemm_tn(&at, &b, 3, 2, 4), ab);
    }

    #[test]
    fn fused_matches_unfused_for_f32() {
        let mut rng = crate::rng::SplitMix64::new(9);
        for &(m, k, n) in &[(4, 64, 16), (7, 129, 35), (1, 300, 503)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32 * 3.0).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.normal() as f32 / 7.0).collect();
            let mut fused = vec![0.0f32; m * n];
            let mut plain = vec![0.0f32; m * n];
            gemm_tiles::<f32, true>(&a, (k, 1), &b, &mut fused, m, k, n);
            gemm_tiles::<f32, false>(&a, (k, 1), &b, &mut plain, m, k, n);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&fused), bits(&plain), "{m}x{k}x{n}");
            assert_eq!(bits(&gemm(&a, &b, m, k, n)), bits(&plain), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn tiles_match_naive_order_bitwise() {
        let mut rng = crate::rng::SplitMix64::new(5);
        for &(m, k, n) in &[
            (1, 1, 1),
            (4, 3, 16),
            (5, 7, 17),
            (9, 1, 33),
            (3, 40, 2),
            (8, 16, 64),
        ] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
            let got = gemm(&a, &b, m, k, n);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(
                bits(&gemm_tn(&transpose(&a, m, k), &b, k, m, n)),
                bits(&got)
            );
            assert_eq!(
                bits(&gemm_nt(&a, &transpose(&b, k, n), m, k, n)),
                bits(&got)
            );
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for p in 0..k {
                        s += f64::from(a[i * k + p]) * f64::from(b[p * n + j]);
                    }
                    assert_eq!(
                        got[i * n + j].to_bits(),
                        (s as f32).to_bits(),
                        "{m}x{k}x{n} at {i},{j}"
                    );
                }
            }
        }
    }
}
