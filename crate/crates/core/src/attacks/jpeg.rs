//! DCT-domain JPEG approximation.
//!
//! For an orthonormal 8×8 DCT `A` (as a 64×64 operator on a block) and a
//! diagonal 0/1 coefficient mask `M`, the attack is the projection
//! `P = Aᵀ M A`. `P` is symmetric, so the same routine serves as forward and
//! backward pass.

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Orthonormal DCT-II matrix, `C[u][x] = α(u)·cos((2x + 1)uπ / 16)`.
pub fn dct_matrix() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Row-major positions `u * 8 + v` in zigzag scan order.
pub fn zigzag_order() -> [usize; 64] {
    let mut order = [0; 64];
    let mut k = 0;
    for s in 0..15usize {
        let lo = s.saturating_sub(7);
        let hi = s.min(7);
        // even anti-diagonals run bottom-left to top-right
        let rows: Vec<usize> = if s % 2 == 0 {
            (lo..=hi).rev().collect()
        } else {
            (lo..=hi).collect()
        };
        for u in rows {
            order[k] = u * 8 + (s - u);
            k += 1;
        }
    }
    order
}

/// Number of zigzag-leading coefficients kept at quality `q`: `⌈64·q / 100⌉`.
pub fn jpeg_keep_count(quality: f64) -> usize {
    ((64.0 * quality / 100.0 - 1e-9).ceil() as usize).clamp(1, 64)
}

/// The 64×64 block operator keeping the first `keep` zigzag coefficients.
fn projection(keep: usize) -> Vec<f64> {
    let c = dct_matrix();
    let order = zigzag_order();
    let mut p = vec![0.0; 64 * 64];
    for &pos in &order[..keep] {
        let (u, v) = (pos / 8, pos % 8);
        // basis image B[x][y] = C[u][x] · C[v][y]
        let basis: Vec<f64> = (0..64).map(|i| c[u][i / 8] * c[v][i % 8]).collect();
        for i in 0..64 {
            for j in 0..64 {
                p[i * 64 + j] += basis[i] * basis[j];
            }
        }
    }
    p
}

/// Applies the block projection to every 8×8 block of every channel.
pub(super) fn apply_block_projection<T: Real>(x: &Tensor<T>, keep: usize) -> Tensor<T> {
    if keep == 64 {
        // P is the identity; skip the round-trip error
        return x.clone();
    }
    let (n, c, h, w) = x.dims4();
    let (bh, bw) = (h / 8, w / 8);
    let blocks = n * c * bh * bw;
    let p: Vec<T> = projection(keep).into_iter().map(T::lit).collect();
    let mut gathered = vec![T::zero(); blocks * 64];
    let mut b = 0;
    for plane in 0..n * c {
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..8 {
                    let src = plane * h * w + (by * 8 + y) * w + bx * 8;
                    gathered[b * 64 + y * 8..b * 64 + y * 8 + 8].copy_from_slice(&x.data()[src..src + 8]);
                }
                b += 1;
            }
        }
    }
    let mut projected = vec![T::zero(); blocks * 64];
    gemm(
        T::one(),
        MatRef::new(&gathered, blocks, 64),
        MatRef::new(&p, 64, 64),
        T::zero(),
        &mut projected,
    );
    let mut out = Tensor::zeros(x.shape());
    let mut b = 0;
    for plane in 0..n * c {
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..8 {
                    let dst = plane * h * w + (by * 8 + y) * w + bx * 8;
                    out.data_mut()[dst..dst + 8].copy_from_slice(&projected[b * 64 + y * 8..b * 64 + y * 8 + 8]);
                }
                b += 1;
            }
        }
    }
    out
}
