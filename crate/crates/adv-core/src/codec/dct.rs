//! Orthonormal DCT-II / DCT-III pair, applied independently to each action
//! dimension (each column of the chunk) over the time axis.

use alloc::vec;

use super::ActionChunk;

/// Forward transform: time-domain chunk to frequency coefficients.
///
/// Coefficient `k` of dimension `d` is `s_k * sum_n x[n,d] * cos(pi*(n+0.5)*k/H)`
/// with `s_0 = sqrt(1/H)` and `s_k = sqrt(2/H)` otherwise, so the transform
/// matrix is orthonormal and the inverse is its transpose.
pub fn dct_forward(chunk: &ActionChunk) -> ActionChunk {
    transform(chunk, false)
}

/// Inverse transform (DCT-III): frequency coefficients back to time domain.
pub fn dct_inverse(coeffs: &ActionChunk) -> ActionChunk {
    transform(coeffs, true)
}

fn transform(input: &ActionChunk, inverse: bool) -> ActionChunk {
    let h = input.h();
    let d = input.d();
    let scale0 = libm::sqrt(1.0 / h as f64);
    let scale = libm::sqrt(2.0 / h as f64);
    let mut out = vec![0.0; h * d];
    for dim in 0..d {
        for k in 0..h {
            let mut acc = 0.0;
            if inverse {
                // x[n] = sum_k s_k * X[k] * cos(pi*(n+0.5)*k/H), here n = k.
                for j in 0..h {
                    let s = if j == 0 { scale0 } else { scale };
                    let angle = core::f64::consts::PI * (k as f64 + 0.5) * j as f64 / h as f64;
                    acc += s * input.get(j, dim) * libm::cos(angle);
                }
            } else {
                let s = if k == 0 { scale0 } else { scale };
                for n in 0..h {
                    let angle = core::f64::consts::PI * (n as f64 + 0.5) * k as f64 / h as f64;
                    acc += input.get(n, dim) * libm::cos(angle);
                }
                acc *= s;
            }
            out[k * d + dim] = acc;
        }
    }
    ActionChunk::new(h, d, out).expect("transform of a valid chunk is finite")
}
