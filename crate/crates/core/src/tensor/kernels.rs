// Raw loops behind the tape ops. Everything here works on flat slices.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output range `[lo, hi)` touched by tap `k`, and the input offset
    /// (input index = output index + offset).
    #[inline]
    fn tap(&self, k: usize) -> (usize, usize, isize) {
        let off = (k * self.dilation) as isize - self.padding as isize;
        let lo = (-off).max(0) as usize;
        let hi = (self.len_in as isize - off).min(self.len_out as isize).max(0) as usize;
        (lo.min(hi), hi, off)
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o0 = (b * g.c_out + co) * g.len_out;
            let row = &mut out[o0..o0 + g.len_out];
            row.fill(bias[co]);
            for ci in 0..g.c_in {
                let i0 = (b * g.c_in + ci) * g.len_in;
                let inp = &input[i0..i0 + g.len_in];
                for k in 0..g.kernel {
                    let w = weight[(co * g.c_in + ci) * g.kernel + k];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi, off) = g.tap(k);
                    if lo >= hi {
                        continue;
                    }
                    let s = (lo as isize + off) as usize;
                    axpy(w, &inp[s..s + (hi - lo)], &mut row[lo..hi]);
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution.
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o0 = (b * g.c_out + co) * g.len_out;
            let go = &grad_out[o0..o0 + g.len_out];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[co] += go.iter().sum::<f64>();
            }
            for ci in 0..g.c_in {
                let i0 = (b * g.c_in + ci) * g.len_in;
                for k in 0..g.kernel {
                    let (lo, hi, off) = g.tap(k);
                    if lo >= hi {
                        continue;
                    }
                    let s = (lo as isize + off) as usize;
                    let widx = (co * g.c_in + ci) * g.kernel + k;
                    if let Some(gw) = grad_weight.as_deref_mut() {
                        gw[widx] += dot(&go[lo..hi], &input[i0 + s..i0 + s + (hi - lo)]);
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let w = weight[widx];
                        if w != 0.0 {
                            axpy(w, &go[lo..hi], &mut gi[i0 + s..i0 + s + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, br, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
