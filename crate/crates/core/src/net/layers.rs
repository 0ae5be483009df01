//! Dense kernels for the 3×3 stride-2 convolutions and fully connected layers.
//!
//! Convolutions are lowered to matrix products with an explicit column
//! buffer: `col[(c·9 + ky·3 + kx) · P + p]` holds the input value under tap
//! `(ky, kx)` of channel `c` for output position `p`, with zero padding of one
//! pixel on every side.

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;
const STRIDE: usize = 2;

/// Output side length of a padded 3×3 stride-2 convolution.
pub(crate) fn conv_out(size: usize) -> usize {
    (size + 2 - KERNEL) / STRIDE + 1
}

/// `c = a·b + beta·c` for row-major matrices, with optional transposes of
/// `a` (stored k×m) and `b` (stored n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn im2col(input: &[f64], channels: usize, size: usize) -> Vec<f64> {
    let out = conv_out(size);
    let positions = out * out;
    let mut col = vec![0.0; channels * TAPS * positions];
    for c in 0..channels {
        let plane = &input[c * size * size..(c + 1) * size * size];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * TAPS) + ky * KERNEL + kx) * positions..][..positions];
                for oy in 0..out {
                    let iy = (STRIDE * oy + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * size..][..size];
                    let dst = &mut row[oy * out..][..out];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (STRIDE * ox + kx) as isize - 1;
                        if ix >= 0 && ix < size as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im(col: &[f64], channels: usize, size: usize) -> Vec<f64> {
    let out = conv_out(size);
    let positions = out * out;
    let mut input = vec![0.0; channels * size * size];
    for c in 0..channels {
        let plane = &mut input[c * size * size..(c + 1) * size * size];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((c * TAPS) + ky * KERNEL + kx) * positions..][..positions];
                for oy in 0..out {
                    let iy = (STRIDE * oy + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    for ox in 0..out {
                        let ix = (STRIDE * ox + kx) as isize - 1;
                        if ix >= 0 && ix < size as isize {
                            plane[iy as usize * size + ix as usize] += row[oy * out + ox];
                        }
                    }
                }
            }
        }
    }
    input
}

/// Convolution + bias + ReLU. Returns `(col, activation)`.
pub(crate) fn conv_relu_forward(
    input: &[f64],
    in_channels: usize,
    size: usize,
    weights: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let out_channels = bias.len();
    let positions = conv_out(size).pow(2);
    let col = im2col(input, in_channels, size);
    let mut z = vec![0.0; out_channels * positions];
    for (row, &b) in z.chunks_mut(positions).zip(bias) {
        row.fill(b);
    }
    gemm(
        out_channels,
        in_channels * TAPS,
        positions,
        weights,
        false,
        &col,
        false,
        1.0,
        &mut z,
    );
    for v in &mut z {
        *v = v.max(0.0);
    }
    (col, z)
}

/// Backward pass of [`conv_relu_forward`].
///
/// `d_act` is the gradient w.r.t. the ReLU output and is overwritten with the
/// gradient w.r.t. the pre-activation. Weight and bias gradients are
/// accumulated. Returns the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_relu_backward(
    d_act: &mut [f64],
    activation: &[f64],
    col: &[f64],
    in_channels: usize,
    size: usize,
    weights: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let out_channels = d_bias.len();
    let positions = conv_out(size).pow(2);
    let k = in_channels * TAPS;
    for (d, &a) in d_act.iter_mut().zip(activation) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    for (row, db) in d_act.chunks(positions).zip(d_bias.iter_mut()) {
        *db += row.iter().sum::<f64>();
    }
    gemm(out_channels, positions, k, d_act, false, col, true, 1.0, d_weights);
    if !want_input {
        return None;
    }
    let mut d_col = vec![0.0; k * positions];
    gemm(k, out_channels, positions, weights, true, d_act, false, 0.0, &mut d_col);
    Some(col2im(&d_col, in_channels, size))
}

/// `y = W x + b` with `W` stored `[out][in]`.
pub(crate) fn dense_forward(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .zip(weights.chunks(n_in))
        .map(|(&b, row)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn dense_backward(
    weights: &[f64],
    x: &[f64],
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut d_x = vec![0.0; n_in];
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &weights[o * n_in..(o + 1) * n_in];
        let d_row = &mut d_weights[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            d_row[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes_halve() {
        assert_eq!(conv_out(32), 16);
        assert_eq!(conv_out(16), 8);
        assert_eq!(conv_out(8), 4);
        assert_eq!(conv_out(256), 128);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let (channels, size) = (2, 6);
        let x: Vec<f64> = (0..channels * size * size).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let col = im2col(&x, channels, size);
        let y: Vec<f64> = (0..col.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, channels, size);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (cin, cout, size) = (2, 3, 6);
        let x: Vec<f64> = (0..cin * size * size).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..cout * cin * TAPS).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let (_, act) = conv_relu_forward(&x, cin, size, &w, &b);
        let out = conv_out(size);
        for co in 0..cout {
            for oy in 0..out {
                for ox in 0..out {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < size && (ix as usize) < size {
                                    acc += w[(co * cin + ci) * 9 + ky * 3 + kx]
                                        * x[ci * size * size + iy as usize * size + ix as usize];
                                }
                            }
                        }
                    }
                    let got = act[co * out * out + oy * out + ox];
                    assert!((got - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }
}
