//! Convolution and adaptive average pooling kernels (forward + backward).
//!
//! Layouts: images are `[channels, height, width]` row-major; convolution
//! weights are `[c_out, c_in, kh, kw]`.

use crate::tensor::Scalar;

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(out.len(), c_out * oh * ow);
    for co in 0..c_out {
        let bias = b[co];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..c_in {
                    let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
                    let wbase = ((co * c_in + ci) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            acc += xplane[iy * wd + ix as usize] * w[wbase + ky * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g_out: &[T],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    g_x: &mut [T],
    g_w: &mut [T],
    g_b: &mut [T],
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(g_out.len(), c_out * oh * ow);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_out[(co * oh + oy) * ow + ox];
                if g == T::zero() {
                    continue;
                }
                g_b[co] += g;
                for ci in 0..c_in {
                    let xoff = ci * h * wd;
                    let wbase = ((co * c_in + ci) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            let xi = xoff + iy * wd + ix as usize;
                            g_w[wbase + ky * kw + kx] += g * x[xi];
                            g_x[xi] += g * w[wbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Torch-style adaptive window bounds: `[floor(i*in/out), ceil((i+1)*in/out))`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_pool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), c * oh * ow);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x_ in x0..x1 {
                        acc += plane[y * w + x_];
                    }
                }
                let count = T::from_usize((y1 - y0) * (x1 - x0));
                out[(ci * oh + oy) * ow + ox] = acc / count;
            }
        }
    }
}

pub fn adaptive_pool_backward<T: Scalar>(
    g_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    g_x: &mut [T],
) {
    for ci in 0..c {
        let gplane = &mut g_x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let count = T::from_usize((y1 - y0) * (x1 - x0));
                let g = g_out[(ci * oh + oy) * ow + ox] / count;
                for y in y0..y1 {
                    for x_ in x0..x1 {
                        gplane[y * w + x_] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1, stride 1, no padding: output == input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let w = [1.0f64];
        let b = [0.0f64];
        let mut out = vec![0.0f64; 9];
        conv2d_forward(&x, &w, &b, 1, 3, 3, 1, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn adaptive_pool_even_division_preserves_mean() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0f64; 4];
        adaptive_pool_forward(&x, 1, 4, 4, 2, 2, &mut out);
        let in_mean = x.iter().sum::<f64>() / 16.0;
        let out_mean = out.iter().sum::<f64>() / 4.0;
        assert!((in_mean - out_mean).abs() < 1e-12);
        // top-left window is {0,1,4,5}
        assert_eq!(out[0], 2.5);
    }
}
