use super::Real;

/// Output side length of a cubic-kernel convolution along one axis.
pub fn conv3d_output_side(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= kernel, "kernel larger than padded input");
    (n + 2 * pad - kernel) / stride + 1
}

/// Output positions `o` in `[lo, hi)` whose input tap `o * stride + k - pad` is in bounds.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds a `[cin, d, h, w]` volume into a `[cin * k^3, od * oh * ow]` column matrix.
pub fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 3]) {
    let [d, h, w] = dims;
    let od = conv3d_output_side(d, kernel, stride, pad);
    let oh = conv3d_output_side(h, kernel, stride, pad);
    let ow = conv3d_output_side(w, kernel, stride, pad);
    let p = od * oh * ow;
    let k3 = kernel * kernel * kernel;
    let mut col = vec![T::zero(); cin * k3 * p];
    for ci in 0..cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kernel {
            let (z_lo, z_hi) = valid_range(d, od, kz, stride, pad);
            for ky in 0..kernel {
                let (y_lo, y_hi) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..kernel {
                    let (x_lo, x_hi) = valid_range(w, ow, kx, stride, pad);
                    let row = ((ci * kernel + kz) * kernel + ky) * kernel + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in z_lo..z_hi {
                        let iz = oz * stride + kz - pad;
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + ky - pad;
                            let src_row = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let dst_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = x_lo + kx - pad;
                                dst_row[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                            } else {
                                for ox in x_lo..x_hi {
                                    dst_row[ox] = src_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (col, [od, oh, ow])
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a `[cin, d, h, w]` volume.
pub fn col2im<T: Real>(
    col: &[T],
    cin: usize,
    dims: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let [d, h, w] = dims;
    let od = conv3d_output_side(d, kernel, stride, pad);
    let oh = conv3d_output_side(h, kernel, stride, pad);
    let ow = conv3d_output_side(w, kernel, stride, pad);
    let p = od * oh * ow;
    let mut x = vec![T::zero(); cin * d * h * w];
    for ci in 0..cin {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kernel {
            let (z_lo, z_hi) = valid_range(d, od, kz, stride, pad);
            for ky in 0..kernel {
                let (y_lo, y_hi) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..kernel {
                    let (x_lo, x_hi) = valid_range(w, ow, kx, stride, pad);
                    let row = ((ci * kernel + kz) * kernel + ky) * kernel + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oz in z_lo..z_hi {
                        let iz = oz * stride + kz - pad;
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + ky - pad;
                            let dst_row = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let src_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = x_lo + kx - pad;
                                for (dst, &v) in dst_row[ix0..ix0 + (x_hi - x_lo)]
                                    .iter_mut()
                                    .zip(&src_row[x_lo..x_hi])
                                {
                                    *dst += v;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    dst_row[ox * stride + kx - pad] += src_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sides() {
        assert_eq!(conv3d_output_side(32, 3, 2, 1), 16);
        assert_eq!(conv3d_output_side(8, 3, 1, 1), 8);
        assert_eq!(conv3d_output_side(1, 3, 1, 1), 1);
        assert_eq!(conv3d_output_side(5, 1, 1, 0), 5);
    }

    // <im2col(x), c> == <x, col2im(c)> for the adjoint pair.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, pad, n) in &[(1usize, 1usize, 5usize), (2, 1, 6), (2, 1, 5), (1, 0, 4)] {
            let cin = 2;
            let x: Vec<f64> = (0..cin * n * n * n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let (col, _) = im2col(&x, cin, [n, n, n], 3, stride, pad);
            let c: Vec<f64> = (0..col.len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let back = col2im(&c, cin, [n, n, n], 3, stride, pad);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad} n {n}");
        }
    }

    #[test]
    fn im2col_center_tap_is_input() {
        let x: Vec<f32> = (0..27).map(|i| i as f32).collect();
        let (col, out) = im2col(&x, 1, [3, 3, 3], 3, 1, 1);
        assert_eq!(out, [3, 3, 3]);
        // row 13 is the (1,1,1) tap
        assert_eq!(&col[13 * 27..14 * 27], &x[..]);
    }
}
