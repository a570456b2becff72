use num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 3D DFT of a `[d, h, w]` row-major complex array.
pub fn fft3(data: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let [d, h, w] = dims;
    assert_eq!(data.len(), d * h * w);
    let mut planner = FftPlanner::new();
    // x: contiguous rows
    {
        let fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
        fft.process(data);
    }
    let mut line = Vec::new();
    // y
    {
        let fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
        line.resize(h, Complex64::default());
        for z in 0..d {
            for x in 0..w {
                for y in 0..h {
                    line[y] = data[(z * h + y) * w + x];
                }
                fft.process(&mut line);
                for y in 0..h {
                    data[(z * h + y) * w + x] = line[y];
                }
            }
        }
    }
    // z
    {
        let fft = if inverse { planner.plan_fft_inverse(d) } else { planner.plan_fft_forward(d) };
        line.resize(d, Complex64::default());
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    line[z] = data[(z * h + y) * w + x];
                }
                fft.process(&mut line);
                for z in 0..d {
                    data[(z * h + y) * w + x] = line[z];
                }
            }
        }
    }
    if inverse {
        let n = (d * h * w) as f64;
        for v in data.iter_mut() {
            *v /= n;
        }
    }
}

/// Forward DFT of a real grid.
pub fn fft3_real(values: &[f32], dims: [usize; 3]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    fft3(&mut data, dims, false);
    data
}

/// Signed frequency index of DFT bin `i` on an `n`-point axis (Nyquist bin positive).
pub fn signed_freq(i: usize, n: usize) -> f64 {
    if 2 * i <= n {
        i as f64
    } else {
        i as f64 - n as f64
    }
}
