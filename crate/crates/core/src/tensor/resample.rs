use super::Real;

/// How an axis is resampled between two lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleKind {
    /// Linear interpolation on voxel centers (half-pixel convention, edge clamped).
    Linear,
    /// Box average over the input cells covered by each output cell.
    Area,
}

/// Sparse `out_len x in_len` interpolation matrix for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisResampler {
    in_len: usize,
    out_len: usize,
    /// For each output index: first input index and contiguous weights.
    taps: Vec<(usize, Vec<f64>)>,
}

impl AxisResampler {
    pub fn new(in_len: usize, out_len: usize, kind: ResampleKind) -> Self {
        assert!(in_len > 0 && out_len > 0);
        if in_len == out_len {
            return Self::identity(in_len);
        }
        let taps = match kind {
            ResampleKind::Linear => (0..out_len)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(in_len - 1);
                    let frac = src - i0 as f64;
                    if i0 + 1 >= in_len || frac == 0.0 {
                        (i0, vec![1.0])
                    } else {
                        (i0, vec![1.0 - frac, frac])
                    }
                })
                .collect(),
            ResampleKind::Area => (0..out_len)
                .map(|i| {
                    let start = i * in_len / out_len;
                    let end = ((i + 1) * in_len).div_ceil(out_len);
                    let n = end - start;
                    (start, vec![1.0 / n as f64; n])
                })
                .collect(),
        };
        Self {
            in_len,
            out_len,
            taps,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            in_len: n,
            out_len: n,
            taps: (0..n).map(|i| (i, vec![1.0])).collect(),
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn is_identity(&self) -> bool {
        self.in_len == self.out_len && self.taps.iter().enumerate().all(|(i, (s, w))| *s == i && w == &[1.0])
    }

    /// Applies the resampler along `axis` (0..3) of a `[c, d, h, w]` array.
    pub fn apply_axis<T: Real>(&self, x: &[T], c: usize, dims: [usize; 3], axis: usize) -> (Vec<T>, [usize; 3]) {
        assert_eq!(dims[axis], self.in_len);
        let mut out_dims = dims;
        out_dims[axis] = self.out_len;
        let outer = c * dims[..axis].iter().product::<usize>();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * self.out_len * inner];
        let weights: Vec<Vec<T>> = self.taps.iter().map(|(_, w)| w.iter().map(|&v| T::lit(v)).collect()).collect();
        for o in 0..outer {
            let src = &x[o * self.in_len * inner..(o + 1) * self.in_len * inner];
            let dst = &mut out[o * self.out_len * inner..(o + 1) * self.out_len * inner];
            for (i, ((start, _), ws)) in self.taps.iter().zip(&weights).enumerate() {
                let d = &mut dst[i * inner..(i + 1) * inner];
                for (j, &wt) in ws.iter().enumerate() {
                    let s = &src[(start + j) * inner..(start + j + 1) * inner];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv += wt * sv;
                    }
                }
            }
        }
        (out, out_dims)
    }

    /// Transpose of [`apply_axis`](Self::apply_axis); `dims` are the input-side dims.
    pub fn apply_axis_transpose<T: Real>(&self, g: &[T], c: usize, dims: [usize; 3], axis: usize) -> Vec<T> {
        assert_eq!(dims[axis], self.in_len);
        let outer = c * dims[..axis].iter().product::<usize>();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * self.in_len * inner];
        let weights: Vec<Vec<T>> = self.taps.iter().map(|(_, w)| w.iter().map(|&v| T::lit(v)).collect()).collect();
        for o in 0..outer {
            let src = &g[o * self.out_len * inner..(o + 1) * self.out_len * inner];
            let dst = &mut out[o * self.in_len * inner..(o + 1) * self.in_len * inner];
            for (i, ((start, _), ws)) in self.taps.iter().zip(&weights).enumerate() {
                let s = &src[i * inner..(i + 1) * inner];
                for (j, &wt) in ws.iter().enumerate() {
                    let d = &mut dst[(start + j) * inner..(start + j + 1) * inner];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv += wt * sv;
                    }
                }
            }
        }
        out
    }
}

/// Resamples a `[c, d, h, w]` array separably along all three spatial axes.
pub(crate) fn resample_3d<T: Real>(x: &[T], c: usize, dims: [usize; 3], axes: &[AxisResampler; 3]) -> (Vec<T>, [usize; 3]) {
    let mut cur = x.to_vec();
    let mut cur_dims = dims;
    for (axis, r) in axes.iter().enumerate().rev() {
        if r.is_identity() {
            continue;
        }
        let (next, nd) = r.apply_axis(&cur, c, cur_dims, axis);
        cur = next;
        cur_dims = nd;
    }
    (cur, cur_dims)
}

/// Adjoint of [`resample_3d`]; `dims` are the original input dims.
pub(crate) fn resample_3d_transpose<T: Real>(g: &[T], c: usize, dims: [usize; 3], axes: &[AxisResampler; 3]) -> Vec<T> {
    // forward order was axis 2, 1, 0; undo in reverse
    let mut stage_dims = vec![dims];
    let mut d = dims;
    for (axis, r) in axes.iter().enumerate().rev() {
        if !r.is_identity() {
            d[axis] = r.out_len();
        }
        stage_dims.push(d);
    }
    let mut cur = g.to_vec();
    for (step, axis) in (0..3).enumerate() {
        let r = &axes[axis];
        // stage before applying `axis` in the forward pass
        let before = stage_dims[3 - step - 1];
        if r.is_identity() {
            continue;
        }
        cur = r.apply_axis_transpose(&cur, c, before, axis);
    }
    cur
}
