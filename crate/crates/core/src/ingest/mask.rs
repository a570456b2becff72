use crate::volume::DensityVolume;

/// Default number of 6-connected dilation steps applied to the contour support.
pub const DEFAULT_DILATION: usize = 2;

/// Zero everything outside the dilated support `{vol >= level}`.
pub fn apply_contour_mask(vol: &DensityVolume, level: f32, dilation: usize) -> DensityVolume {
    let mut support: Vec<bool> = vol.data().iter().map(|&v| v >= level).collect();
    let [d, h, w] = vol.dims();
    for _ in 0..dilation {
        let prev = support.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if prev[i] {
                        continue;
                    }
                    let hit = (z > 0 && prev[i - h * w])
                        || (z + 1 < d && prev[i + h * w])
                        || (y > 0 && prev[i - w])
                        || (y + 1 < h && prev[i + w])
                        || (x > 0 && prev[i - 1])
                        || (x + 1 < w && prev[i + 1]);
                    support[i] = hit;
                }
            }
        }
    }
    let data = vol.data().iter().zip(&support).map(|(&v, &s)| if s { v } else { 0.0 }).collect();
    vol.with_data(data).expect("masking keeps values finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> DensityVolume {
        DensityVolume::from_fn(6, 1.0, |z, y, x| (z + 2 * y + 3 * x) as f32 - 4.0).unwrap()
    }

    #[test]
    fn low_level_keeps_everything() {
        let v = ramp();
        assert_eq!(apply_contour_mask(&v, -100.0, 2), v);
    }

    #[test]
    fn high_level_rejects_everything() {
        let v = ramp();
        assert!(apply_contour_mask(&v, 1e6, 2).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn impulse_support_grows_but_values_stay() {
        let mut data = vec![0.0f32; 125];
        data[62] = 5.0;
        let v = DensityVolume::new([5; 3], data, 1.0).unwrap();
        let m = apply_contour_mask(&v, 1.0, 1);
        assert_eq!(m.data().iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(m.data()[62], 5.0);
    }

    #[test]
    fn dilation_reaches_six_neighbors_only() {
        // constant background exposes the support itself
        let mut data = vec![1.0f32; 125];
        data[62] = 5.0;
        let v = DensityVolume::new([5; 3], data, 1.0).unwrap();
        assert_eq!(apply_contour_mask(&v, 2.0, 1).data().iter().filter(|&&x| x != 0.0).count(), 7);
        // two steps cover the L1 ball of radius 2
        assert_eq!(apply_contour_mask(&v, 2.0, 2).data().iter().filter(|&&x| x != 0.0).count(), 25);
    }
}
