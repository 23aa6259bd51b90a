use super::subject::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Sets every voxel within L1 distance `r` of a set voxel, via `r` rounds of
/// face-connected dilation. Works for any rank; clipped at the borders.
pub fn dilate_mask(mask: &Mask, r: usize) -> Mask {
    let st = strides(&mask.shape);
    let mut cur = mask.data.clone();
    for _ in 0..r {
        let mut next = cur.clone();
        for (i, &on) in cur.iter().enumerate() {
            if !on {
                continue;
            }
            for (&s, &n) in st.iter().zip(&mask.shape) {
                let coord = (i / s) % n;
                if coord > 0 {
                    next[i - s] = true;
                }
                if coord + 1 < n {
                    next[i + s] = true;
                }
            }
        }
        if next == cur {
            break;
        }
        cur = next;
    }
    Mask {
        shape: mask.shape.clone(),
        data: cur,
    }
}

/// Mean coordinate of the set voxels, `None` for an empty mask.
pub fn mask_centroid(mask: &Mask) -> Option<Vec<f64>> {
    let st = strides(&mask.shape);
    let mut sum = vec![0.0; mask.shape.len()];
    let mut n = 0usize;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &b)| b) {
        for (a, s) in sum.iter_mut().enumerate() {
            *s += ((i / st[a]) % mask.shape[a]) as f64;
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Crops `out_shape` around the rounded mask centroid, shifted as needed to
/// stay inside the volume. An empty mask crops around the volume centre.
pub fn crop_voi(volume: &Tensor, mask: &Mask, out_shape: &[usize]) -> Result<Tensor> {
    let shape = volume.shape();
    if mask.shape != shape || out_shape.len() != shape.len() {
        return Err(Error::shape(format!(
            "crop_voi: volume {:?}, mask {:?}, out {:?}",
            shape, mask.shape, out_shape
        )));
    }
    if out_shape.iter().zip(shape).any(|(o, n)| o > n || *o == 0) {
        return Err(Error::shape(format!(
            "crop_voi: output {out_shape:?} does not fit in volume {shape:?}"
        )));
    }
    let centre = mask_centroid(mask)
        .unwrap_or_else(|| shape.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect());
    let start: Vec<usize> = centre
        .iter()
        .zip(shape.iter().zip(out_shape))
        .map(|(&c, (&n, &o))| {
            let s = c.round() as i64 - (o / 2) as i64;
            s.clamp(0, (n - o) as i64) as usize
        })
        .collect();
    let in_st = strides(shape);
    let total: usize = out_shape.iter().product();
    let out_st = strides(out_shape);
    let src = volume.data();
    let data = (0..total)
        .map(|i| {
            let off: usize = (0..shape.len())
                .map(|a| ((i / out_st[a]) % out_shape[a] + start[a]) * in_st[a])
                .sum();
            src[off]
        })
        .collect();
    Tensor::new(out_shape.to_vec(), data)
}

/// Min-max scaling to `[0, 1]`. A constant input maps to zeros.
pub fn normalize_unit(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| (v - lo) / range).collect()
}

pub fn normalize_unit_tensor(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), normalize_unit(x.data())).expect("same shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchWindow {
    pub row: usize,
    pub col: usize,
    pub patch: Tensor,
}

/// Sliding windows over a 2-D image, kept when strictly more than 80% of the
/// window lies inside the ROI.
pub fn extract_patches_with_coverage(
    image: &Tensor,
    roi: &Mask,
    patch_size: usize,
    stride: usize,
) -> Result<Vec<PatchWindow>> {
    let shape = image.shape();
    if shape.len() != 2 || roi.shape != shape {
        return Err(Error::shape(format!(
            "patch extraction needs matching 2-D image and mask, got {:?} and {:?}",
            shape, roi.shape
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch_size == 0 || stride == 0 || patch_size > h || patch_size > w {
        return Err(Error::shape(format!(
            "patch {patch_size} (stride {stride}) does not fit image {h}x{w}"
        )));
    }
    // summed-area table over the ROI
    let mut integral = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = roi.data[y * w + x] as usize
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let area = patch_size * patch_size;
    let mut out = Vec::new();
    for row in (0..=h - patch_size).step_by(stride) {
        for col in (0..=w - patch_size).step_by(stride) {
            let (r1, c1) = (row + patch_size, col + patch_size);
            let covered = integral[r1 * (w + 1) + c1] + integral[row * (w + 1) + col]
                - integral[row * (w + 1) + c1]
                - integral[r1 * (w + 1) + col];
            // covered / area > 4/5, in integers
            if covered * 5 > area * 4 {
                let data = (row..r1)
                    .flat_map(|y| image.data()[y * w + col..y * w + c1].iter().copied())
                    .collect();
                out.push(PatchWindow {
                    row,
                    col,
                    patch: Tensor::new(vec![patch_size, patch_size], data)?,
                });
            }
        }
    }
    Ok(out)
}
