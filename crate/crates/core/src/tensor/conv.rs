//! Direct cross-correlation kernels for 2-D and 3-D convolution.
//!
//! 2-D convolutions run through the 3-D kernels with a unit depth axis.

use crate::error::{Error, Result};

/// Resolved shapes for one convolution call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    /// Whether the input carried an explicit leading batch axis.
    pub batched: bool,
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    /// Validates an input/kernel shape pair. The kernel is
    /// `[C_out, C_in, K...]`; the input is `[C_in, D...]` or `[B, C_in, D...]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("convolution stride must be positive"));
        }
        let spatial_rank = kernel.len().checked_sub(2).unwrap_or(0);
        if !(spatial_rank == 2 || spatial_rank == 3) {
            return Err(Error::shape(format!(
                "kernel must be [C_out, C_in, K...] with 2 or 3 spatial dims, got {kernel:?}"
            )));
        }
        let (batch, batched, rest) = if input.len() == spatial_rank + 2 {
            (input[0], true, &input[1..])
        } else if input.len() == spatial_rank + 1 {
            (1, false, input)
        } else {
            return Err(Error::shape(format!(
                "input rank {} does not match {spatial_rank}-D kernel {kernel:?}",
                input.len()
            )));
        };
        if rest[0] != kernel[1] {
            return Err(Error::shape(format!(
                "input has {} channels, kernel expects {}",
                rest[0], kernel[1]
            )));
        }
        let lift = |dims: &[usize], fill: usize| -> [usize; 3] {
            if dims.len() == 3 {
                [dims[0], dims[1], dims[2]]
            } else {
                [fill, dims[0], dims[1]]
            }
        };
        let in_dims = lift(&rest[1..], 1);
        let kernel_dims = lift(&kernel[2..], 1);
        let stride = if spatial_rank == 3 {
            [stride; 3]
        } else {
            [1, stride, stride]
        };
        let pad = if spatial_rank == 3 {
            [padding; 3]
        } else {
            [0, padding, padding]
        };
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad[a];
            if kernel_dims[a] > padded {
                return Err(Error::shape(format!(
                    "kernel {kernel:?} larger than padded input {input:?} (padding {padding})"
                )));
            }
            out_dims[a] = (padded - kernel_dims[a]) / stride[a] + 1;
        }
        Ok(ConvGeometry {
            batch,
            batched,
            spatial_rank,
            in_channels: kernel[1],
            out_channels: kernel[0],
            in_dims,
            kernel_dims,
            out_dims,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = Vec::with_capacity(5);
        if self.batched {
            shape.push(self.batch);
        }
        shape.push(self.out_channels);
        let skip = 3 - self.spatial_rank;
        shape.extend_from_slice(&self.out_dims[skip..]);
        shape
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel_dims.iter().product()
    }
}

/// Output indices `o` in `[lo, hi)` whose tap `o*s + k - p` lands inside `[0, n_in)`.
fn valid_range(k: usize, p: usize, s: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    if n_in + p <= k {
        return (0, 0);
    }
    let hi = ((n_in - 1 + p - k) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Calls `f(out_offset, in_offset, ox_lo, ox_hi)` for every output row touched by
/// kernel tap `(kz, ky, kx)`. Offsets are relative to one channel plane.
#[inline]
fn for_each_row(g: &ConvGeometry, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, isize, usize, usize)) {
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (z0, z1) = valid_range(kz, g.pad[0], g.stride[0], g.in_dims[0], od);
    let (y0, y1) = valid_range(ky, g.pad[1], g.stride[1], ih, oh);
    let (x0, x1) = valid_range(kx, g.pad[2], g.stride[2], iw, ow);
    if x0 >= x1 {
        return;
    }
    for oz in z0..z1 {
        let iz = oz * g.stride[0] + kz - g.pad[0];
        for oy in y0..y1 {
            let iy = oy * g.stride[1] + ky - g.pad[1];
            let out_row = (oz * oh + oy) * ow;
            // in index of ox is in_row + ox*sx; may start negative before x0.
            let in_row = ((iz * ih + iy) * iw) as isize + kx as isize - g.pad[2] as isize;
            f(out_row, in_row, x0, x1);
        }
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let sx = g.stride[2];
    let [_, kh, kw] = g.kernel_dims;
    let mut out = vec![0.0; g.batch * g.out_channels * ov];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(b * g.out_channels + co) * ov..][..ov];
            for ci in 0..g.in_channels {
                let x = &input[(b * g.in_channels + ci) * iv..][..iv];
                let w = &kernel[(co * g.in_channels + ci) * kv..][..kv];
                for kz in 0..g.kernel_dims[0] {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[(kz * kh + ky) * kw + kx];
                            for_each_row(g, kz, ky, kx, |orow, irow, x0, x1| {
                                for ox in x0..x1 {
                                    let ii = (irow + (ox * sx) as isize) as usize;
                                    o[orow + ox] += wv * x[ii];
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients for upstream gradient `gout`.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    let (iv, ov, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let sx = g.stride[2];
    let [_, kh, kw] = g.kernel_dims;
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let go = &gout[(b * g.out_channels + co) * ov..][..ov];
            for ci in 0..g.in_channels {
                let x_off = (b * g.in_channels + ci) * iv;
                let w_off = (co * g.in_channels + ci) * kv;
                let x = &input[x_off..][..iv];
                for kz in 0..g.kernel_dims[0] {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kidx = (kz * kh + ky) * kw + kx;
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let wv = kernel[w_off + kidx];
                                let gi = &mut gi[x_off..][..iv];
                                for_each_row(g, kz, ky, kx, |orow, irow, x0, x1| {
                                    for ox in x0..x1 {
                                        let ii = (irow + (ox * sx) as isize) as usize;
                                        gi[ii] += wv * go[orow + ox];
                                    }
                                });
                            }
                            if let Some(gk) = grad_kernel.as_deref_mut() {
                                let mut acc = 0.0;
                                for_each_row(g, kz, ky, kx, |orow, irow, x0, x1| {
                                    for ox in x0..x1 {
                                        let ii = (irow + (ox * sx) as isize) as usize;
                                        acc += x[ii] * go[orow + ox];
                                    }
                                });
                                gk[w_off + kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}
