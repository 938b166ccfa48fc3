//! Inner numeric kernels behind the tape ops.
//!
//! Convolution is im2col + matrix multiply. Matrix products are written in
//! i-k-j order with a contiguous inner axis so the compiler can vectorize
//! them; on one core this is what decides whether training finishes in
//! minutes or hours.

use crate::scalar::Scalar;
use crate::tensor::Shape4;

/// y += a * x over equal-length slices.
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = a.mul_add(xi, *yi);
    }
}

/// out += A(m x k) * B(k x n), all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(orow, aik, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// Spatial output size of a convolution along one axis.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Convolution geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_shape: Shape4,
    /// Kernel dims read as (out-channels, kh, kw, in-channels).
    pub kernel_shape: Shape4,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_shape: Shape4, kernel_shape: Shape4, stride: usize, padding: usize) -> Self {
        ConvGeom {
            in_shape,
            kernel_shape,
            stride,
            padding,
            out_h: conv_out_dim(in_shape.height, kernel_shape.height, stride, padding),
            out_w: conv_out_dim(in_shape.width, kernel_shape.width, stride, padding),
        }
    }

    pub fn out_shape(&self) -> Shape4 {
        Shape4::new(self.in_shape.batch, self.out_h, self.out_w, self.kernel_shape.batch)
    }

    /// Patch length: kh * kw * cin.
    fn patch_len(&self) -> usize {
        self.kernel_shape.height * self.kernel_shape.width * self.kernel_shape.channels
    }

    /// Rows of the patch matrix: out_h * out_w.
    fn patch_rows(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Extract the patch matrix (patch_rows x patch_len) for one batch item.
/// Out-of-bounds (padding) elements are zero.
fn im2col<T: Scalar>(geom: &ConvGeom, input_item: &[T], patches: &mut [T]) {
    let (h, w, cin) = (
        geom.in_shape.height,
        geom.in_shape.width,
        geom.in_shape.channels,
    );
    let (kh, kw) = (geom.kernel_shape.height, geom.kernel_shape.width);
    let plen = geom.patch_len();
    patches.fill(T::zero());
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * plen;
            for dy in 0..kh {
                let iy = (oy * geom.stride + dy) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * geom.stride + dx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = row + (dy * kw + dx) * cin;
                    patches[dst..dst + cin].copy_from_slice(&input_item[src..src + cin]);
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input gradient of one
/// batch item (the adjoint of `im2col`).
fn col2im_acc<T: Scalar>(geom: &ConvGeom, d_patches: &[T], d_input_item: &mut [T]) {
    let (h, w, cin) = (
        geom.in_shape.height,
        geom.in_shape.width,
        geom.in_shape.channels,
    );
    let (kh, kw) = (geom.kernel_shape.height, geom.kernel_shape.width);
    let plen = geom.patch_len();
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * plen;
            for dy in 0..kh {
                let iy = (oy * geom.stride + dy) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * geom.stride + dx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = row + (dy * kw + dx) * cin;
                    axpy(
                        &mut d_input_item[dst..dst + cin],
                        T::one(),
                        &d_patches[src..src + cin],
                    );
                }
            }
        }
    }
}

/// Forward convolution over the whole batch. `kernel` is (cout, kh, kw, cin)
/// row-major, i.e. a (cout x patch_len) matrix; `bias` has one entry per
/// output channel.
pub fn conv2d_forward<T: Scalar>(
    geom: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    output: &mut [T],
) {
    let plen = geom.patch_len();
    let rows = geom.patch_rows();
    let cout = geom.kernel_shape.batch;
    let in_item = geom.in_shape.height * geom.in_shape.width * geom.in_shape.channels;
    let out_item = rows * cout;

    // Transposed weights (patch_len x cout) give a contiguous inner axis.
    let mut wt = vec![T::zero(); plen * cout];
    for co in 0..cout {
        for p in 0..plen {
            wt[p * cout + co] = kernel[co * plen + p];
        }
    }

    let mut patches = vec![T::zero(); rows * plen];
    for b in 0..geom.in_shape.batch {
        im2col(geom, &input[b * in_item..(b + 1) * in_item], &mut patches);
        let out_b = &mut output[b * out_item..(b + 1) * out_item];
        match bias {
            Some(bias) => {
                for r in 0..rows {
                    out_b[r * cout..(r + 1) * cout].copy_from_slice(bias);
                }
            }
            None => out_b.fill(T::zero()),
        }
        matmul_acc(&patches, &wt, out_b, rows, plen, cout);
    }
}

/// Gradients of a forward convolution. Any of the output slots may be `None`
/// when that gradient is not needed.
pub fn conv2d_backward<T: Scalar>(
    geom: &ConvGeom,
    input: &[T],
    kernel: &[T],
    d_output: &[T],
    mut d_input: Option<&mut [T]>,
    mut d_kernel: Option<&mut [T]>,
    mut d_bias: Option<&mut [T]>,
) {
    let plen = geom.patch_len();
    let rows = geom.patch_rows();
    let cout = geom.kernel_shape.batch;
    let in_item = geom.in_shape.height * geom.in_shape.width * geom.in_shape.channels;
    let out_item = rows * cout;

    let mut patches = vec![T::zero(); rows * plen];
    let mut d_patches = vec![T::zero(); rows * plen];
    for b in 0..geom.in_shape.batch {
        let d_out_b = &d_output[b * out_item..(b + 1) * out_item];

        if d_kernel.is_some() {
            im2col(geom, &input[b * in_item..(b + 1) * in_item], &mut patches);
        }

        if let Some(dk) = d_kernel.as_deref_mut() {
            // dK[co, :] += sum_r d_out[r, co] * patches[r, :]
            for r in 0..rows {
                let prow = &patches[r * plen..(r + 1) * plen];
                for co in 0..cout {
                    let g = d_out_b[r * cout + co];
                    if g != T::zero() {
                        axpy(&mut dk[co * plen..(co + 1) * plen], g, prow);
                    }
                }
            }
        }

        if let Some(db) = d_bias.as_deref_mut() {
            for r in 0..rows {
                for co in 0..cout {
                    db[co] += d_out_b[r * cout + co];
                }
            }
        }

        if let Some(di) = d_input.as_deref_mut() {
            // dPatches = d_out (rows x cout) * kernel (cout x plen)
            d_patches.fill(T::zero());
            matmul_acc(d_out_b, kernel, &mut d_patches, rows, cout, plen);
            col2im_acc(geom, &d_patches, &mut di[b * in_item..(b + 1) * in_item]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_out_dims() {
        assert_eq!(conv_out_dim(5, 3, 1, 0), 3);
        assert_eq!(conv_out_dim(5, 3, 1, 1), 5);
        assert_eq!(conv_out_dim(64, 2, 2, 0), 32);
    }

    #[test]
    fn conv_identity_1x1_kernel_passes_through() {
        let in_shape = Shape4::new(1, 3, 3, 1);
        let geom = ConvGeom::new(in_shape, Shape4::new(1, 1, 1, 1), 1, 0);
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&geom, &input, &[1.0], None, &mut out);
        assert_eq!(out, input);
    }
}
