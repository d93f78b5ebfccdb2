use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `floor((in + 2·pad − k)/stride) + 1`, or `None` when that is not positive.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, Geometry)> {
    let (n, h, w, cin) = input.nhwc()?;
    let &[kh, kw, kc, cout] = kernels.shape() else {
        return Err(Error::shape(format!(
            "conv2d kernels must be kh×kw×cin×cout, got {:?}",
            kernels.shape()
        )));
    };
    if kc != cin {
        return Err(Error::shape(format!(
            "conv2d: kernel channels {kc} != input channels {cin}"
        )));
    }
    let ho = conv_output_extent(h, kh, stride, pad);
    let wo = conv_output_extent(w, kw, stride, pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(format!(
            "conv2d: non-positive output extent for {h}×{w} input, {kh}×{kw} kernel, stride {stride}, pad {pad}"
        )));
    };
    Ok((n, Geometry { h, w, cin, kh, kw, cout, stride, pad, ho, wo }))
}

/// Unfold one image into a `(ho·wo) × (kh·kw·cin)` patch matrix, zero padded.
fn im2col<T: Scalar>(image: &[T], g: &Geometry, patches: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut patches[(oy * g.wo + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                let dst = &mut row[ky * g.kw * g.cin..][..g.kw * g.cin];
                if iy < 0 || iy >= g.h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let d = &mut dst[kx * g.cin..][..g.cin];
                    if ix < 0 || ix >= g.w as isize {
                        d.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        d.copy_from_slice(&image[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the image grid.
fn col2im<T: Scalar>(patches: &[T], g: &Geometry, image: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &patches[(oy * g.wo + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, &s) in image[dst..dst + g.cin].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation without bias.
///
/// `input` is `H×W×C` or `N×H×W×C`; `kernels` is `kh×kw×C×F`. The output
/// keeps the input's rank.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g) = geometry(input, kernels, stride, pad)?;
    let in_per = g.h * g.w * g.cin;
    let out_per = g.positions() * g.cout;
    let mut out = vec![T::zero(); n * out_per];
    out.par_chunks_mut(out_per).enumerate().for_each(|(i, dst)| {
        let mut patches = vec![T::zero(); g.positions() * g.patch_len()];
        im2col(&input.data()[i * in_per..][..in_per], &g, &mut patches);
        T::gemm(
            g.positions(),
            g.patch_len(),
            g.cout,
            T::one(),
            &patches,
            (g.patch_len() as isize, 1),
            kernels.data(),
            (g.cout as isize, 1),
            T::zero(),
            dst,
            (g.cout as isize, 1),
        );
    });
    let shape = if input.rank() == 3 { vec![g.ho, g.wo, g.cout] } else { vec![n, g.ho, g.wo, g.cout] };
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, g) = geometry(input, kernels, stride, pad)?;
    let in_per = g.h * g.w * g.cin;
    let out_per = g.positions() * g.cout;
    if grad_out.len() != n * out_per {
        return Err(Error::shape(format!(
            "conv2d_backward: grad {:?} does not match output {}×{}×{}×{}",
            grad_out.shape(),
            n,
            g.ho,
            g.wo,
            g.cout
        )));
    }
    let k = g.patch_len();
    let mut grad_input = vec![T::zero(); n * in_per];
    let per_image: Vec<Vec<T>> = grad_input
        .par_chunks_mut(in_per)
        .enumerate()
        .map(|(i, dx)| {
            let mut patches = vec![T::zero(); g.positions() * k];
            im2col(&input.data()[i * in_per..][..in_per], &g, &mut patches);
            let go = &grad_out.data()[i * out_per..][..out_per];
            let mut dw = vec![T::zero(); k * g.cout];
            // dW = patchesᵀ · G
            T::gemm(
                k,
                g.positions(),
                g.cout,
                T::one(),
                &patches,
                (1, k as isize),
                go,
                (g.cout as isize, 1),
                T::zero(),
                &mut dw,
                (g.cout as isize, 1),
            );
            // dPatches = G · Wᵀ, reusing the patch buffer
            T::gemm(
                g.positions(),
                g.cout,
                k,
                T::one(),
                go,
                (g.cout as isize, 1),
                kernels.data(),
                (1, g.cout as isize),
                T::zero(),
                &mut patches,
                (k as isize, 1),
            );
            col2im(&patches, &g, dx);
            dw
        })
        .collect();
    let mut grad_kernels = vec![T::zero(); k * g.cout];
    for dw in &per_image {
        for (acc, &v) in grad_kernels.iter_mut().zip(dw) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), grad_input),
        Tensor::from_parts(kernels.shape().to_vec(), grad_kernels),
    ))
}
