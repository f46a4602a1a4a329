//! 2-d convolution (NCHW, no groups, no dilation) via im2col + GEMM.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, Var};
use crate::tensor::gemm;
use crate::{Scalar, Tensor};

/// Images per partial weight-gradient buffer. Fixed so the reduction order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let invalid = |msg: String| TensorError::Invalid { op: "conv2d", msg };
        let &[batch, in_channels, height, width] = input else {
            return Err(TensorError::Rank { expected: 4, shape: input.to_vec() });
        };
        let &[out_channels, w_in, kernel_h, kernel_w] = weight else {
            return Err(TensorError::Rank { expected: 4, shape: weight.to_vec() });
        };
        if w_in != in_channels {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: input.to_vec(), right: weight.to_vec() });
        }
        if stride == 0 {
            return Err(invalid("stride must be positive".into()));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(invalid(format!("kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width}")));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unrolls one image into `[patch_len, out_h*out_w]` columns.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &chan[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.width as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds columns back into one image gradient.
    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let chan = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Plain (tape-free) convolution forward pass.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: vec![g.out_channels],
                right: b.shape().to_vec(),
            });
        }
    }
    let plane = g.out_plane();
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let (k, w) = (g.patch_len(), weight.data());
    out.par_chunks_mut(out_len.max(1)).zip(x.data().par_chunks(g.in_len().max(1))).for_each(|(dst, img)| {
        if let Some(b) = bias {
            for (c, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.pointwise() {
            gemm(g.out_channels, k, plane, T::one(), w, false, img, false, beta, dst);
        } else {
            let mut cols = vec![T::zero(); k * plane];
            g.im2col(img, &mut cols);
            gemm(g.out_channels, k, plane, T::one(), w, false, &cols, false, beta, dst);
        }
    });
    Tensor::from_vec(&[g.batch, g.out_channels, g.out_h, g.out_w], out)
}

struct Conv2d {
    geom: ConvGeometry,
}

impl<T: Scalar> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (k, plane) = (g.patch_len(), g.out_plane());
        let out_len = g.out_channels * plane;

        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            dx.par_chunks_mut(g.in_len().max(1)).zip(grad.data().par_chunks(out_len.max(1))).for_each(
                |(dimg, gout)| {
                    if g.pointwise() {
                        gemm(k, g.out_channels, plane, T::one(), w.data(), true, gout, false, T::zero(), dimg);
                    } else {
                        let mut dcols = vec![T::zero(); k * plane];
                        gemm(k, g.out_channels, plane, T::one(), w.data(), true, gout, false, T::zero(), &mut dcols);
                        g.col2im_add(&dcols, dimg);
                    }
                },
            );
            Tensor::from_vec(x.shape(), dx).expect("input shape")
        });

        let dw = needs[1].then(|| {
            let partials: Vec<Vec<T>> = x
                .data()
                .par_chunks((g.in_len() * GRAD_CHUNK).max(1))
                .zip(grad.data().par_chunks((out_len * GRAD_CHUNK).max(1)))
                .map(|(imgs, gouts)| {
                    let mut acc = vec![T::zero(); g.out_channels * k];
                    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { k * plane }];
                    for (img, gout) in imgs.chunks(g.in_len()).zip(gouts.chunks(out_len)) {
                        let src: &[T] = if g.pointwise() {
                            img
                        } else {
                            g.im2col(img, &mut cols);
                            &cols
                        };
                        gemm(g.out_channels, plane, k, T::one(), gout, false, src, true, T::one(), &mut acc);
                    }
                    acc
                })
                .collect();
            let mut total = vec![T::zero(); g.out_channels * k];
            for p in partials {
                for (t, v) in total.iter_mut().zip(p) {
                    *t += v;
                }
            }
            Tensor::from_vec(w.shape(), total).expect("weight shape")
        });

        let mut result = vec![dx, dw];
        if inputs.len() == 3 {
            result.push(needs[2].then(|| {
                let mut db = vec![T::zero(); g.out_channels];
                for img in grad.data().chunks(out_len) {
                    for (c, row) in img.chunks(plane).enumerate() {
                        db[c] += T::sum_slice(row);
                    }
                }
                Tensor::from_vec(&[g.out_channels], db).expect("bias shape")
            }));
        }
        result
    }
}

/// Convolution of `x [B, Cin, H, W]` with `weight [Cout, Cin, kh, kw]`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    let bv = bias.map(|b| b.value());
    let out = conv2d_forward(&xv, &wv, bv.as_deref(), stride, padding)?;
    let geom = ConvGeometry::new(xv.shape(), wv.shape(), stride, padding)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(x.tape().record(&inputs, out, Conv2d { geom }))
}
