use crate::error::{Result, TensorError};
use crate::tape::{Backward, Var};
use crate::{Scalar, Tensor};

struct MaxPool2d {
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
}

/// Max pooling with implicit `-inf` padding. Ties resolve to the first
/// element in row-major window order.
pub fn max_pool2d<'t, T: Scalar>(x: Var<'t, T>, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if kernel == 0 || stride == 0 || padding * 2 > kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(TensorError::Invalid {
            op: "max_pool2d",
            msg: format!("kernel {kernel} stride {stride} padding {padding} on {h}x{w}"),
        });
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let data = xv.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
    Ok(x.tape().record(&[x], out, MaxPool2d { argmax }))
}
