use crate::error::{Result, TensorError};
use crate::tape::{Backward, Var};
use crate::{Scalar, Tensor};

struct FrozenBatchNorm<T> {
    inv_std: Vec<T>,
    mean: Vec<T>,
}

impl<T: Scalar> Backward<T> for FrozenBatchNorm<T> {
    fn name(&self) -> &'static str {
        "frozen_batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let (_, c, h, w) = x.dims4().expect("checked in forward");
        let plane = h * w;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dweight = vec![T::zero(); c];
        let mut dbias = vec![T::zero(); c];
        for (i, (gp, xp)) in grad.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.inv_std[ch]);
            dbias[ch] += T::sum_slice(gp);
            let mut acc = T::zero();
            for (g, xv) in gp.iter().zip(xp) {
                acc += *g * (*xv - m) * s;
            }
            dweight[ch] += acc;
            if let Some(dx) = dx.as_mut() {
                let scale = weight.data()[ch] * s;
                for (d, g) in dx.data_mut()[i * plane..(i + 1) * plane].iter_mut().zip(gp) {
                    *d = *g * scale;
                }
            }
        }
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dweight).expect("channels")),
            needs[2].then(|| Tensor::from_vec(&[c], dbias).expect("channels")),
        ]
    }
}

/// Batch normalisation with fixed running statistics (inference form):
/// `y = (x - mean) / sqrt(var + eps) * weight + bias`.
/// Only `weight` and `bias` are trainable; the statistics are constants.
pub fn frozen_batch_norm<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (_, c, h, w) = xv.dims4()?;
    for t in [&*weight.value(), &*bias.value(), running_mean, running_var] {
        if t.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "frozen_batch_norm",
                left: xv.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    let inv_std: Vec<T> = running_var.data().iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mean = running_mean.data().to_vec();
    let (wv, bv) = (weight.value(), bias.value());
    let plane = h * w;
    let mut out = (*xv).clone();
    for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = wv.data()[ch] * inv_std[ch];
        let shift = bv.data()[ch] - mean[ch] * scale;
        for v in p {
            *v = *v * scale + shift;
        }
    }
    Ok(x.tape().record(&[x, weight, bias], out, FrozenBatchNorm { inv_std, mean }))
}
