use crate::error::{Result, TensorError};
use crate::tape::{Backward, Var};
use crate::{Scalar, Tensor};

struct Add;

impl<T: Scalar> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

/// Element-wise sum of two identically shaped values.
pub fn add<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(TensorError::ShapeMismatch { op: "add", left: av.shape().to_vec(), right: bv.shape().to_vec() });
    }
    let mut out = (*av).clone();
    out.add_assign(&bv);
    Ok(a.tape().record(&[a, b], out, Add))
}

struct Mul;

impl<T: Scalar> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(g, o)| *g * *o).collect();
            Tensor::from_vec(grad.shape(), data).expect("same shape")
        };
        vec![needs[0].then(|| prod(inputs[1])), needs[1].then(|| prod(inputs[0]))]
    }
}

/// Element-wise product of two identically shaped values.
pub fn mul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(TensorError::ShapeMismatch { op: "mul", left: av.shape().to_vec(), right: bv.shape().to_vec() });
    }
    let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
    let out = Tensor::from_vec(av.shape(), data)?;
    Ok(a.tape().record(&[a, b], out, Mul))
}

struct Sum;

impl<T: Scalar> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

/// Sum of all entries, as a one-element value.
pub fn sum<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let out = Tensor::scalar(a.value().sum());
    a.tape().record(&[a], out, Sum)
}

struct Relu;

impl<T: Scalar> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let data =
            grad.data().iter().zip(output.data()).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect();
        vec![Some(Tensor::from_vec(grad.shape(), data).expect("same shape"))]
    }
}

pub fn relu<'t, T: Scalar>(a: Var<'t, T>) -> Var<'t, T> {
    let out = a.value().map(|x| if x > T::zero() { x } else { T::zero() });
    a.tape().record(&[a], out, Relu)
}

struct Reshape {
    from: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshape(&self.from).expect("element count preserved"))]
    }
}

pub fn reshape<'t, T: Scalar>(a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let value = a.value();
    let from = value.shape().to_vec();
    let out = (*value).clone().reshape(shape)?;
    Ok(a.tape().record(&[a], out, Reshape { from }))
}

struct ConcatOuter {
    rows: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatOuter {
    fn name(&self) -> &'static str {
        "concat_outer"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        self.rows
            .iter()
            .zip(needs)
            .map(|(&r, &need)| {
                let g = need.then(|| grad.slice_outer(start, start + r));
                start += r;
                g
            })
            .collect()
    }
}

/// Concatenation along the leading axis.
pub fn concat_outer<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or(TensorError::Empty("concat_outer"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat_outer(&refs)?;
    let rows = values.iter().map(|v| v.shape()[0]).collect();
    Ok(first.tape().record(parts, out, ConcatOuter { rows }))
}
