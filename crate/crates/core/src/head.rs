//! Prototype construction, per-stage distances, weighted aggregation and the
//! softmax-over-negative-distance classifier.
//!
//! Plain functions operate on [`Tensor`]s; the `*_op` variants record the
//! same computation on a tape.

use msenet_tensor::{Backward, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::NUM_STAGES;
use crate::error::{Error, Result};

/// Initial stage weights `w`.
pub const DEFAULT_STAGE_WEIGHTS: [f64; NUM_STAGES] = [1.0, 1.1, 1.2, 1.3, 1.4];

/// Smallest probability accepted by [`episode_loss`] before clamping.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceForm {
    /// `‖a − b‖₂`
    #[default]
    Euclidean,
    /// `‖a − b‖₂²`, smooth at zero distance.
    Squared,
}

fn rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::Shape(format!("{what} must be 2-D, got {:?}", t.shape())))
}

/// Validates that every label in `0..n_way` occurs exactly `k` times and
/// returns that `k`.
fn shots_per_class(labels: &[usize], n_way: usize) -> Result<usize> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::Shape(format!("label {l} outside 0..{n_way}")))? += 1;
    }
    let k = counts.first().copied().unwrap_or(0);
    if k == 0 || counts.iter().any(|&c| c != k) {
        return Err(Error::Shape(format!("ragged support groups: per-class counts {counts:?}")));
    }
    Ok(k)
}

/// Mean of each class's support vectors: `[S, C]` → `[N, C]`.
pub fn compute_prototypes<T: Scalar>(support: &Tensor<T>, labels: &[usize], n_way: usize) -> Result<Tensor<T>> {
    let (s, c) = rows(support, "support vectors")?;
    if labels.len() != s {
        return Err(Error::Shape(format!("{s} support vectors but {} labels", labels.len())));
    }
    let k = shots_per_class(labels, n_way)?;
    let mut out = vec![T::zero(); n_way * c];
    for (row, &l) in support.data().chunks(c.max(1)).zip(labels) {
        for (o, &x) in out[l * c..(l + 1) * c].iter_mut().zip(row) {
            *o += x;
        }
    }
    let inv = T::one() / T::from_usize(k).expect("k");
    for o in &mut out {
        *o *= inv;
    }
    Ok(Tensor::from_vec(&[n_way, c], out)?)
}

/// `d[i, j]` between query `i` and prototype `j` of one stage.
pub fn stage_distances<T: Scalar>(
    queries: &Tensor<T>,
    protos: &Tensor<T>,
    form: DistanceForm,
    stage: usize,
) -> Result<Tensor<T>> {
    let (q, c) = rows(queries, "query vectors")?;
    let (n, cp) = rows(protos, "prototypes")?;
    if c != cp {
        return Err(Error::Shape(format!("stage {stage}: query vectors have {c} channels, prototypes {cp}")));
    }
    let mut out = Vec::with_capacity(q * n);
    for qi in queries.data().chunks(c.max(1)).take(q) {
        for pj in protos.data().chunks(c.max(1)).take(n) {
            let mut acc = T::zero();
            for (a, b) in qi.iter().zip(pj) {
                let d = *a - *b;
                acc += d * d;
            }
            out.push(match form {
                DistanceForm::Euclidean => acc.sqrt(),
                DistanceForm::Squared => acc,
            });
        }
    }
    Ok(Tensor::from_vec(&[q, n], out)?)
}

/// `Σ_p w[p] · d_p` over the listed stages (`stages[i]` is the 0-based stage of `dists[i]`).
pub fn aggregate_distances<T: Scalar>(dists: &[&Tensor<T>], stages: &[usize], w: &Tensor<T>) -> Result<Tensor<T>> {
    let first = dists.first().ok_or_else(|| Error::Shape("no stage distances".into()))?;
    if dists.len() != stages.len() || w.shape() != [NUM_STAGES] {
        return Err(Error::Shape(format!(
            "{} distance tensors, {} stage ids, weights {:?}",
            dists.len(),
            stages.len(),
            w.shape()
        )));
    }
    let mut out = vec![T::zero(); first.len()];
    for (d, &p) in dists.iter().zip(stages) {
        if d.shape() != first.shape() || p >= NUM_STAGES {
            return Err(Error::Shape(format!("stage {p} distances {:?} vs {:?}", d.shape(), first.shape())));
        }
        let wp = w.data()[p];
        for (o, &x) in out.iter_mut().zip(d.data()) {
            *o += wp * x;
        }
    }
    Ok(Tensor::from_vec(first.shape(), out)?)
}

/// Row-wise `softmax(−d)` computed with max-subtraction.
pub fn class_posterior<T: Scalar>(aggregated: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = rows(aggregated, "aggregated distances")?;
    let mut out = aggregated.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let lo = row.iter().copied().fold(T::infinity(), T::min);
        for x in row.iter_mut() {
            *x = lo - *x;
        }
        T::exp_slice(row);
        let inv = T::one() / T::sum_slice(row);
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Ok(Tensor::from_vec(aggregated.shape(), out)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Some true-class probability fell below [`PROB_FLOOR`] and was clamped.
    pub clamped: bool,
}

/// Mean over queries of `−log p(true class)`.
pub fn episode_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<LossValue> {
    let (q, n) = rows(probs, "posterior")?;
    if labels.len() != q || labels.iter().any(|&l| l >= n) {
        return Err(Error::Shape(format!("{} labels for {q} queries over {n} classes", labels.len())));
    }
    let mut clamped = false;
    let mut total = 0.0;
    for (row, &l) in probs.data().chunks(n.max(1)).zip(labels) {
        let p = row[l].as_f64();
        if p < PROB_FLOOR {
            clamped = true;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(LossValue { loss: total / q as f64, clamped })
}

/// Per-query argmin of aggregated distance, lowest index on ties.
pub fn predict<T: Scalar>(aggregated: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, n) = rows(aggregated, "aggregated distances")?;
    Ok(aggregated
        .data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

struct Prototypes {
    labels: Vec<usize>,
    k: usize,
}

impl<T: Scalar> Backward<T> for Prototypes {
    fn name(&self) -> &'static str {
        "prototypes"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = inputs[0].shape()[1];
        let inv = T::one() / T::from_usize(self.k).expect("k");
        let mut dx = Vec::with_capacity(inputs[0].len());
        for &l in &self.labels {
            dx.extend(grad.data()[l * c..(l + 1) * c].iter().map(|&g| g * inv));
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), dx).expect("support shape"))]
    }
}

pub fn prototypes_op<'t, T: Scalar>(support: Var<'t, T>, labels: &[usize], n_way: usize) -> Result<Var<'t, T>> {
    let out = compute_prototypes(&support.value(), labels, n_way)?;
    let k = shots_per_class(labels, n_way)?;
    Ok(support.tape().record(&[support], out, Prototypes { labels: labels.to_vec(), k }))
}

struct Distances {
    form: DistanceForm,
}

impl<T: Scalar> Backward<T> for Distances {
    fn name(&self) -> &'static str {
        "stage_distances"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (q, p) = (inputs[0], inputs[1]);
        let (nq, c) = (q.shape()[0], q.shape()[1]);
        let n = p.shape()[0];
        let mut dq = vec![T::zero(); q.len()];
        let mut dp = vec![T::zero(); p.len()];
        let two = T::from_f64_lossy(2.0);
        for i in 0..nq {
            for j in 0..n {
                let d = output.data()[i * n + j];
                // ∂d/∂(q_i − p_j): (q − p)/d for the norm (0 at d = 0), 2(q − p) squared.
                let scale = match self.form {
                    DistanceForm::Euclidean if d > T::zero() => grad.data()[i * n + j] / d,
                    DistanceForm::Euclidean => continue,
                    DistanceForm::Squared => grad.data()[i * n + j] * two,
                };
                for ch in 0..c {
                    let diff = (q.data()[i * c + ch] - p.data()[j * c + ch]) * scale;
                    dq[i * c + ch] += diff;
                    dp[j * c + ch] -= diff;
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_vec(q.shape(), dq).expect("query shape")),
            needs[1].then(|| Tensor::from_vec(p.shape(), dp).expect("prototype shape")),
        ]
    }
}

pub fn distances_op<'t, T: Scalar>(
    queries: Var<'t, T>,
    protos: Var<'t, T>,
    form: DistanceForm,
    stage: usize,
) -> Result<Var<'t, T>> {
    let out = stage_distances(&queries.value(), &protos.value(), form, stage)?;
    Ok(queries.tape().record(&[queries, protos], out, Distances { form }))
}

struct Aggregate {
    stages: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Aggregate {
    fn name(&self) -> &'static str {
        "aggregate_distances"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let w = inputs[inputs.len() - 1];
        let k = self.stages.len();
        let mut out: Vec<Option<Tensor<T>>> =
            self.stages.iter().zip(needs).map(|(&p, &need)| need.then(|| grad.map(|g| g * w.data()[p]))).collect();
        out.push(needs[k].then(|| {
            let mut dw = vec![T::zero(); NUM_STAGES];
            for (d, &p) in inputs[..k].iter().zip(&self.stages) {
                dw[p] += T::dot_slice(d.data(), grad.data());
            }
            Tensor::from_vec(&[NUM_STAGES], dw).expect("weights")
        }));
        out
    }
}

pub fn aggregate_op<'t, T: Scalar>(dists: &[Var<'t, T>], stages: &[usize], w: Var<'t, T>) -> Result<Var<'t, T>> {
    let values: Vec<_> = dists.iter().map(|d| d.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = aggregate_distances(&refs, stages, &w.value())?;
    let mut inputs = dists.to_vec();
    inputs.push(w);
    Ok(w.tape().record(&inputs, out, Aggregate { stages: stages.to_vec() }))
}

struct NegLogSoftmin<T> {
    labels: Vec<usize>,
    probs: Tensor<T>,
}

impl<T: Scalar> Backward<T> for NegLogSoftmin<T> {
    fn name(&self) -> &'static str {
        "episode_loss"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let n = self.probs.shape()[1];
        let scale = grad.item() / T::from_usize(self.labels.len()).expect("queries");
        let mut dd: Vec<T> = self.probs.data().iter().map(|&p| -p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            dd[i * n + l] += scale;
        }
        vec![Some(Tensor::from_vec(self.probs.shape(), dd).expect("distance shape"))]
    }
}

/// Mean over queries of `d[i, y_i] + log Σ_l exp(−d[i, l])`, which equals
/// `−log softmax(−d)[y_i]` without forming the probabilities first.
/// Returns the loss and the posterior.
pub fn loss_op<'t, T: Scalar>(aggregated: Var<'t, T>, labels: &[usize]) -> Result<(Var<'t, T>, Tensor<T>)> {
    let d = aggregated.value();
    let (q, n) = rows(&d, "aggregated distances")?;
    if labels.len() != q || labels.iter().any(|&l| l >= n) {
        return Err(Error::Shape(format!("{} labels for {q} queries over {n} classes", labels.len())));
    }
    let probs = class_posterior(&d)?;
    let mut total = T::zero();
    for (row, &l) in d.data().chunks(n).zip(labels) {
        let lo = row.iter().copied().fold(T::infinity(), T::min);
        let mut e: Vec<T> = row.iter().map(|&x| lo - x).collect();
        T::exp_slice(&mut e);
        total += row[l] - lo + T::sum_slice(&e).ln();
    }
    let loss = Tensor::scalar(total / T::from_usize(q).expect("queries"));
    let op = NegLogSoftmin { labels: labels.to_vec(), probs: probs.clone() };
    Ok((aggregated.tape().record(&[aggregated], loss, op), probs))
}
