//! Per-stage self-attention refinement followed by global average pooling.
//!
//! For a stage map `f` with `L = H·W` positions, 1×1 projections give
//! `q, k ∈ R^{C/r × L}` and `v ∈ R^{C × L}`. Scores are
//! `S[i, j] = q_iᵀ k_j`, normalised over the source index `i`:
//! `β[i, j] = exp S[i, j] / Σ_i' exp S[i', j]`. The refined map is
//! `y_j = γ Σ_i β[i, j] v_i + f_j` and the stage vector is its spatial mean.
//!
//! The functions [`project_qkv`], [`attention_weights`], [`apply_attention`]
//! and [`global_avg_pool`] compute those steps literally on one image. The
//! model uses [`attend_pool`], which produces the pooled vector directly:
//! since `mean_j y_j = γ/L · v · s + mean_j f_j` with `s_i = Σ_j β[i, j]`,
//! the `C × L × L` product never has to be formed. β is streamed in row
//! blocks and recomputed in the backward pass.

use msenet_tensor::{gemm_view, Backward, MatMut, MatRef, Scalar, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::NUM_STAGES;
use crate::error::{Error, Result};
use crate::init::uniform_fan_in;
use crate::params::ParamStore;
use crate::seed::{derive_seed, STREAM_INIT};

/// Rows of the transposed attention map materialised at once.
const BLOCK_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Channel reduction ratio of the query/key projections.
    pub reduction: usize,
    pub gamma_init: f64,
    /// Separate γ for support and query images.
    pub split_gamma: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { reduction: 8, gamma_init: 0.2, split_gamma: false }
    }
}

pub fn reduced_channels(c: usize, reduction: usize) -> usize {
    (c / reduction.max(1)).max(1)
}

pub fn param_name(stage: usize, field: &str) -> String {
    format!("attn.p{stage}.{field}")
}

/// Seeded projections and constant γ for every stage.
pub fn init_attention<T: Scalar>(channels: [usize; NUM_STAGES], cfg: &AttentionConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (s, &c) in channels.iter().enumerate() {
        let stage = s + 1;
        let cr = reduced_channels(c, cfg.reduction);
        let draw = |shape: &[usize], slot: u64| {
            uniform_fan_in::<T>(shape, c, derive_seed(seed, STREAM_INIT, 1000 + 10 * stage as u64 + slot))
        };
        store.insert(param_name(stage, "wq"), draw(&[cr, c, 1, 1], 0));
        store.insert(param_name(stage, "wk"), draw(&[cr, c, 1, 1], 1));
        store.insert(param_name(stage, "wv"), draw(&[c, c, 1, 1], 2));
        let gamma = Tensor::full(&[1], T::from_f64_lossy(cfg.gamma_init));
        if cfg.split_gamma {
            store.insert(param_name(stage, "gamma_q"), gamma.clone());
        }
        store.insert(param_name(stage, "gamma"), gamma);
    }
    store
}

/// Attention arrays of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAttentionParams<T: Scalar> {
    /// `[C/r, C, 1, 1]`
    pub wq: Tensor<T>,
    /// `[C/r, C, 1, 1]`
    pub wk: Tensor<T>,
    /// `[C, C, 1, 1]`
    pub wv: Tensor<T>,
    pub gamma: T,
}

/// Extracts stage `stage` (1-based) from a parameter store.
pub fn stage_params<T: Scalar>(store: &ParamStore<T>, stage: usize) -> Result<StageAttentionParams<T>> {
    if !(1..=NUM_STAGES).contains(&stage) {
        return Err(Error::Shape(format!("stage index {stage} outside 1..={NUM_STAGES}")));
    }
    Ok(StageAttentionParams {
        wq: store.get(&param_name(stage, "wq"))?.clone(),
        wk: store.get(&param_name(stage, "wk"))?.clone(),
        wv: store.get(&param_name(stage, "wv"))?.clone(),
        gamma: store.get(&param_name(stage, "gamma"))?.data()[0],
    })
}

fn chw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("{what} must be [C, H, W], got {:?}", t.shape()))),
    }
}

fn project<T: Scalar>(w: &Tensor<T>, f: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    let (c, h, wd) = chw(f, "feature map")?;
    let [co, ci, 1, 1] = *w.shape() else {
        return Err(Error::Shape(format!("{what} must be a 1×1 kernel, got {:?}", w.shape())));
    };
    if ci != c {
        return Err(Error::Shape(format!("{what} expects {ci} input channels, map has {c}")));
    }
    let l = h * wd;
    let mut out = vec![T::zero(); co * l];
    gemm_view(
        T::one(),
        MatRef::new(w.data(), co, c),
        MatRef::new(f.data(), c, l),
        T::zero(),
        MatMut::new(&mut out, co, l),
    );
    Ok(Tensor::from_vec(&[co, h, wd], out)?)
}

/// 1×1 projections of one `[C, H, W]` map.
pub fn project_qkv<T: Scalar>(
    f: &Tensor<T>,
    params: &StageAttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((project(&params.wq, f, "W_q")?, project(&params.wk, f, "W_k")?, project(&params.wv, f, "W_v")?))
}

/// Softmax in place over a row; returns `false` if the row was not finite.
fn softmax_row<T: Scalar>(row: &mut [T]) -> bool {
    let m = T::max_slice(row);
    if !m.is_finite() {
        return false;
    }
    for x in row.iter_mut() {
        *x -= m;
    }
    T::exp_slice(row);
    let inv = T::one() / T::sum_slice(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
    true
}

/// `β` as an `[L, L]` tensor indexed `[i, j]`; every column sums to one.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (cr, h, w) = chw(q, "q")?;
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!("q {:?} and k {:?} differ", q.shape(), k.shape())));
    }
    let l = h * w;
    // Row j of the transpose holds column j of β.
    let mut bt = vec![T::zero(); l * l];
    gemm_view(
        T::one(),
        MatRef::new(k.data(), cr, l).t(),
        MatRef::new(q.data(), cr, l),
        T::zero(),
        MatMut::new(&mut bt, l, l),
    );
    for row in bt.chunks_mut(l) {
        if !softmax_row(row) {
            return Err(Error::Shape("non-finite attention scores".into()));
        }
    }
    let mut beta = vec![T::zero(); l * l];
    for j in 0..l {
        for i in 0..l {
            beta[i * l + j] = bt[j * l + i];
        }
    }
    Ok(Tensor::from_vec(&[l, l], beta)?)
}

/// `y_j = γ Σ_i β[i, j] v_i + f_j`.
pub fn apply_attention<T: Scalar>(f: &Tensor<T>, beta: &Tensor<T>, v: &Tensor<T>, gamma: T) -> Result<Tensor<T>> {
    let (c, h, w) = chw(f, "f")?;
    let l = h * w;
    if v.shape() != f.shape() || beta.shape() != [l, l] {
        return Err(Error::Shape(format!(
            "apply_attention: f {:?}, v {:?}, beta {:?}",
            f.shape(),
            v.shape(),
            beta.shape()
        )));
    }
    let mut y = f.data().to_vec();
    gemm_view(gamma, MatRef::new(v.data(), c, l), MatRef::new(beta.data(), l, l), T::one(), MatMut::new(&mut y, c, l));
    Ok(Tensor::from_vec(f.shape(), y)?)
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    T::sum_slice(xs) / T::from_usize(xs.len()).expect("length")
}

/// Channel means of a `[C, H, W]` map.
pub fn global_avg_pool<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(y, "y")?;
    if h * w == 0 {
        return Err(Error::Shape("global_avg_pool over an empty map".into()));
    }
    Ok(Tensor::from_vec(&[c], y.data().chunks(h * w).map(mean).collect())?)
}

/// Spatial means of a `[B, C, H, W]` batch as `[B, C]`.
pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h * w == 0 {
        return Err(Error::Shape("global_avg_pool over an empty map".into()));
    }
    Ok(Tensor::from_vec(&[b, c], x.data().chunks(h * w).map(mean).collect())?)
}

struct GlobalAvgPool {
    plane: usize,
}

impl<T: Scalar> Backward<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = T::one() / T::from_usize(self.plane).expect("plane");
        let mut dx = Vec::with_capacity(inputs[0].len());
        for g in grad.data() {
            dx.extend(std::iter::repeat_n(*g * scale, self.plane));
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), dx).expect("input shape"))]
    }
}

/// Differentiable spatial mean `[B, C, H, W] → [B, C]`.
pub fn global_avg_pool_op<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let out = gap_forward(&xv)?;
    let (_, _, h, w) = xv.dims4()?;
    Ok(x.tape().record(&[x], out, GlobalAvgPool { plane: h * w }))
}

/// Per-image shapes shared by the fused forward and backward passes.
#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    cr: usize,
    c: usize,
    l: usize,
}

/// `y += a · x`
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Streams the rows of `βᵀ` for one image in blocks, calling `visit(j0, block)`
/// with `block` holding rows `j0..j0 + block.len() / l`. `q` and `k` are
/// `[C/r, L]`; with few reduced channels the score rows are built as sums of
/// scaled query rows, which beats a general matrix product at this shape.
fn for_each_beta_block<T: Scalar>(d: Dims, q: &[T], k: &[T], mut visit: impl FnMut(usize, &mut [T])) -> bool {
    let mut buf = vec![T::zero(); BLOCK_ROWS.min(d.l) * d.l];
    let mut j0 = 0;
    while j0 < d.l {
        let rows = BLOCK_ROWS.min(d.l - j0);
        let block = &mut buf[..rows * d.l];
        for (r, row) in block.chunks_mut(d.l).enumerate() {
            row.fill(T::zero());
            for (qc, kc) in q.chunks(d.l).zip(k.chunks(d.l)) {
                axpy(row, kc[j0 + r], qc);
            }
            if !softmax_row(row) {
                return false;
            }
        }
        visit(j0, block);
        j0 += rows;
    }
    true
}

struct AttendPool<T> {
    dims: Dims,
    groups: Vec<usize>,
    /// Per image: `s_i = Σ_j β[i, j]`.
    col_mass: Vec<Vec<T>>,
    /// Per image: `v · s / L`.
    pooled_attn: Vec<Vec<T>>,
}

impl<T: Scalar> Backward<T> for AttendPool<T> {
    fn name(&self) -> &'static str {
        "attend_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let d = self.dims;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let gammas: Vec<T> = inputs[4..].iter().map(|g| g.data()[0]).collect();
        let inv_l = T::one() / T::from_usize(d.l).expect("L");
        let (qk_len, v_len) = (d.cr * d.l, d.c * d.l);
        let need_qk = needs[0] || needs[1];

        struct ImageGrads<T> {
            dq: Vec<T>,
            dk: Vec<T>,
            dv: Vec<T>,
            dgamma: T,
        }

        let per_image: Vec<ImageGrads<T>> = (0..d.batch)
            .into_par_iter()
            .map(|b| {
                let g = &grad.data()[b * d.c..(b + 1) * d.c];
                let gamma = gammas[self.groups[b]];
                let u: Vec<T> = g.iter().map(|&x| gamma * x * inv_l).collect();
                let s = &self.col_mass[b];
                let dgamma = T::dot_slice(g, &self.pooled_attn[b]);
                let mut dv = vec![T::zero(); if needs[2] { v_len } else { 0 }];
                for (row, &uc) in dv.chunks_mut(d.l.max(1)).zip(&u) {
                    for (x, &si) in row.iter_mut().zip(s) {
                        *x = uc * si;
                    }
                }
                let (mut dq, mut dk) = (Vec::new(), Vec::new());
                if need_qk {
                    let vb = &v[b * v_len..(b + 1) * v_len];
                    let (qb, kb) = (&q[b * qk_len..(b + 1) * qk_len], &k[b * qk_len..(b + 1) * qk_len]);
                    // t_i = ∂loss/∂β[i, j], identical for every j.
                    let mut t = vec![T::zero(); d.l];
                    for (vc, &uc) in vb.chunks(d.l).zip(&u) {
                        axpy(&mut t, uc, vc);
                    }
                    dq = vec![T::zero(); qk_len];
                    dk = vec![T::zero(); qk_len];
                    let ok = for_each_beta_block(d, qb, kb, |j0, block| {
                        for (r, row) in block.chunks_mut(d.l).enumerate() {
                            let dot = T::dot_slice(row, &t);
                            for (x, &ti) in row.iter_mut().zip(&t) {
                                *x *= ti - dot;
                            }
                            let j = j0 + r;
                            for c in 0..d.cr {
                                let qc = &qb[c * d.l..(c + 1) * d.l];
                                dk[c * d.l + j] = T::dot_slice(qc, row);
                                axpy(&mut dq[c * d.l..(c + 1) * d.l], kb[c * d.l + j], row);
                            }
                        }
                    });
                    assert!(ok, "attention scores were finite in the forward pass");
                }
                ImageGrads { dq, dk, dv, dgamma }
            })
            .collect();

        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(inputs.len());
        let gather = |pick: &dyn Fn(&ImageGrads<T>) -> &Vec<T>, shape: &[usize]| {
            let data: Vec<T> = per_image.iter().flat_map(|g| pick(g).iter().copied()).collect();
            Tensor::from_vec(shape, data).expect("gradient shape")
        };
        out.push(needs[0].then(|| gather(&|g| &g.dq, inputs[0].shape())));
        out.push(needs[1].then(|| gather(&|g| &g.dk, inputs[1].shape())));
        out.push(needs[2].then(|| gather(&|g| &g.dv, inputs[2].shape())));
        out.push(needs[3].then(|| {
            let mut df = Vec::with_capacity(inputs[3].len());
            for &x in grad.data() {
                df.extend(std::iter::repeat_n(x * inv_l, d.l));
            }
            Tensor::from_vec(inputs[3].shape(), df).expect("f shape")
        }));
        for (gi, need) in needs[4..].iter().enumerate() {
            out.push(need.then(|| {
                let mut acc = T::zero();
                for (b, img) in per_image.iter().enumerate() {
                    if self.groups[b] == gi {
                        acc += img.dgamma;
                    }
                }
                Tensor::from_vec(&[1], vec![acc]).expect("gamma shape")
            }));
        }
        out
    }
}

/// Fused attention and pooling for a batch: returns `[B, C]` stage vectors
/// `γ_{g(b)}/L · v_b · s_b + mean(f_b)`.
///
/// `q`, `k` are `[B, C/r, H, W]`, `v`, `f` are `[B, C, H, W]`, every entry of
/// `gammas` is a one-element γ, and `groups[b]` selects the γ of image `b`.
pub fn attend_pool<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    f: Var<'t, T>,
    gammas: &[Var<'t, T>],
    groups: &[usize],
) -> Result<Var<'t, T>> {
    let (q_rc, k_rc, v_rc, f_rc) = (q.value(), k.value(), v.value(), f.value());
    let (qv, kv, vv, fv) = (&*q_rc, &*k_rc, &*v_rc, &*f_rc);
    let (batch, cr, h, w) = qv.dims4()?;
    let (fb, c, fh, fw) = fv.dims4()?;
    if kv.shape() != qv.shape() || vv.shape() != fv.shape() || (fb, fh, fw) != (batch, h, w) {
        return Err(Error::Shape(format!(
            "attend_pool: q {:?}, k {:?}, v {:?}, f {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape(),
            fv.shape()
        )));
    }
    if groups.len() != batch || groups.iter().any(|&g| g >= gammas.len()) {
        return Err(Error::Shape(format!("{} γ groups for {} images over {} γ", groups.len(), batch, gammas.len())));
    }
    let gamma_vals: Vec<T> = gammas
        .iter()
        .map(|g| {
            let t = g.value();
            if t.len() == 1 {
                Ok(t.data()[0])
            } else {
                Err(Error::Shape(format!("γ must hold one value, got {:?}", t.shape())))
            }
        })
        .collect::<Result<_>>()?;
    let d = Dims { batch, cr, c, l: h * w };
    if d.l == 0 {
        return Err(Error::Shape("attend_pool over an empty map".into()));
    }
    let inv_l = T::one() / T::from_usize(d.l).expect("L");
    let (qk_len, v_len) = (cr * d.l, c * d.l);

    // column mass of β, attended pooled vector, output row
    type PoolRow<T> = (Vec<T>, Vec<T>, Vec<T>);
    let per_image: Vec<Option<PoolRow<T>>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let qb = &qv.data()[b * qk_len..(b + 1) * qk_len];
            let kb = &kv.data()[b * qk_len..(b + 1) * qk_len];
            let mut s = vec![T::zero(); d.l];
            let ok = for_each_beta_block(d, qb, kb, |_, block| {
                for row in block.chunks(d.l) {
                    for (acc, &x) in s.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            });
            if !ok {
                return None;
            }
            let vb = &vv.data()[b * v_len..(b + 1) * v_len];
            let pooled_attn: Vec<T> = vb.chunks(d.l).map(|row| T::dot_slice(row, &s) * inv_l).collect();
            let gamma = gamma_vals[groups[b]];
            let fbd = &fv.data()[b * v_len..(b + 1) * v_len];
            let out: Vec<T> = fbd.chunks(d.l).zip(&pooled_attn).map(|(row, &pa)| gamma * pa + mean(row)).collect();
            Some((s, pooled_attn, out))
        })
        .collect();

    let mut col_mass = Vec::with_capacity(batch);
    let mut pooled_attn = Vec::with_capacity(batch);
    let mut out = Vec::with_capacity(batch * c);
    for item in per_image {
        let (s, pa, o) = item.ok_or_else(|| Error::Shape("non-finite attention scores".into()))?;
        col_mass.push(s);
        pooled_attn.push(pa);
        out.extend(o);
    }
    let mut inputs = vec![q, k, v, f];
    inputs.extend_from_slice(gammas);
    let op = AttendPool { dims: d, groups: groups.to_vec(), col_mass, pooled_attn };
    Ok(q.tape().record(&inputs, Tensor::from_vec(&[batch, c], out)?, op))
}
