use std::collections::BTreeSet;
use std::path::Path;

use msenet_tensor::ops::{add, conv2d, frozen_batch_norm, max_pool2d, relu};
use msenet_tensor::{Scalar, Tensor, Var};

use super::{BackboneArch, BackboneParams, NUM_STAGES};
use crate::archive::read_archive;
use crate::error::{Error, Result};
use crate::init::kaiming_normal;
use crate::params::ParamStore;
use crate::seed::{derive_seed, STREAM_INIT};

/// Channels at the five taps: stem (before max-pool) and the four residual stages.
pub const RESNET_CHANNELS: [usize; NUM_STAGES] = [64, 64, 128, 256, 512];

const BN_EPS: f64 = 1e-5;
const BN_BUFFERS: [&str; 2] = ["running_mean", "running_var"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

fn push_bn(out: &mut Vec<(String, Vec<usize>, EntryKind)>, name: &str, c: usize) {
    out.push((format!("{name}.weight"), vec![c], EntryKind::Param));
    out.push((format!("{name}.bias"), vec![c], EntryKind::Param));
    for b in BN_BUFFERS {
        out.push((format!("{name}.{b}"), vec![c], EntryKind::Buffer));
    }
}

/// Every array of the 18-layer residual network without its classifier,
/// named as in torchvision.
pub fn residual18_layout() -> Vec<(String, Vec<usize>, EntryKind)> {
    let mut out = vec![("conv1.weight".to_string(), vec![64, 3, 7, 7], EntryKind::Param)];
    push_bn(&mut out, "bn1", 64);
    let mut cin = 64;
    for (layer, &cout) in RESNET_CHANNELS[1..].iter().enumerate() {
        for block in 0..2 {
            let pre = format!("layer{}.{block}", layer + 1);
            let bin = if block == 0 { cin } else { cout };
            out.push((format!("{pre}.conv1.weight"), vec![cout, bin, 3, 3], EntryKind::Param));
            push_bn(&mut out, &format!("{pre}.bn1"), cout);
            out.push((format!("{pre}.conv2.weight"), vec![cout, cout, 3, 3], EntryKind::Param));
            push_bn(&mut out, &format!("{pre}.bn2"), cout);
            if block == 0 && cin != cout {
                out.push((format!("{pre}.downsample.0.weight"), vec![cout, cin, 1, 1], EntryKind::Param));
                push_bn(&mut out, &format!("{pre}.downsample.1"), cout);
            }
        }
        cin = cout;
    }
    out
}

pub(super) fn make_random<T: Scalar>(seed: u64) -> BackboneParams<T> {
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for (i, (name, shape, kind)) in residual18_layout().into_iter().enumerate() {
        let value = if shape.len() == 4 {
            let fan_in = shape[1..].iter().product();
            kaiming_normal(&shape, fan_in, derive_seed(seed, STREAM_INIT, i as u64))
        } else if name.ends_with(".weight") || name.ends_with("running_var") {
            Tensor::full(&shape, T::one())
        } else {
            Tensor::zeros(&shape)
        };
        match kind {
            EntryKind::Param => params.insert(name, value),
            EntryKind::Buffer => buffers.insert(name, value),
        }
    }
    BackboneParams { arch: BackboneArch::Residual18, params, buffers }
}

fn ignored(name: &str) -> bool {
    name.starts_with("fc.") || name.ends_with("num_batches_tracked")
}

pub(super) fn load<T: Scalar>(path: &Path) -> Result<BackboneParams<T>> {
    let mut archive = read_archive::<T>(path)?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let (mut missing, mut mismatched) = (Vec::new(), Vec::new());
    let mut expected = BTreeSet::new();
    for (name, shape, kind) in residual18_layout() {
        expected.insert(name.clone());
        match archive.tensors.remove(&name) {
            None => missing.push(name),
            Some(t) if t.shape() != shape.as_slice() => {
                mismatched.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
            }
            Some(t) if !t.all_finite() => mismatched.push(format!("{name}: non-finite values")),
            Some(t) => match kind {
                EntryKind::Param => params.insert(name, t),
                EntryKind::Buffer => buffers.insert(name, t),
            },
        }
    }
    let unexpected: Vec<String> = archive
        .tensors
        .keys()
        .chain(&archive.skipped)
        .filter(|n| !ignored(n) && !expected.contains(*n))
        .cloned()
        .collect();
    if !(missing.is_empty() && mismatched.is_empty() && unexpected.is_empty()) {
        return Err(Error::WeightLayout { path: path.to_path_buf(), missing, mismatched, unexpected });
    }
    Ok(BackboneParams { arch: BackboneArch::Residual18, params, buffers })
}

fn conv_bn<'t, T: Scalar>(
    p: &impl Fn(&str) -> Result<Var<'t, T>>,
    buffers: &ParamStore<T>,
    x: Var<'t, T>,
    conv: &str,
    bn: &str,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let h = conv2d(x, p(&format!("{conv}.weight"))?, None, stride, padding)?;
    Ok(frozen_batch_norm(
        h,
        p(&format!("{bn}.weight"))?,
        p(&format!("{bn}.bias"))?,
        buffers.get(&format!("{bn}.running_mean"))?,
        buffers.get(&format!("{bn}.running_var"))?,
        T::from_f64_lossy(BN_EPS),
    )?)
}

pub(super) fn forward<'t, T: Scalar>(
    p: &impl Fn(&str) -> Result<Var<'t, T>>,
    buffers: &ParamStore<T>,
    x: Var<'t, T>,
) -> Result<[Var<'t, T>; NUM_STAGES]> {
    let stem = relu(conv_bn(p, buffers, x, "conv1", "bn1", 2, 3)?);
    let mut taps = vec![stem];
    let mut h = max_pool2d(stem, 3, 2, 1)?;
    let mut cin = RESNET_CHANNELS[1];
    for (layer, &cout) in RESNET_CHANNELS[1..].iter().enumerate() {
        for block in 0..2 {
            let pre = format!("layer{}.{block}", layer + 1);
            let stride = if block == 0 && layer > 0 { 2 } else { 1 };
            let a = relu(conv_bn(p, buffers, h, &format!("{pre}.conv1"), &format!("{pre}.bn1"), stride, 1)?);
            let b = conv_bn(p, buffers, a, &format!("{pre}.conv2"), &format!("{pre}.bn2"), 1, 1)?;
            let identity = if block == 0 && cin != cout {
                conv_bn(p, buffers, h, &format!("{pre}.downsample.0"), &format!("{pre}.downsample.1"), stride, 0)?
            } else {
                h
            };
            h = relu(add(b, identity)?);
        }
        cin = cout;
        taps.push(h);
    }
    Ok(taps.try_into().expect("five stages"))
}
