use msenet_tensor::ops::{conv2d, relu};
use msenet_tensor::{Scalar, Tensor, Var};

use super::{BackboneArch, BackboneParams, NUM_STAGES};
use crate::error::{Error, Result};
use crate::init::kaiming_normal;
use crate::params::ParamStore;
use crate::seed::{derive_seed, STREAM_INIT};

pub const DEFAULT_TINY_CHANNELS: [usize; NUM_STAGES] = [8, 16, 32, 64, 64];

pub(super) fn make<T: Scalar>(channel_plan: &[usize], seed: u64) -> Result<BackboneParams<T>> {
    let channels: [usize; NUM_STAGES] = channel_plan.try_into().map_err(|_| {
        Error::Config(format!("tiny backbone needs {NUM_STAGES} channel counts, got {}", channel_plan.len()))
    })?;
    if channels.contains(&0) {
        return Err(Error::Config(format!("tiny backbone channels must be ≥ 1, got {channels:?}")));
    }
    let mut params = ParamStore::new();
    let mut cin = 3;
    for (i, &cout) in channels.iter().enumerate() {
        let fan_in = cin * 9;
        let w = kaiming_normal(&[cout, cin, 3, 3], fan_in, derive_seed(seed, STREAM_INIT, i as u64));
        params.insert(format!("conv{}.weight", i + 1), w);
        params.insert(format!("conv{}.bias", i + 1), Tensor::zeros(&[cout]));
        cin = cout;
    }
    Ok(BackboneParams { arch: BackboneArch::Tiny { channels }, params, buffers: ParamStore::new() })
}

pub(super) fn forward<'t, T: Scalar>(
    p: &impl Fn(&str) -> Result<Var<'t, T>>,
    x: Var<'t, T>,
) -> Result<[Var<'t, T>; NUM_STAGES]> {
    let mut h = x;
    let mut out = Vec::with_capacity(NUM_STAGES);
    for i in 1..=NUM_STAGES {
        let w = p(&format!("conv{i}.weight"))?;
        let b = p(&format!("conv{i}.bias"))?;
        h = relu(conv2d(h, w, Some(b), 2, 1)?);
        out.push(h);
    }
    Ok(out.try_into().expect("five stages"))
}
