//! Five-stage convolutional embedding networks.
//!
//! Both variants map `[B, 3, H, W]` images to five feature maps whose spatial
//! area strictly shrinks from stage 1 to stage 5.

mod residual;
mod tiny;

use std::fmt;
use std::path::Path;

use msenet_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

pub use residual::{residual18_layout, EntryKind, RESNET_CHANNELS};
pub use tiny::DEFAULT_TINY_CHANNELS;

pub const NUM_STAGES: usize = 5;

/// Architecture tag plus whatever shape information the variant needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum BackboneArch {
    Tiny { channels: [usize; NUM_STAGES] },
    Residual18,
}

impl BackboneArch {
    pub fn tag(&self) -> &'static str {
        match self {
            BackboneArch::Tiny { .. } => "tiny",
            BackboneArch::Residual18 => "residual18",
        }
    }

    pub fn stage_channels(&self) -> [usize; NUM_STAGES] {
        match self {
            BackboneArch::Tiny { channels } => *channels,
            BackboneArch::Residual18 => RESNET_CHANNELS,
        }
    }
}

impl fmt::Display for BackboneArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Trainable arrays and fixed buffers of one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T: Scalar> {
    pub arch: BackboneArch,
    pub params: ParamStore<T>,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: ParamStore<T>,
}

/// Builds a tiny backbone: five 3×3 stride-2 conv + ReLU blocks.
pub fn make_tiny_backbone<T: Scalar>(channel_plan: &[usize], seed: u64) -> Result<BackboneParams<T>> {
    tiny::make(channel_plan, seed)
}

/// Randomly initialised residual-18 backbone, for tests and accounting.
pub fn make_residual18<T: Scalar>(seed: u64) -> BackboneParams<T> {
    residual::make_random(seed)
}

/// Loads residual-18 weights from a safetensors file with torchvision names.
/// The classifier (`fc.*`) and `num_batches_tracked` counters are ignored.
pub fn load_pretrained<T: Scalar>(weights_file: &Path) -> Result<BackboneParams<T>> {
    residual::load(weights_file)
}

/// Forward pass with parameters supplied by `p` and buffers from `buffers`.
pub fn forward_stages<'t, T: Scalar>(
    arch: BackboneArch,
    buffers: &ParamStore<T>,
    p: &impl Fn(&str) -> Result<Var<'t, T>>,
    x: Var<'t, T>,
) -> Result<[Var<'t, T>; NUM_STAGES]> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::Shape(format!("backbone expects a non-empty [B, 3, H, W] batch, got {shape:?}")));
    }
    match arch {
        BackboneArch::Tiny { .. } => tiny::forward(p, x),
        BackboneArch::Residual18 => residual::forward(p, buffers, x),
    }
}

impl<T: Scalar> BackboneParams<T> {
    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Writes parameters and buffers under their architecture names.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = std::collections::HashMap::new();
        meta.insert("variant".to_string(), self.arch.tag().to_string());
        let all = self.params.iter().chain(self.buffers.iter()).map(|(k, v)| (k.to_string(), v));
        crate::archive::write_archive(path, all, meta)
    }

    /// Differentiable forward pass; parameter `name` is looked up as `prefix + name`.
    pub fn forward_bound<'t>(
        &self,
        bound: &Bound<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<[Var<'t, T>; NUM_STAGES]> {
        let p = |name: &str| bound.get(&format!("{prefix}{name}"));
        forward_stages(self.arch, &self.buffers, &p, x)
    }

    /// Plain forward pass returning the five stage maps.
    pub fn forward_multiscale(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params, |_| false);
        let x = tape.constant(batch.clone());
        let stages = self.forward_bound(&bound, "", x)?;
        Ok(stages.iter().map(|v| (*v.value()).clone()).collect())
    }
}
