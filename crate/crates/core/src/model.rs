//! The full embedding-and-metric model: backbone, per-stage attention and
//! the weighted prototype head, stored as one flat set of named arrays.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use msenet_tensor::ops::conv2d;
use msenet_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{attend_pool, global_avg_pool_op, init_attention, param_name, AttentionConfig};
use crate::backbone::{
    forward_stages, load_pretrained, make_tiny_backbone, BackboneArch, DEFAULT_TINY_CHANNELS, NUM_STAGES,
};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::head::{aggregate_op, distances_op, loss_op, prototypes_op, DistanceForm, DEFAULT_STAGE_WEIGHTS};
use crate::params::{Bound, ParamStore};

pub const HEAD_WEIGHTS: &str = "head.w";
const BACKBONE_PREFIX: &str = "backbone.";

/// Which parts of the method are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    /// Use all five stages; otherwise only the last.
    pub multiscale: bool,
    /// Train the stage weights; otherwise they stay fixed at one.
    pub learnable_weights: bool,
    pub self_attention: bool,
}

impl Components {
    pub const FULL: Components = Components { multiscale: true, learnable_weights: true, self_attention: true };

    pub const BASELINE: Components = Components { multiscale: false, learnable_weights: false, self_attention: false };
}

impl Default for Components {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(
            f,
            "multiscale={} learnable_weights={} self_attention={}",
            on(self.multiscale),
            on(self.learnable_weights),
            on(self.self_attention)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Tiny,
    Residual18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Stage channels of the tiny variant.
    pub channels: [usize; NUM_STAGES],
    /// Pretrained residual-18 weights (safetensors); empty when unused.
    pub weights: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { variant: BackboneVariant::Tiny, channels: DEFAULT_TINY_CHANNELS, weights: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub w_init: [f64; NUM_STAGES],
    pub distance: DistanceForm,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { w_init: DEFAULT_STAGE_WEIGHTS, distance: DistanceForm::Euclidean }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub head: HeadConfig,
    pub components: Components,
}

/// Whether images are embedded as support or query examples. Only matters
/// when γ is split between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub arch: BackboneArch,
    pub components: Components,
    pub distance: DistanceForm,
    pub split_gamma: bool,
    /// `backbone.*`, `attn.p{1..5}.*` and `head.w`.
    pub params: ParamStore<T>,
    /// Backbone batch-norm statistics under their backbone-local names.
    pub buffers: ParamStore<T>,
}

/// Builds the initial parameters of `cfg`. The residual variant loads
/// `cfg.backbone.weights`; the tiny variant and attention are seeded.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let backbone = match cfg.backbone.variant {
        BackboneVariant::Tiny => make_tiny_backbone::<T>(&cfg.backbone.channels, seed)?,
        BackboneVariant::Residual18 => {
            if cfg.backbone.weights.is_empty() {
                return Err(Error::Config(
                    "backbone.weights must name a pretrained file for the residual18 variant".into(),
                ));
            }
            let path = PathBuf::from(&cfg.backbone.weights);
            if !path.exists() {
                return Err(Error::Config(format!("pretrained weights {} not found", path.display())));
            }
            load_pretrained::<T>(&path)?
        }
    };
    Ok(ModelParams::assemble(backbone, cfg, seed))
}

impl<T: Scalar> ModelParams<T> {
    /// Adds attention and head parameters around an existing backbone.
    pub fn assemble(backbone: crate::backbone::BackboneParams<T>, cfg: &ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        params.extend_prefixed(BACKBONE_PREFIX, &backbone.params);
        if cfg.components.self_attention {
            params.extend_prefixed("", &init_attention::<T>(backbone.arch.stage_channels(), &cfg.attention, seed));
        }
        let w: Vec<T> = if cfg.components.learnable_weights {
            cfg.head.w_init.iter().map(|&x| T::from_f64_lossy(x)).collect()
        } else {
            vec![T::one(); NUM_STAGES]
        };
        params.insert(HEAD_WEIGHTS, Tensor::from_vec(&[NUM_STAGES], w).expect("five weights"));
        Self {
            arch: backbone.arch,
            components: cfg.components,
            distance: cfg.head.distance,
            split_gamma: cfg.components.self_attention && cfg.attention.split_gamma,
            params,
            buffers: backbone.buffers,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        name != HEAD_WEIGHTS || self.components.learnable_weights
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|(n, _)| self.is_trainable(n)).map(|(_, t)| t.len()).sum()
    }

    /// 0-based stages that feed the head.
    pub fn active_stages(&self) -> Vec<usize> {
        if self.components.multiscale {
            (0..NUM_STAGES).collect()
        } else {
            vec![NUM_STAGES - 1]
        }
    }

    pub fn stage_weights(&self) -> &Tensor<T> {
        self.params.get(HEAD_WEIGHTS).expect("head weights always present")
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound::new(tape, &self.params, |n| self.is_trainable(n))
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound::new(tape, &self.params, |_| false)
    }

    /// Stage vectors `[B, C_p]` for each active stage.
    pub fn embed<'t>(&self, bound: &Bound<'t, T>, images: Var<'t, T>, role: Role) -> Result<Vec<Var<'t, T>>> {
        let p = |name: &str| bound.get(&format!("{BACKBONE_PREFIX}{name}"));
        let stages = forward_stages(self.arch, &self.buffers, &p, images)?;
        let batch = images.shape()[0];
        let group = usize::from(self.split_gamma && role == Role::Query);
        self.active_stages()
            .into_iter()
            .map(|s| {
                let f = stages[s];
                if !self.components.self_attention {
                    return global_avg_pool_op(f);
                }
                let stage = s + 1;
                let proj = |field: &str| -> Result<Var<'t, T>> {
                    Ok(conv2d(f, bound.get(&param_name(stage, field))?, None, 1, 0)?)
                };
                let (q, k, v) = (proj("wq")?, proj("wk")?, proj("wv")?);
                let mut gammas = vec![bound.get(&param_name(stage, "gamma"))?];
                if self.split_gamma {
                    gammas.push(bound.get(&param_name(stage, "gamma_q"))?);
                }
                attend_pool(q, k, v, f, &gammas, &vec![group; batch])
            })
            .collect()
    }

    /// Aggregated distances `[Q, N]` from per-stage support and query vectors.
    pub fn classify<'t>(
        &self,
        bound: &Bound<'t, T>,
        support: &[Var<'t, T>],
        support_labels: &[usize],
        query: &[Var<'t, T>],
        n_way: usize,
    ) -> Result<Var<'t, T>> {
        let stages = self.active_stages();
        if support.len() != stages.len() || query.len() != stages.len() {
            return Err(Error::Shape(format!(
                "{} support and {} query stage vectors for {} active stages",
                support.len(),
                query.len(),
                stages.len()
            )));
        }
        let dists = stages
            .iter()
            .zip(support.iter().zip(query))
            .map(|(&s, (&sv, &qv))| {
                let protos = prototypes_op(sv, support_labels, n_way)?;
                distances_op(qv, protos, self.distance, s + 1)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate_op(&dists, &stages, bound.get(HEAD_WEIGHTS)?)
    }

    /// Mean episode loss and posterior for one batch of images.
    #[allow(clippy::too_many_arguments)]
    pub fn episode_loss<'t>(
        &self,
        bound: &Bound<'t, T>,
        support_images: Var<'t, T>,
        support_labels: &[usize],
        query_images: Var<'t, T>,
        query_labels: &[usize],
        n_way: usize,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        let sv = self.embed(bound, support_images, Role::Support)?;
        let qv = self.embed(bound, query_images, Role::Query)?;
        let agg = self.classify(bound, &sv, support_labels, &qv, n_way)?;
        loss_op(agg, query_labels)
    }

    /// Tape-free stage vectors for a batch of images.
    pub fn embed_batch(&self, images: &Tensor<T>, role: Role) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let x = tape.constant(images.clone());
        Ok(self.embed(&bound, x, role)?.into_iter().map(|v| (*v.value()).clone()).collect())
    }

    /// Tape-free aggregated distances from precomputed stage vectors.
    pub fn distances(
        &self,
        support: &[Tensor<T>],
        support_labels: &[usize],
        query: &[Tensor<T>],
        n_way: usize,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let sv: Vec<_> = support.iter().map(|t| tape.constant(t.clone())).collect();
        let qv: Vec<_> = query.iter().map(|t| tape.constant(t.clone())).collect();
        let agg = self.classify(&bound, &sv, support_labels, &qv, n_way)?;
        let out = (*agg.value()).clone();
        Ok(out)
    }

    /// Euclidean norm of every array, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.to_f64().norm())).collect()
    }
}

/// Stacks preprocessed images into a `[B, 3, H, W]` batch.
pub fn stack_images<T: Scalar>(images: &[Arc<ImageTensor>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let [c, h, w] = first.shape();
    let mut data = Vec::with_capacity(images.len() * ImageTensor::LEN);
    for img in images {
        data.extend(img.data().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
}
