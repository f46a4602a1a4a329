//! Configurations where the model must collapse to simpler, known pipelines.

use msenet_core::attention::gap_forward;
use msenet_core::backbone::{make_tiny_backbone, BackboneParams};
use msenet_core::head::class_posterior;
use msenet_core::model::{Components, ModelConfig, ModelParams, Role};
use msenet_tensor::Tensor;

use super::oracle::{distances_oracle, gap_oracle, posterior_oracle, prototypes_oracle};
use super::{max_abs_diff, rng, uniform};

/// Small f64 model with every γ set to zero, plus its backbone.
pub fn zero_gamma_model(components: Components, seed: u64) -> (BackboneParams<f64>, ModelParams<f64>) {
    let mut cfg = ModelConfig::default();
    cfg.backbone.channels = [4, 6, 8, 8, 8];
    cfg.components = components;
    let bb = make_tiny_backbone::<f64>(&cfg.backbone.channels, seed).unwrap();
    let mut model = ModelParams::assemble(bb.clone(), &cfg, seed);
    let gammas: Vec<String> = model.params.names().filter(|n| n.contains("gamma")).map(String::from).collect();
    for n in gammas {
        model.params.insert(n, Tensor::full(&[1], 0.0));
    }
    (bb, model)
}

/// Largest gap between the attended stage vectors at γ = 0 and the pooled raw
/// pyramid, over both roles.
pub fn zero_gamma_error(seed: u64) -> f64 {
    let (bb, model) = zero_gamma_model(Components::FULL, seed);
    let x = uniform(&[3, 3, 24, 24], 1.0, &mut rng(seed + 1));
    let pooled: Vec<Tensor<f64>> = bb.forward_multiscale(&x).unwrap().iter().map(|s| gap_forward(s).unwrap()).collect();
    let mut worst = 0.0f64;
    for role in [Role::Support, Role::Query] {
        let attended = model.embed_batch(&x, role).unwrap();
        assert_eq!(attended.len(), pooled.len());
        for (a, p) in attended.iter().zip(&pooled) {
            worst = worst.max(max_abs_diff(a.data(), p.data()));
        }
    }
    worst
}

/// Largest posterior gap between the model restricted to its last stage
/// (fixed equal weights, γ = 0) and a plain prototype head on pooled
/// last-stage features.
pub fn prototype_head_error(seed: u64) -> f64 {
    let components = Components { multiscale: false, learnable_weights: false, self_attention: true };
    let (bb, model) = zero_gamma_model(components, seed);
    let (n, k, q) = (3, 2, 4);
    let mut r = rng(seed + 1);
    let support = uniform(&[n * k, 3, 24, 24], 1.0, &mut r);
    let query = uniform(&[q, 3, 24, 24], 1.0, &mut r);
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();

    let sv = model.embed_batch(&support, Role::Support).unwrap();
    let qv = model.embed_batch(&query, Role::Query).unwrap();
    let probs = class_posterior(&model.distances(&sv, &labels, &qv, n).unwrap()).unwrap();

    let pooled_last = |x: &Tensor<f64>| {
        let f = bb.forward_multiscale(x).unwrap().pop().unwrap();
        let (b, c, h, w) = f.dims4().unwrap();
        let per = c * h * w;
        let rows: Vec<f64> = (0..b).flat_map(|i| gap_oracle(&f.data()[i * per..(i + 1) * per], c, h * w)).collect();
        (rows, c)
    };
    let (se, c) = pooled_last(&support);
    let (qe, _) = pooled_last(&query);
    let protos = prototypes_oracle(&se, &labels, n, c);
    let reference = posterior_oracle(&distances_oracle(&qe, &protos, c, false), n);
    max_abs_diff(probs.data(), &reference)
}
