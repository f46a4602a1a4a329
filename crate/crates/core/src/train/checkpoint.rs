//! Training state archive: parameters, buffers and Adam moments as named
//! arrays; counters, configuration and history as metadata.

use std::collections::HashMap;
use std::path::Path;

use crate::archive::{read_archive, write_archive};
use crate::backbone::BackboneArch;
use crate::error::{Error, Result};
use crate::model::{BackboneVariant, ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::train::adam::{Adam, AdamConfig};
use crate::train::history::History;
use crate::train::TrainState;

pub const FORMAT_VERSION: &str = "1";

const PARAM: &str = "param.";
const BUFFER: &str = "buffer.";
const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

fn meta_json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("metadata serialises")
}

fn parse<D: serde::de::DeserializeOwned>(text: &str, key: &str) -> std::result::Result<D, String> {
    serde_json::from_str(text).map_err(|e| format!("metadata '{key}': {e}"))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let model = &state.model;
    let tensors =
        [(PARAM, &model.params), (BUFFER, &model.buffers), (MOMENT_M, &state.adam.m), (MOMENT_V, &state.adam.v)]
            .into_iter()
            .flat_map(|(prefix, store)| store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t)));

    let c = state.adam.config;
    let metadata = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("variant".to_string(), model.arch.tag().to_string()),
        ("arch".to_string(), meta_json(&model.arch)),
        ("components".to_string(), meta_json(&model.components)),
        ("distance".to_string(), meta_json(&model.distance)),
        ("split_gamma".to_string(), model.split_gamma.to_string()),
        ("counter".to_string(), state.counter.to_string()),
        ("adam_step".to_string(), state.adam.step.to_string()),
        ("adam".to_string(), meta_json(&[c.lr, c.beta1, c.beta2, c.eps])),
        ("config_hash".to_string(), state.config_hash.clone()),
        ("best_val".to_string(), meta_json(&state.best_val)),
        ("history".to_string(), meta_json(&state.history)),
        ("dtype".to_string(), "f32".to_string()),
    ]);
    write_archive(path, tensors, metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let archive = read_archive::<f32>(path)?;
    let bad = |reason: String| Error::Archive { path: path.to_path_buf(), reason };
    let meta = |key: &str| archive.metadata.get(key).cloned().ok_or_else(|| bad(format!("missing metadata '{key}'")));
    let version = archive.metadata.get("format_version").cloned().unwrap_or_default();
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION.to_string() });
    }
    let arch: BackboneArch = parse(&meta("arch")?, "arch").map_err(bad)?;
    let components = parse(&meta("components")?, "components").map_err(bad)?;
    let distance = parse(&meta("distance")?, "distance").map_err(bad)?;
    let split_gamma: bool = parse(&meta("split_gamma")?, "split_gamma").map_err(bad)?;
    let counter: u64 = parse(&meta("counter")?, "counter").map_err(bad)?;
    let adam_step: u64 = parse(&meta("adam_step")?, "adam_step").map_err(bad)?;
    let [lr, beta1, beta2, eps]: [f64; 4] = parse(&meta("adam")?, "adam").map_err(bad)?;
    let best_val: Option<f64> = parse(&meta("best_val")?, "best_val").map_err(bad)?;
    let history: History = parse(&meta("history")?, "history").map_err(bad)?;

    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut adam = Adam::new(AdamConfig { lr, beta1, beta2, eps });
    adam.step = adam_step;
    for (name, t) in archive.tensors {
        let (store, rest) = if let Some(r) = name.strip_prefix(PARAM) {
            (&mut params, r)
        } else if let Some(r) = name.strip_prefix(BUFFER) {
            (&mut buffers, r)
        } else if let Some(r) = name.strip_prefix(MOMENT_M) {
            (&mut adam.m, r)
        } else if let Some(r) = name.strip_prefix(MOMENT_V) {
            (&mut adam.v, r)
        } else {
            return Err(bad(format!("unexpected array '{name}'")));
        };
        store.insert(rest, t);
    }
    Ok(TrainState {
        model: ModelParams { arch, components, distance, split_gamma, params, buffers },
        adam,
        counter,
        history,
        config_hash: meta("config_hash")?,
        best_val,
    })
}

/// Loads a checkpoint and checks it was produced for `cfg`'s backbone.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let expected = match cfg.backbone.variant {
        BackboneVariant::Tiny => "tiny",
        BackboneVariant::Residual18 => "residual18",
    };
    if state.model.arch.tag() != expected {
        return Err(Error::VariantMismatch {
            found: state.model.arch.tag().to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(state)
}
