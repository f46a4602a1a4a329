//! Named-array files in the safetensors layout, written atomically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use msenet_tensor::{Scalar, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Contents of an archive after reading.
pub struct Archive<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    /// Names of entries with a non-floating dtype (e.g. integer counters).
    pub skipped: Vec<String>,
    pub metadata: HashMap<String, String>,
}

fn archive_err(path: &Path, reason: impl ToString) -> Error {
    Error::Archive { path: path.to_path_buf(), reason: reason.to_string() }
}

fn encode<T: Scalar>(t: &Tensor<T>) -> (Dtype, Vec<u8>) {
    match T::DTYPE {
        "f32" => (Dtype::F32, t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()),
        _ => (Dtype::F64, t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect()),
    }
}

/// Serialises `tensors` and `metadata`, writing to a sibling temp file and
/// renaming over `path` so readers never observe a partial file.
pub fn write_archive<'a, T: Scalar>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(name, t)| {
            let (dtype, bytes) = encode(t);
            (name, dtype, t.shape().to_vec(), bytes)
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes).map(|v| (name.clone(), v)).map_err(|e| archive_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &Some(metadata)).map_err(|e| archive_err(path, e))?;

    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        path.with_file_name(name)
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming onto {}", path.display()), e))
}

pub fn read_archive<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| archive_err(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| archive_err(path, e))?;
    let mut tensors = BTreeMap::new();
    let mut skipped = Vec::new();
    for (name, view) in st.tensors() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
            _ => {
                skipped.push(name);
                continue;
            }
        };
        let t = Tensor::from_vec(view.shape(), data).map_err(|e| archive_err(path, e))?;
        tensors.insert(name, t);
    }
    skipped.sort();
    Ok(Archive { tensors, skipped, metadata: meta.metadata().clone().unwrap_or_default() })
}
