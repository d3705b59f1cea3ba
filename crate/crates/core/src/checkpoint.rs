//! Model weights and running statistics as a safetensors archive, with the
//! model config stored in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::Module;
use crate::{Error, Result};

const CONFIG_KEY: &str = "model_config";

fn to_bytes(a: &ArrayD<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn collect_tensors(model: &mut SegmentationModel) -> BTreeMap<String, (Vec<usize>, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut params = Vec::new();
    model.params("", &mut params);
    for (name, p) in params {
        out.insert(name, (p.value.shape().to_vec(), to_bytes(&p.value)));
    }
    let mut buffers = Vec::new();
    model.buffers("", &mut buffers);
    for (name, b) in buffers {
        out.insert(name, (b.shape().to_vec(), to_bytes(b)));
    }
    out
}

pub fn save_checkpoint(model: &mut SegmentationModel, path: &Path) -> Result<()> {
    let tensors = collect_tensors(model);
    let views = tensors
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(model.config())?);
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let (_, meta) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{CONFIG_KEY}`")))?;
    Ok(serde_json::from_str(text)?)
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, expected: &[usize]) -> Result<ArrayD<f64>> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if view.dtype() != Dtype::F64 || view.shape() != expected {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` is {:?}{:?}, expected F64{expected:?}",
            view.dtype(),
            view.shape()
        )));
    }
    let values = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(expected), values).expect("shape checked above"))
}

/// Overwrites every parameter and buffer of `model` from the archive at `path`.
pub fn load_weights(model: &mut SegmentationModel, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut expected = 0;
    let mut params = Vec::new();
    model.params("", &mut params);
    for (name, p) in params {
        p.value = read_tensor(&st, &name, p.value.shape())?;
        expected += 1;
    }
    let mut buffers = Vec::new();
    model.buffers("", &mut buffers);
    for (name, b) in buffers {
        let v = read_tensor(&st, &name, b.shape())?;
        b.assign(&v);
        expected += 1;
    }
    if st.len() != expected {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, model expects {expected}",
            st.len()
        )));
    }
    Ok(())
}

/// Rebuilds a model from the config stored in the archive and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<SegmentationModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let config = read_config(&bytes)?;
    let mut model = SegmentationModel::from_seed(config, 0)?;
    load_weights(&mut model, path)?;
    Ok(model)
}
