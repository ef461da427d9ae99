//! Model files: `<stem>.json` manifest next to a `<stem>.bin` blob of
//! little-endian f32 parameters in layer order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::LayerSpec;
use crate::nn::network::{Layer, Network};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "ec-model/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_outputs: usize,
    pub seed: u64,
    /// Global class id for each output index; empty when outputs are not classes.
    pub class_ids: Vec<u32>,
    /// Output index that means "none of mine", if any.
    pub other_output: Option<usize>,
    pub config_hash: String,
    pub blob_bytes: u64,
    pub crc32: u32,
}

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    pub class_ids: Vec<u32>,
    pub other_output: Option<usize>,
    pub config_hash: String,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn save_model<T: Scalar>(
    net: &Network<T>,
    meta: &ModelMeta,
    dir: &Path,
    stem: &str,
) -> Result<ModelManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(net.param_count() * 4);
    for p in net.params() {
        for &v in p.data() {
            blob.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        input_shape: net.input_shape().to_vec(),
        layers: net.specs(),
        num_outputs: net.num_outputs(),
        seed: meta.seed,
        class_ids: meta.class_ids.clone(),
        other_output: meta.other_output,
        config_hash: meta.config_hash.clone(),
        blob_bytes: blob.len() as u64,
        crc32: crc32fast::hash(&blob),
    };
    let (json, bin) = paths(dir, stem);
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a model, verifying blob length, CRC32 and (when given) the config hash.
pub fn load_model<T: Scalar>(
    dir: &Path,
    stem: &str,
    expected_hash: Option<&str>,
) -> Result<(Network<T>, ModelMeta)> {
    let (json, bin) = paths(dir, stem);
    if !json.exists() {
        return Err(Error::MissingStage {
            path: json,
            stage: "train-experts".into(),
        });
    }
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(&json)?)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::artifact(&json, format!("unknown format {}", manifest.format)));
    }
    if let Some(h) = expected_hash {
        if manifest.config_hash != h {
            return Err(Error::artifact(
                &json,
                format!("config hash {} does not match {h}", manifest.config_hash),
            ));
        }
    }
    let blob = fs::read(&bin)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::artifact(
            &bin,
            format!("{} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
        ));
    }
    if crc32fast::hash(&blob) != manifest.crc32 {
        return Err(Error::artifact(&bin, "CRC32 mismatch"));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| T::from_f32_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let mut params = Vec::new();
        for shape in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::artifact(&bin, "blob shorter than layer list implies"));
            }
            params.push(Tensor::new(shape, data)?);
        }
        layers.push(Layer { spec: *spec, params });
    }
    if values.next().is_some() {
        return Err(Error::artifact(&bin, "blob longer than layer list implies"));
    }
    let net = Network::from_layers(manifest.input_shape.clone(), layers)?;
    if net.num_outputs() != manifest.num_outputs {
        return Err(Error::artifact(&json, "num_outputs disagrees with layer list"));
    }
    Ok((
        net,
        ModelMeta {
            seed: manifest.seed,
            class_ids: manifest.class_ids,
            other_output: manifest.other_output,
            config_hash: manifest.config_hash,
        },
    ))
}
