//! Model checkpoints: `<stem>.json` manifest plus `<stem>.bin` payload of
//! little-endian f64 tensors in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig, Linear, LowRankAdapter, Mlp};
use crate::compensation::CompensationClassifier;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const FORMAT: &str = "mgclip-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Classifier fields kept in the manifest; the weight matrix lives in the
/// payload as tensor `classifier.weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub class_ids: Vec<usize>,
    pub frozen: Vec<bool>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    hyperparameters: EncoderConfig,
    seed: u64,
    logit_scale: f64,
    epochs_trained: u64,
    adapter_rank: Option<usize>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<ClassifierState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: DualEncoder,
    pub classifier: Option<CompensationClassifier>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn layer_tensors(prefix: &str, layer: &Linear, out: &mut Vec<(String, Matrix)>) {
    out.push((format!("{prefix}.weight"), layer.weight.clone()));
    out.push((
        format!("{prefix}.bias"),
        Matrix::new(1, layer.bias.len(), layer.bias.clone()).expect("finite bias"),
    ));
    if let Some(ad) = &layer.adapter {
        out.push((format!("{prefix}.adapter.a"), ad.a.clone()));
        out.push((format!("{prefix}.adapter.b"), ad.b.clone()));
    }
}

pub fn save_checkpoint(
    stem: impl AsRef<Path>,
    encoder: &DualEncoder,
    classifier: Option<&CompensationClassifier>,
) -> Result<()> {
    let (manifest_path, payload_path) = paths(stem.as_ref());
    let mut tensors = Vec::new();
    for (tower, net) in [("image", &encoder.image_net), ("text", &encoder.text_net)] {
        layer_tensors(&format!("{tower}.hidden"), &net.hidden, &mut tensors);
        layer_tensors(&format!("{tower}.output"), &net.output, &mut tensors);
    }
    if let Some(clf) = classifier {
        tensors.push(("classifier.weights".into(), clf.weights().clone()));
    }

    let adapter_rank = encoder.image_net.hidden.adapter.as_ref().map(LowRankAdapter::rank);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        hyperparameters: encoder.config.clone(),
        seed: encoder.config.seed,
        logit_scale: encoder.logit_scale,
        epochs_trained: encoder.epochs_trained,
        adapter_rank,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        classifier: classifier.map(|c| ClassifierState {
            class_ids: c.class_ids().to_vec(),
            frozen: c.frozen_mask().to_vec(),
            scale: c.scale(),
        }),
    };

    let mut payload = Vec::new();
    for (_, m) in &tensors {
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<Checkpoint> {
    let (manifest_path, payload_path) = paths(stem.as_ref());
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::HeaderMismatch(format!(
            "{} v{} is not a {FORMAT} v{VERSION} manifest",
            manifest.format, manifest.version
        )));
    }
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() < expected {
        return Err(Error::UnexpectedEof);
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch("checkpoint payload longer than manifest".into()));
    }

    let mut offset = 0;
    let mut tensors = std::collections::HashMap::new();
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        tensors.insert(t.name.clone(), Matrix::new(t.rows, t.cols, data)?);
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::HeaderMismatch(format!("missing tensor {name}")))
    };

    let mut layer = |prefix: &str| -> Result<Linear> {
        let weight = take(&format!("{prefix}.weight"))?;
        let bias = take(&format!("{prefix}.bias"))?.into_data();
        let adapter = match manifest.adapter_rank {
            Some(_) => Some(LowRankAdapter {
                a: take(&format!("{prefix}.adapter.a"))?,
                b: take(&format!("{prefix}.adapter.b"))?,
            }),
            None => None,
        };
        Ok(Linear { weight, bias, adapter })
    };
    let image_net = Mlp {
        hidden: layer("image.hidden")?,
        output: layer("image.output")?,
    };
    let text_net = Mlp {
        hidden: layer("text.hidden")?,
        output: layer("text.output")?,
    };
    let encoder = DualEncoder {
        config: manifest.hyperparameters.clone(),
        image_net,
        text_net,
        logit_scale: manifest.logit_scale,
        epochs_trained: manifest.epochs_trained,
    };
    let classifier = match manifest.classifier {
        Some(state) => Some(CompensationClassifier::from_parts(
            take("classifier.weights")?,
            state.class_ids,
            state.frozen,
            state.scale,
        )?),
        None => None,
    };
    Ok(Checkpoint { encoder, classifier })
}
