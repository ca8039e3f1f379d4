//! Parameter snapshots: `<stem>.json` header plus `<stem>.f64`, the tensors
//! as little-endian doubles in header order. Momentum buffers are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DetectorConfig, DetectorParams};
use crate::alignment::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MODEL_SCHEMA: &str = "pairalign.model.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub schema: String,
    /// Absent for discriminator snapshots.
    pub detector: Option<DetectorConfig>,
    pub tensors: Vec<TensorRecord>,
    pub content_hash: String,
    pub blob_sha256: String,
}

fn save_params(params: &ParamSet, detector: Option<&DetectorConfig>, dir: &Path, stem: &str) -> Result<ModelHeader> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = ModelHeader {
        schema: MODEL_SCHEMA.into(),
        detector: detector.cloned(),
        tensors,
        content_hash: params.content_hash(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let blob_path = dir.join(format!("{stem}.f64"));
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(header)
}

fn load_params(dir: &Path, stem: &str) -> Result<(ModelHeader, ParamSet)> {
    let json_path = dir.join(format!("{stem}.json"));
    if !json_path.exists() {
        return Err(Error::NotFound(json_path));
    }
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: ModelHeader = serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.schema != MODEL_SCHEMA {
        return Err(Error::format(
            &json_path,
            format!("schema {:?}, expected {MODEL_SCHEMA:?}", header.schema),
        ));
    }
    let blob_path = dir.join(format!("{stem}.f64"));
    if !blob_path.exists() {
        return Err(Error::NotFound(blob_path));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != header.blob_sha256 {
        return Err(Error::Integrity {
            path: blob_path,
            reason: "blob digest does not match the header".into(),
        });
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != 8 * total {
        return Err(Error::format(&json_path, "tensor shapes disagree with the blob size"));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = ParamSet::new();
    for rec in &header.tensors {
        let n = rec.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(rec.shape.clone(), data).map_err(|e| Error::format(&json_path, e.to_string()))?;
        params
            .insert(&rec.name, t)
            .map_err(|e| Error::format(&json_path, e.to_string()))?;
    }
    if params.content_hash() != header.content_hash {
        return Err(Error::Integrity {
            path: json_path,
            reason: "parameter hash does not match the header".into(),
        });
    }
    Ok((header, params))
}

/// Writes `model.json` and `model.f64` under `dir`.
pub fn save_detector(params: &DetectorParams, dir: &Path) -> Result<ModelHeader> {
    save_params(&params.params, Some(&params.config), dir, "model")
}

pub fn load_detector(dir: &Path) -> Result<DetectorParams> {
    let (header, params) = load_params(dir, "model")?;
    let config = header
        .detector
        .ok_or_else(|| Error::format(dir.join("model.json"), "missing detector config"))?;
    config.validate()?;
    let reference = DetectorParams::init(config.clone(), &mut crate::numerics::RngStream::new(0, 0))?;
    let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        return Err(Error::format(
            dir.join("model.json"),
            "tensor names or shapes do not match the detector config",
        ));
    }
    Ok(DetectorParams { config, params })
}

/// Writes `discriminator.json` and `discriminator.f64` under `dir`.
pub fn save_discriminator(disc: &DiscriminatorParams, dir: &Path) -> Result<ModelHeader> {
    save_params(&disc.params, None, dir, "discriminator")
}

pub fn load_discriminator(dir: &Path) -> Result<DiscriminatorParams> {
    let (_, params) = load_params(dir, "discriminator")?;
    Ok(DiscriminatorParams { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn detector_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = DetectorParams::init(DetectorConfig::default(), &mut RngStream::new(3, 0)).unwrap();
        save_detector(&p, dir.path()).unwrap();
        let back = load_detector(dir.path()).unwrap();
        assert_eq!(back.config, p.config);
        for ((n1, a), (n2, b)) in p.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        assert_eq!(back.content_hash(), p.content_hash());
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = DetectorParams::init(DetectorConfig::default(), &mut RngStream::new(3, 0)).unwrap();
        save_detector(&p, dir.path()).unwrap();
        let path = dir.path().join("model.f64");
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_detector(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn discriminator_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = DiscriminatorParams::init(8, &mut RngStream::new(1, 0)).unwrap();
        save_discriminator(&d, dir.path()).unwrap();
        assert_eq!(load_discriminator(dir.path()).unwrap().params.content_hash(), d.params.content_hash());
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_detector(dir.path()) {
            Err(Error::NotFound(p)) => assert!(p.ends_with("model.json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
