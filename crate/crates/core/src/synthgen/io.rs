//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.json        scene records, config, hashes
//! DIR/provenance.json      uid graph with transform tags
//! DIR/scenes/<uid>.img     3 × i32 LE header (H, W, C) + f32 LE pixels
//! DIR/scenes/<uid>.ann     one "x0 y0 x1 y1 class uid" line per box
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::benchmark::{Dataset, ProvenanceIndex, SynthConfig};
use super::scene::{AnnotatedBox, Domain, Provenance, SceneSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_SCHEMA: &str = "pairalign.dataset.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Target,
    Sibling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub uid: u64,
    pub split: Split,
    pub domain: Domain,
    pub image: String,
    pub annotations: String,
    pub boxes: usize,
    pub image_sha256: String,
    pub annotations_sha256: String,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub source: usize,
    pub target: usize,
    pub sibling: usize,
    pub source_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: SynthConfig,
    pub counts: Counts,
    pub provenance_file: String,
    pub provenance_sha256: String,
    pub scenes: Vec<SceneRecord>,
    /// SHA-256 of this manifest serialized with `digest` set to "".
    pub digest: String,
}

impl Manifest {
    fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.digest = String::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("manifest serializes")))
    }
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let shape = image.shape();
    let mut out = Vec::with_capacity(12 + 4 * image.len());
    for d in shape {
        out.extend_from_slice(&(*d as i32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "image header truncated"));
    }
    let dim = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h <= 0 || w <= 0 || c <= 0 {
        return Err(Error::format(path, format!("bad image header {h}x{w}x{c}")));
    }
    let n = (h * w * c) as usize;
    if bytes.len() != 12 + 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", 12 + 4 * n, bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![h as usize, w as usize, c as usize], data)
}

pub fn encode_annotations(boxes: &[AnnotatedBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            b.x0, b.y0, b.x1, b.y1, b.class_id, b.object_uid
        ));
    }
    out
}

pub fn decode_annotations(text: &str, path: &Path) -> Result<Vec<AnnotatedBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 6 fields, found {}", n + 1, fields.len()),
                ));
            }
            let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", n + 1));
            let coord = |i: usize| fields[i].parse::<f64>().map_err(|_| bad("coordinate"));
            Ok(AnnotatedBox {
                x0: coord(0)?,
                y0: coord(1)?,
                x1: coord(2)?,
                y1: coord(3)?,
                class_id: fields[4].parse().map_err(|_| bad("class"))?,
                object_uid: fields[5].parse().map_err(|_| bad("uid"))?,
            })
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;

    let mut records = Vec::new();
    let splits = [
        (Split::Source, &dataset.source),
        (Split::Target, &dataset.target),
        (Split::Sibling, &dataset.siblings),
    ];
    for (split, scenes) in splits {
        for scene in scenes.iter() {
            let image_rel = format!("scenes/{:08}.img", scene.uid);
            let ann_rel = format!("scenes/{:08}.ann", scene.uid);
            let img = encode_image(&scene.image);
            let ann = encode_annotations(&scene.boxes);
            write(&dir.join(&image_rel), &img)?;
            write(&dir.join(&ann_rel), ann.as_bytes())?;
            records.push(SceneRecord {
                uid: scene.uid,
                split,
                domain: scene.domain,
                image: image_rel,
                annotations: ann_rel,
                boxes: scene.boxes.len(),
                image_sha256: sha256(&img),
                annotations_sha256: sha256(ann.as_bytes()),
                provenance: scene.provenance.clone(),
            });
        }
    }
    let provenance = serde_json::to_vec_pretty(&dataset.provenance).expect("provenance serializes");
    write(&dir.join("provenance.json"), &provenance)?;

    let mut manifest = Manifest {
        schema: DATASET_SCHEMA.to_string(),
        seed: dataset.seed,
        config_hash: dataset.config.content_hash(),
        config: dataset.config.clone(),
        counts: Counts {
            source: dataset.source.len(),
            target: dataset.target.len(),
            sibling: dataset.siblings.len(),
            source_boxes: dataset.total_source_boxes(),
        },
        provenance_file: "provenance.json".into(),
        provenance_sha256: sha256(&provenance),
        scenes: records,
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), &text)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = read(&path)?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::format(
            &path,
            format!("unsupported schema {}", manifest.schema),
        ));
    }
    if manifest.digest != manifest.compute_digest() {
        return Err(Error::Integrity {
            path,
            reason: "manifest digest does not match its contents".into(),
        });
    }
    if manifest.config_hash != manifest.config.content_hash() {
        return Err(Error::Integrity {
            path,
            reason: "config hash does not match the recorded config".into(),
        });
    }
    Ok(manifest)
}

fn verified(dir: &Path, rel: &str, expected: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = read(&path)?;
    if sha256(&bytes) != expected {
        return Err(Error::Integrity {
            path,
            reason: "content hash mismatch".into(),
        });
    }
    Ok((path, bytes))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::NotFound(dir.join("manifest.json")));
    }
    let manifest = load_manifest(dir)?;
    let (ppath, pbytes) = verified(dir, &manifest.provenance_file, &manifest.provenance_sha256)?;
    let provenance: ProvenanceIndex =
        serde_json::from_slice(&pbytes).map_err(|e| Error::format(&ppath, e.to_string()))?;

    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut siblings = Vec::new();
    for rec in &manifest.scenes {
        let (ipath, ibytes) = verified(dir, &rec.image, &rec.image_sha256)?;
        let (apath, abytes) = verified(dir, &rec.annotations, &rec.annotations_sha256)?;
        let image = decode_image(&ibytes, &ipath)?;
        let text = String::from_utf8(abytes).map_err(|_| Error::format(&apath, "not UTF-8"))?;
        let boxes = decode_annotations(&text, &apath)?;
        if boxes.len() != rec.boxes {
            return Err(Error::Integrity {
                path: apath,
                reason: format!("manifest lists {} boxes, file has {}", rec.boxes, boxes.len()),
            });
        }
        let scene = SceneSample {
            uid: rec.uid,
            image,
            boxes,
            domain: rec.domain,
            provenance: rec.provenance.clone(),
            layout: None,
        };
        match rec.split {
            Split::Source => source.push(scene),
            Split::Target => target.push(scene),
            Split::Sibling => siblings.push(scene),
        }
    }
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        source,
        target,
        siblings,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::benchmark::generate_benchmark;

    fn tiny() -> Dataset {
        let config = SynthConfig {
            scenes: 4,
            ..SynthConfig::default()
        };
        generate_benchmark(&config, 12).unwrap()
    }

    fn strip_layouts(mut ds: Dataset) -> Dataset {
        for s in ds
            .source
            .iter_mut()
            .chain(ds.target.iter_mut())
            .chain(ds.siblings.iter_mut())
        {
            s.layout = None;
        }
        ds
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, strip_layouts(ds));
    }

    #[test]
    fn manifest_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"boxes\": ", "\"boxes\": 1", 1);
        fs::write(&path, tampered).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn blob_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        let img = dir.path().join(&manifest.scenes[0].image);
        let mut bytes = fs::read(&img).unwrap();
        bytes[20] ^= 0xff;
        fs::write(&img, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Integrity { path, .. }) => assert_eq!(path, img),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn empty_directory_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NotFound(_))));
    }

    #[test]
    fn missing_blob_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&tiny(), dir.path()).unwrap();
        let ann = dir.path().join(&manifest.scenes[1].annotations);
        fs::remove_file(&ann).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NotFound(p)) => assert_eq!(p, ann),
            other => panic!("expected not-found, got {other:?}"),
        }
    }

    #[test]
    fn image_header_layout() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125]).unwrap();
        let bytes = encode_image(&t);
        assert_eq!(&bytes[0..4], &2i32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3i32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(decode_image(&bytes, Path::new("x")).unwrap(), t);
    }
}
