//! Source feature memories: one foreground entry per labeled box and one
//! background entry per scene, plus refresh, subsampling and snapshots.
//!
//! Stored vectors are rounded to single precision so that a bank written to
//! disk and read back is identical to the one held in memory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{background_forward, extract_features, roi_forward, DetectorParams};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, squared_distance, RngStream};
use crate::par;
use crate::synthgen::SceneSample;

pub const MEMORY_SCHEMA: &str = "pairalign.memory.v1";
pub const DEFAULT_REFRESH_EPOCHS: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundEntry {
    pub g: Vec<f64>,
    pub class_id: usize,
    pub scene_uid: u64,
    pub object_uid: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub bg: Vec<f64>,
    pub scene_uid: u64,
}

/// Common view used by retrieval and subsampling.
pub trait MemoryEntry {
    fn vector(&self) -> &[f64];
    /// Tie-break key: object uid for foreground, scene uid for background.
    fn uid(&self) -> u64;
}

impl MemoryEntry for ForegroundEntry {
    fn vector(&self) -> &[f64] {
        &self.g
    }
    fn uid(&self) -> u64 {
        self.object_uid
    }
}

impl MemoryEntry for BackgroundEntry {
    fn vector(&self) -> &[f64] {
        &self.bg
    }
    fn uid(&self) -> u64 {
        self.scene_uid
    }
}

fn stored(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub dim: usize,
    /// `fg[c]` holds exactly the class-`c` entries.
    pub fg: Vec<Vec<ForegroundEntry>>,
    pub bg: Vec<BackgroundEntry>,
    pub built_at: u64,
    pub extractor_hash: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub fg_entries: usize,
    pub bg_entries: usize,
    /// Boxes skipped because they pool to less than a cell or a zero vector.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshStatus {
    Refreshed,
    TooEarly { due_at: u64 },
}

/// Foreground entries for every box of every scene, with the skip count.
pub fn build_foreground_memory(
    scenes: &[SceneSample],
    params: &DetectorParams,
) -> Result<(Vec<Vec<ForegroundEntry>>, usize)> {
    let classes = params.config.classes;
    let per_scene = par::map(scenes, |s| -> Result<(Vec<ForegroundEntry>, usize)> {
        let fmap = extract_features(&s.image, params)?;
        let mut out = Vec::new();
        let mut skipped = 0;
        for b in &s.boxes {
            if b.class_id >= classes {
                return Err(Error::Argument(format!(
                    "box {} has class {} but the detector knows {classes}",
                    b.object_uid, b.class_id
                )));
            }
            match roi_forward(&fmap, &[b.geom()], params) {
                Ok(h) if h.g.data().iter().any(|&v| v != 0.0) => out.push(ForegroundEntry {
                    g: stored(h.g.row(0)),
                    class_id: b.class_id,
                    scene_uid: s.uid,
                    object_uid: b.object_uid,
                }),
                Ok(_) | Err(Error::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, skipped))
    });
    let mut fg = vec![Vec::new(); classes];
    let mut skipped = 0;
    for r in per_scene {
        let (entries, s) = r?;
        skipped += s;
        for e in entries {
            fg[e.class_id].push(e);
        }
    }
    if skipped > 0 {
        log::warn!("foreground memory skipped {skipped} degenerate boxes");
    }
    Ok((fg, skipped))
}

pub fn build_background_memory(
    scenes: &[SceneSample],
    params: &DetectorParams,
) -> Result<Vec<BackgroundEntry>> {
    par::map(scenes, |s| -> Result<BackgroundEntry> {
        let fmap = extract_features(&s.image, params)?;
        let geoms: Vec<_> = s.boxes.iter().map(|b| b.geom()).collect();
        let h = background_forward(&fmap, &geoms, params)?;
        Ok(BackgroundEntry {
            bg: stored(h.g.row(0)),
            scene_uid: s.uid,
        })
    })
    .into_iter()
    .collect()
}

impl MemoryBank {
    pub fn build(scenes: &[SceneSample], params: &DetectorParams, step: u64) -> Result<(Self, BuildStats)> {
        let (fg, skipped) = build_foreground_memory(scenes, params)?;
        let bg = build_background_memory(scenes, params)?;
        let bank = Self {
            dim: params.embed_dim(),
            fg,
            bg,
            built_at: step,
            extractor_hash: params.content_hash(),
        };
        bank.check()?;
        let stats = BuildStats {
            fg_entries: bank.fg_len(),
            bg_entries: bank.bg.len(),
            skipped,
        };
        Ok((bank, stats))
    }

    pub fn classes(&self) -> usize {
        self.fg.len()
    }

    pub fn fg_len(&self) -> usize {
        self.fg.iter().map(Vec::len).sum()
    }

    pub fn class_entries(&self, class_id: usize) -> &[ForegroundEntry] {
        self.fg.get(class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn fg_entries(&self) -> impl Iterator<Item = &ForegroundEntry> {
        self.fg.iter().flatten()
    }

    pub fn fg_uids(&self) -> BTreeSet<(u64, u64)> {
        self.fg_entries().map(|e| (e.scene_uid, e.object_uid)).collect()
    }

    pub fn bg_uids(&self) -> Vec<u64> {
        self.bg.iter().map(|e| e.scene_uid).collect()
    }

    /// Verifies the partition, dimensions and uniqueness invariants.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (c, list) in self.fg.iter().enumerate() {
            for e in list {
                if e.class_id != c {
                    return Err(Error::Validation(format!(
                        "entry {} of class {} filed under class {c}",
                        e.object_uid, e.class_id
                    )));
                }
                if e.g.len() != self.dim || e.g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "entry {} has a malformed vector",
                        e.object_uid
                    )));
                }
                if !seen.insert((e.scene_uid, e.object_uid)) {
                    return Err(Error::Validation(format!(
                        "duplicate entry ({}, {})",
                        e.scene_uid, e.object_uid
                    )));
                }
            }
        }
        for e in &self.bg {
            if e.bg.len() != self.dim || e.bg.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "background entry {} has a malformed vector",
                    e.scene_uid
                )));
            }
        }
        Ok(())
    }

    /// Recomputes every entry with the current weights, keeping the uid set.
    /// Calls before `built_at + interval` leave the bank untouched.
    pub fn refresh(
        &mut self,
        scenes: &[SceneSample],
        params: &DetectorParams,
        current_step: u64,
        interval: u64,
    ) -> Result<RefreshStatus> {
        let due_at = self.built_at + interval;
        if current_step < due_at {
            return Ok(RefreshStatus::TooEarly { due_at });
        }
        let by_uid: BTreeMap<u64, &SceneSample> = scenes.iter().map(|s| (s.uid, s)).collect();
        let lookup = |uid: u64| {
            by_uid.get(&uid).copied().ok_or_else(|| {
                Error::Precondition(format!("scene {uid} is in the bank but not in the dataset"))
            })
        };

        let mut wanted: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for e in self.fg_entries() {
            wanted.entry(e.scene_uid).or_default().push(e.object_uid);
        }
        let fg_scenes: Vec<(u64, Vec<u64>)> = wanted.into_iter().collect();
        let recomputed = par::map(&fg_scenes, |(uid, objects)| -> Result<Vec<(u64, Vec<f64>)>> {
            let scene = lookup(*uid)?;
            let fmap = extract_features(&scene.image, params)?;
            objects
                .iter()
                .map(|o| {
                    let b = scene.boxes.iter().find(|b| b.object_uid == *o).ok_or_else(|| {
                        Error::Precondition(format!("object {o} missing from scene {uid}"))
                    })?;
                    let h = roi_forward(&fmap, &[b.geom()], params)?;
                    Ok((*o, stored(h.g.row(0))))
                })
                .collect()
        });
        let mut fresh: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in recomputed {
            fresh.extend(r?);
        }

        let bg_scenes: Vec<u64> = self.bg_uids();
        let bgs = par::map(&bg_scenes, |uid| -> Result<Vec<f64>> {
            let scene = lookup(*uid)?;
            let fmap = extract_features(&scene.image, params)?;
            let geoms: Vec<_> = scene.boxes.iter().map(|b| b.geom()).collect();
            Ok(stored(background_forward(&fmap, &geoms, params)?.g.row(0)))
        });

        // assemble the replacement fully before swapping it in
        let mut next = self.clone();
        for e in next.fg.iter_mut().flatten() {
            e.g = fresh.remove(&e.object_uid).expect("recomputed above");
        }
        for (e, v) in next.bg.iter_mut().zip(bgs) {
            e.bg = v?;
        }
        next.built_at = current_step;
        next.extractor_hash = params.content_hash();
        next.check()?;
        *self = next;
        Ok(RefreshStatus::Refreshed)
    }

    /// Per-class foreground and global background subsampling.
    pub fn subsample(
        &self,
        method: SubsampleMethod,
        keep_fg: f64,
        keep_bg: f64,
        rng: &mut RngStream,
    ) -> Result<MemoryBank> {
        let mut out = self.clone();
        if method == SubsampleMethod::None {
            return Ok(out);
        }
        for list in out.fg.iter_mut() {
            if list.is_empty() {
                continue;
            }
            *list = match method {
                SubsampleMethod::Coreset => subsample_coreset(list, keep_fg)?,
                _ => subsample_random(list, keep_fg, rng)?,
            };
        }
        if !out.bg.is_empty() {
            out.bg = match method {
                SubsampleMethod::Coreset => subsample_coreset(&out.bg, keep_bg)?,
                _ => subsample_random(&out.bg, keep_bg, rng)?,
            };
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleMethod {
    #[default]
    None,
    Coreset,
    Random,
}

impl std::str::FromStr for SubsampleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "coreset" => Ok(Self::Coreset),
            "random" => Ok(Self::Random),
            other => Err(Error::Argument(format!(
                "unknown subsample method {other:?} (expected none, coreset or random)"
            ))),
        }
    }
}

fn keep_count(n: usize, keep_ratio: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::Argument("cannot subsample an empty entry list".into()));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Argument(format!(
            "keep ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    Ok(((keep_ratio * n as f64).ceil() as usize).clamp(1, n))
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    l2_normalize(v).unwrap_or_else(|_| vec![0.0; v.len()])
}

/// k-center greedy in Euclidean space. Starts from the point nearest the
/// mean and returns indices in selection order; ties go to the lower index.
pub fn k_center_greedy(pts: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = pts.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let dim = pts[0].len();
    let mut mean = vec![0.0; dim];
    for p in pts {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let argmax = |score: &dyn Fn(usize) -> f64, skip: &[bool]| {
        let mut best: Option<(usize, f64)> = None;
        for (i, &skipped) in skip.iter().enumerate() {
            if skipped {
                continue;
            }
            let s = score(i);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    };
    let mut chosen = vec![false; n];
    let first = argmax(&|i| -squared_distance(&pts[i], &mean), &chosen).expect("n > 0");
    chosen[first] = true;
    let mut order = vec![first];
    let mut min_d: Vec<f64> = pts.iter().map(|p| squared_distance(p, &pts[first])).collect();
    while order.len() < k.min(n) {
        let next = argmax(&|i| min_d[i], &chosen).expect("unselected points remain");
        chosen[next] = true;
        order.push(next);
        for (d, p) in min_d.iter_mut().zip(pts) {
            *d = d.min(squared_distance(p, &pts[next]));
        }
    }
    order
}

/// Coreset of `ceil(keep_ratio·n)` entries chosen on L2-normalized vectors,
/// returned in original order.
pub fn subsample_coreset<T: MemoryEntry + Clone>(entries: &[T], keep_ratio: f64) -> Result<Vec<T>> {
    let k = keep_count(entries.len(), keep_ratio)?;
    let pts: Vec<Vec<f64>> = entries.iter().map(|e| normalized(e.vector())).collect();
    let mut idx = k_center_greedy(&pts, k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| entries[i].clone()).collect())
}

/// Uniform sample without replacement, returned in original order.
pub fn subsample_random<T: Clone>(entries: &[T], keep_ratio: f64, rng: &mut RngStream) -> Result<Vec<T>> {
    let k = keep_count(entries.len(), keep_ratio)?;
    let mut idx = rng.sample_indices(entries.len(), k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| entries[i].clone()).collect())
}

/// Largest distance from a dropped point to its nearest kept point.
pub fn covering_radius(pts: &[Vec<f64>], kept: &[usize]) -> f64 {
    let keep: BTreeSet<usize> = kept.iter().copied().collect();
    (0..pts.len())
        .filter(|i| !keep.contains(i))
        .map(|i| {
            kept.iter()
                .map(|&j| squared_distance(&pts[i], &pts[j]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgRecord {
    pub class_id: usize,
    pub scene_uid: u64,
    pub object_uid: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryHeader {
    pub schema: String,
    pub dim: usize,
    pub classes: usize,
    pub fg_count: usize,
    pub bg_count: usize,
    pub per_class_counts: Vec<usize>,
    pub built_at: u64,
    pub extractor_hash: String,
    /// Foreground records in blob order; background vectors follow them.
    pub fg: Vec<FgRecord>,
    pub bg_scene_uids: Vec<u64>,
    pub blob_sha256: String,
}

/// Writes `memory.json` and `memory.f32` (little-endian, header order).
pub fn save_memory(bank: &MemoryBank, dir: &Path) -> Result<MemoryHeader> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(4 * bank.dim * (bank.fg_len() + bank.bg.len()));
    for v in bank.fg_entries().map(|e| &e.g).chain(bank.bg.iter().map(|e| &e.bg)) {
        for x in v {
            blob.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let header = MemoryHeader {
        schema: MEMORY_SCHEMA.into(),
        dim: bank.dim,
        classes: bank.classes(),
        fg_count: bank.fg_len(),
        bg_count: bank.bg.len(),
        per_class_counts: bank.fg.iter().map(Vec::len).collect(),
        built_at: bank.built_at,
        extractor_hash: bank.extractor_hash.clone(),
        fg: bank
            .fg_entries()
            .map(|e| FgRecord {
                class_id: e.class_id,
                scene_uid: e.scene_uid,
                object_uid: e.object_uid,
            })
            .collect(),
        bg_scene_uids: bank.bg_uids(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let blob_path = dir.join("memory.f32");
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json_path = dir.join("memory.json");
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(header)
}

pub fn load_memory(dir: &Path) -> Result<MemoryBank> {
    let json_path = dir.join("memory.json");
    if !json_path.exists() {
        return Err(Error::NotFound(json_path));
    }
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: MemoryHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.schema != MEMORY_SCHEMA {
        return Err(Error::format(
            &json_path,
            format!("schema {:?}, expected {MEMORY_SCHEMA:?}", header.schema),
        ));
    }
    let blob_path = dir.join("memory.f32");
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
    if header.fg.len() != header.fg_count
        || header.bg_scene_uids.len() != header.bg_count
        || blob.len() != 4 * header.dim * (header.fg_count + header.bg_count)
    {
        return Err(Error::format(&json_path, "counts disagree with the blob size"));
    }
    let mut vectors = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect::<Vec<_>>()
        .into_iter();
    let mut take = || -> Vec<f64> { vectors.by_ref().take(header.dim).collect() };
    let mut fg = vec![Vec::new(); header.classes];
    for r in &header.fg {
        if r.class_id >= header.classes {
            return Err(Error::format(&json_path, format!("class {} out of range", r.class_id)));
        }
        fg[r.class_id].push(ForegroundEntry {
            g: take(),
            class_id: r.class_id,
            scene_uid: r.scene_uid,
            object_uid: r.object_uid,
        });
    }
    let bg = header
        .bg_scene_uids
        .iter()
        .map(|&scene_uid| BackgroundEntry {
            bg: take(),
            scene_uid,
        })
        .collect();
    let bank = MemoryBank {
        dim: header.dim,
        fg,
        bg,
        built_at: header.built_at,
        extractor_hash: header.extractor_hash,
    };
    bank.check()?;
    Ok(bank)
}
