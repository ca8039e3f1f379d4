//! Alignment partner selection over a memory bank: exact cosine argmax,
//! top-K, cross-class negatives, and provenance-driven strategy lookup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{BackgroundEntry, ForegroundEntry, MemoryBank, MemoryEntry};
use crate::numerics::{dot, norm, RngStream};
use crate::synthgen::{FamilyMember, ProvenanceIndex};

/// Cosine similarity in [−1, 1]; zero when either side vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Entries ranked by descending cosine to `query`, lowest uid first on ties.
fn ranked<'a, T: MemoryEntry>(query: &[f64], entries: &'a [T]) -> Vec<(&'a T, f64)> {
    let mut scored: Vec<(&T, f64)> = entries.iter().map(|e| (e, cosine(query, e.vector()))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.uid().cmp(&b.0.uid())));
    scored
}

fn best<'a, T: MemoryEntry>(query: &[f64], entries: &'a [T]) -> Option<(&'a T, f64)> {
    let mut out: Option<(&T, f64)> = None;
    for e in entries {
        let s = cosine(query, e.vector());
        let better = match out {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && e.uid() < b.uid()),
        };
        if better {
            out = Some((e, s));
        }
    }
    out
}

/// Most similar same-class source instance and its similarity.
pub fn retrieve_fg_positive<'a>(
    g_t: &[f64],
    class_id: usize,
    bank: &'a MemoryBank,
) -> Result<(&'a ForegroundEntry, f64)> {
    best(g_t, bank.class_entries(class_id)).ok_or(Error::ClassUnavailable(class_id))
}

pub fn retrieve_bg_positive<'a>(bg_t: &[f64], bank: &'a MemoryBank) -> Result<(&'a BackgroundEntry, f64)> {
    best(bg_t, &bank.bg).ok_or_else(|| Error::Precondition("background memory is empty".into()))
}

/// Up to `k` same-class entries by descending similarity.
pub fn retrieve_topk<'a>(
    g_t: &[f64],
    class_id: usize,
    bank: &'a MemoryBank,
    k: usize,
) -> Result<Vec<(&'a ForegroundEntry, f64)>> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let entries = bank.class_entries(class_id);
    if entries.is_empty() {
        return Err(Error::ClassUnavailable(class_id));
    }
    let mut r = ranked(g_t, entries);
    r.truncate(k);
    Ok(r)
}

/// Uniform draw over every entry whose class differs from `class_id`.
pub fn sample_negative<'a>(
    class_id: usize,
    bank: &'a MemoryBank,
    rng: &mut RngStream,
) -> Result<&'a ForegroundEntry> {
    let total: usize = (0..bank.classes())
        .filter(|&c| c != class_id)
        .map(|c| bank.class_entries(c).len())
        .sum();
    if total == 0 {
        return Err(Error::NegativeUnavailable(class_id));
    }
    let mut i = rng.index(total);
    for c in (0..bank.classes()).filter(|&c| c != class_id) {
        let list = bank.class_entries(c);
        if i < list.len() {
            return Ok(&list[i]);
        }
        i -= list.len();
    }
    unreachable!("index drawn below the total")
}

/// `m` independent negative draws; empty when no other class exists.
pub fn sample_negatives(
    class_id: usize,
    bank: &MemoryBank,
    rng: &mut RngStream,
    m: usize,
) -> Vec<Vec<f64>> {
    (0..m)
        .map_while(|_| sample_negative(class_id, bank, rng).ok().map(|e| e.g.clone()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DomainOnly,
    Color,
    Rotation,
    ColorRotation,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::DomainOnly,
        Strategy::Color,
        Strategy::Rotation,
        Strategy::ColorRotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DomainOnly => "domain_only",
            Strategy::Color => "color",
            Strategy::Rotation => "rotation",
            Strategy::ColorRotation => "color_rotation",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy {s:?}")))
    }
}

/// Resolves a target object to a family member's object uid: the exact
/// counterpart for domain-only, otherwise the member carrying exactly the
/// named transform(s).
pub fn resolve_strategy(target_object_uid: u64, index: &ProvenanceIndex, mode: Strategy) -> Result<u64> {
    let record = index.counterpart(target_object_uid).ok_or_else(|| {
        Error::Provenance(format!("target object {target_object_uid} has no source counterpart"))
    })?;
    Ok(match mode {
        Strategy::DomainOnly => record.family[record.member as usize],
        Strategy::Color => record.family[FamilyMember::Color as usize],
        Strategy::Rotation => record.family[FamilyMember::Rotation as usize],
        Strategy::ColorRotation => record.family[FamilyMember::ColorRotation as usize],
    })
}

pub fn retrieve_by_strategy<'a>(
    target_object_uid: u64,
    index: &ProvenanceIndex,
    bank: &'a MemoryBank,
    mode: Strategy,
) -> Result<&'a ForegroundEntry> {
    let uid = resolve_strategy(target_object_uid, index, mode)?;
    bank.fg_entries().find(|e| e.object_uid == uid).ok_or_else(|| {
        Error::Provenance(format!(
            "resolved sibling {uid} for target object {target_object_uid} is not in the bank"
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub target: Vec<f64>,
    pub positive: Vec<f64>,
    /// `M` negatives; empty falls back to positive-only attraction.
    pub negatives: Vec<Vec<f64>>,
    /// `cosine(target, positive)`.
    pub w: f64,
    pub positive_uid: u64,
    pub tag: String,
}

impl AlignmentPair {
    pub fn new(target: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, positive_uid: u64, tag: &str) -> Self {
        let w = cosine(&target, &positive);
        Self {
            target,
            positive,
            negatives,
            w,
            positive_uid,
            tag: tag.to_string(),
        }
    }
}
