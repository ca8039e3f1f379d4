use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{SubsampleMethod, DEFAULT_REFRESH_EPOCHS};
use crate::retrieval::Strategy;

/// How target instances find their alignment partners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlignmentMode {
    /// Most similar same-class entries from the foreground memory.
    MemorySimilar,
    /// Most similar same-class source instance of the current mini-batch.
    BatchC2c,
    /// Most similar source instance of the mini-batch, any class.
    CategoryAgnostic,
    /// Running per-class mean of source features.
    Prototype,
    /// Oracle partner chosen through the provenance graph.
    Provenance(Strategy),
}

impl AlignmentMode {
    pub const BASIC: [AlignmentMode; 4] = [
        AlignmentMode::MemorySimilar,
        AlignmentMode::BatchC2c,
        AlignmentMode::CategoryAgnostic,
        AlignmentMode::Prototype,
    ];

    pub fn uses_memory(self) -> bool {
        matches!(self, AlignmentMode::MemorySimilar | AlignmentMode::Provenance(_))
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentMode::MemorySimilar => f.write_str("memory_similar"),
            AlignmentMode::BatchC2c => f.write_str("batch_c2c"),
            AlignmentMode::CategoryAgnostic => f.write_str("category_agnostic"),
            AlignmentMode::Prototype => f.write_str("prototype"),
            AlignmentMode::Provenance(s) => write!(f, "provenance:{}", s.name()),
        }
    }
}

impl FromStr for AlignmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("provenance:") {
            return Ok(AlignmentMode::Provenance(rest.parse()?));
        }
        AlignmentMode::BASIC
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown alignment mode {s:?}; expected memory_similar, batch_c2c, \
                     category_agnostic, prototype or provenance:<strategy>"
                ))
            })
    }
}

impl TryFrom<String> for AlignmentMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlignmentMode> for String {
    fn from(m: AlignmentMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub delta: f64,
    pub alpha: f64,
    pub top_k: usize,
    /// Negatives per foreground pair.
    pub negatives: usize,
    pub lr: f64,
    /// Learning rate of the adaptation phase; `None` reuses `lr`.
    pub adapt_lr: Option<f64>,
    pub momentum: f64,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub refresh_interval: u64,
    pub subsample: SubsampleMethod,
    pub keep_fg: f64,
    pub keep_bg: f64,
    pub mode: AlignmentMode,
    pub fg_enabled: bool,
    /// Feed both alignment losses unit-length embeddings, so the margin and
    /// the discriminator see directions only.
    pub unit_sphere: bool,
    pub bg_enabled: bool,
    pub seed: u64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Sampled background anchors per positive anchor.
    pub neg_ratio: usize,
    pub prototype_decay: f64,
    /// Score threshold used when evaluating.
    pub eval_delta: f64,
    /// Evaluate on the target split every this many epochs (and always after
    /// the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
            lambda3: 0.05,
            delta: 0.8,
            alpha: 1.5,
            top_k: 1,
            negatives: 1,
            lr: 0.01,
            adapt_lr: None,
            momentum: 0.9,
            pretrain_epochs: 30,
            adapt_epochs: 30,
            refresh_interval: DEFAULT_REFRESH_EPOCHS,
            subsample: SubsampleMethod::None,
            keep_fg: 0.5,
            keep_bg: 0.3,
            mode: AlignmentMode::MemorySimilar,
            fg_enabled: true,
            unit_sphere: true,
            bg_enabled: true,
            seed: 0,
            batch_source: 2,
            batch_target: 2,
            neg_ratio: 3,
            prototype_decay: 0.99,
            eval_delta: 0.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("adapt_lr", self.adapt_lr.unwrap_or(0.0)),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("delta", self.delta),
            ("keep_fg", self.keep_fg),
            ("keep_bg", self.keep_bg),
            ("eval_delta", self.eval_delta),
            ("prototype_decay", self.prototype_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.top_k == 0 {
            problems.push("top_k must be at least 1".into());
        }
        if self.refresh_interval == 0 {
            problems.push("refresh_interval must be at least 1".into());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be at least 1".into());
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            problems.push("batch_source and batch_target must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn adapt_lr(&self) -> f64 {
        self.adapt_lr.unwrap_or(self.lr)
    }

    /// Effective foreground weight; zero when the loss is switched off.
    pub fn fg_weight(&self) -> f64 {
        if self.fg_enabled {
            self.lambda2
        } else {
            0.0
        }
    }

    pub fn bg_weight(&self) -> f64 {
        if self.bg_enabled {
            self.lambda3
        } else {
            0.0
        }
    }
}
