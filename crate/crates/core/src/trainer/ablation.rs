use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::memory::{MemoryBank, SubsampleMethod};
use crate::retrieval::Strategy;
use crate::synthgen::{generate_benchmark, Dataset, SynthConfig};

use super::{adapt, evaluate_detector, memory_scenes, pretrain_source, AlignmentMode, MetricsTrace, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Strategies,
    MemoryVsBatch,
    FgBg,
    Subsampling,
    DeltaSweep,
    KSweep,
    Lambda2Sweep,
    Lambda3Sweep,
}

pub const DELTA_GRID: [f64; 5] = [0.0, 0.4, 0.6, 0.8, 0.9];
pub const K_GRID: [usize; 3] = [1, 10, 30];
pub const LAMBDA2_GRID: [f64; 4] = [0.0, 0.01, 0.05, 0.1];
pub const LAMBDA3_GRID: [f64; 5] = [0.0, 0.001, 0.01, 0.05, 0.1];

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Strategies,
        Suite::MemoryVsBatch,
        Suite::FgBg,
        Suite::Subsampling,
        Suite::DeltaSweep,
        Suite::KSweep,
        Suite::Lambda2Sweep,
        Suite::Lambda3Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Strategies => "strategies",
            Suite::MemoryVsBatch => "memory_vs_batch",
            Suite::FgBg => "fg_bg",
            Suite::Subsampling => "subsampling",
            Suite::DeltaSweep => "delta_sweep",
            Suite::KSweep => "k_sweep",
            Suite::Lambda2Sweep => "lambda2_sweep",
            Suite::Lambda3Sweep => "lambda3_sweep",
        }
    }

    /// Labelled configurations derived from `base`.
    ///
    /// The strategy and memory-versus-batch suites compare foreground
    /// partners only, so background alignment is off there.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let fg_only = TrainConfig {
            bg_enabled: false,
            ..base.clone()
        };
        match self {
            Suite::Strategies => Strategy::ALL
                .iter()
                .map(|&s| {
                    let mode = AlignmentMode::Provenance(s);
                    (s.name().to_string(), TrainConfig { mode, ..fg_only.clone() })
                })
                .collect(),
            Suite::MemoryVsBatch => AlignmentMode::BASIC
                .iter()
                .map(|&mode| (mode.to_string(), TrainConfig { mode, ..fg_only.clone() }))
                .collect(),
            Suite::FgBg => vec![
                ("fg_only".into(), fg_only.clone()),
                (
                    "bg_only".into(),
                    TrainConfig {
                        fg_enabled: false,
                        ..base.clone()
                    },
                ),
                ("fg_bg".into(), base.clone()),
            ],
            Suite::Subsampling => [
                ("full", SubsampleMethod::None),
                ("coreset", SubsampleMethod::Coreset),
                ("random", SubsampleMethod::Random),
            ]
            .into_iter()
            .map(|(label, subsample)| (label.to_string(), TrainConfig { subsample, ..base.clone() }))
            .collect(),
            Suite::DeltaSweep => DELTA_GRID
                .iter()
                .map(|&delta| (format!("delta={delta}"), TrainConfig { delta, ..base.clone() }))
                .collect(),
            Suite::KSweep => K_GRID
                .iter()
                .map(|&top_k| (format!("k={top_k}"), TrainConfig { top_k, ..base.clone() }))
                .collect(),
            Suite::Lambda2Sweep => LAMBDA2_GRID
                .iter()
                .map(|&lambda2| (format!("lambda2={lambda2}"), TrainConfig { lambda2, ..base.clone() }))
                .collect(),
            Suite::Lambda3Sweep => LAMBDA3_GRID
                .iter()
                .map(|&lambda3| (format!("lambda3={lambda3}"), TrainConfig { lambda3, ..base.clone() }))
                .collect(),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::Argument(format!("unknown suite {s:?}; valid suites: {}", valid.join(", ")))
        })
    }
}

/// Per-seed artifacts shared by every cell: the benchmark, the pretrained
/// detector, its target baseline, and the full memory banks.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub data: Dataset,
    pub pretrained: DetectorParams,
    pub pretrain_trace: MetricsTrace,
    /// Target-split report of the pretrained detector.
    pub baseline: EvalReport,
    source_bank: Option<MemoryBank>,
    family_bank: Option<MemoryBank>,
}

impl SeedContext {
    fn bank_for(&mut self, mode: AlignmentMode) -> Result<&MemoryBank> {
        let slot = match mode {
            AlignmentMode::Provenance(_) => &mut self.family_bank,
            _ => &mut self.source_bank,
        };
        if slot.is_none() {
            let scenes = memory_scenes(&self.data, mode);
            *slot = Some(MemoryBank::build(&scenes, &self.pretrained, 0)?.0);
        }
        Ok(slot.as_ref().expect("filled above"))
    }
}

pub fn prepare_seed(
    synth: &SynthConfig,
    detector: &DetectorConfig,
    base: &TrainConfig,
    seed: u64,
) -> Result<SeedContext> {
    let data = generate_benchmark(synth, seed)?;
    let config = TrainConfig { seed, ..base.clone() };
    let (pretrained, pretrain_trace) = pretrain_source(&data.source, detector, &config)?;
    let baseline = evaluate_detector(&data.target, &pretrained, config.eval_delta)?;
    Ok(SeedContext {
        seed,
        data,
        pretrained,
        pretrain_trace,
        baseline,
        source_bank: None,
        family_bank: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub map: f64,
    pub accuracy: f64,
    pub trace: MetricsTrace,
}

/// Adapts the context's pretrained detector under `config` (its seed is
/// replaced by the context's).
pub fn run_cell(ctx: &mut SeedContext, config: &TrainConfig) -> Result<CellResult> {
    let config = TrainConfig {
        seed: ctx.seed,
        ..config.clone()
    };
    let memory = if config.mode.uses_memory() {
        Some(ctx.bank_for(config.mode)?.clone())
    } else {
        None
    };
    let out = adapt(&ctx.data, &ctx.pretrained, memory.as_ref(), &config)?;
    Ok(CellResult {
        seed: ctx.seed,
        map: out.report.map,
        accuracy: out.report.accuracy,
        trace: out.trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub map: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub n: usize,
    pub map_mean: f64,
    pub map_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub per_seed: Vec<SeedMetric>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "suite",
    "cell",
    "n",
    "map_mean",
    "map_sd",
    "accuracy_mean",
    "accuracy_sd",
    "failures",
];

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// Mean, sample sd and seed count per cell in [`ABLATION_COLUMNS`] order.
    pub fn to_csv(&self) -> String {
        let mut out = ABLATION_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.suite,
                r.cell,
                r.n,
                r.map_mean,
                r.map_sd,
                r.accuracy_mean,
                r.accuracy_sd,
                r.failures.len()
            ));
        }
        out
    }
}

/// Mean and sample standard deviation (zero below two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(cell: String, per_seed: Vec<SeedMetric>, failures: Vec<String>) -> AblationRow {
    let (map_mean, map_sd) = mean_sd(&per_seed.iter().map(|m| m.map).collect::<Vec<_>>());
    let (accuracy_mean, accuracy_sd) = mean_sd(&per_seed.iter().map(|m| m.accuracy).collect::<Vec<_>>());
    AblationRow {
        cell,
        n: per_seed.len(),
        map_mean,
        map_sd,
        accuracy_mean,
        accuracy_sd,
        per_seed,
        failures,
    }
}

/// Runs every cell of `suite` on prepared contexts. A failing cell is
/// recorded in its row and the suite continues.
pub fn run_suite_on(contexts: &mut [SeedContext], suite: Suite, base: &TrainConfig) -> AblationTable {
    let rows = suite
        .cells(base)
        .into_iter()
        .map(|(label, config)| {
            let mut per_seed = Vec::new();
            let mut failures = Vec::new();
            for ctx in contexts.iter_mut() {
                match run_cell(ctx, &config) {
                    Ok(r) => per_seed.push(SeedMetric {
                        seed: r.seed,
                        map: r.map,
                        accuracy: r.accuracy,
                    }),
                    Err(e) => {
                        log::warn!("{suite}/{label} seed {} failed: {e}", ctx.seed);
                        failures.push(format!("seed {}: {e}", ctx.seed));
                    }
                }
            }
            summarize(label, per_seed, failures)
        })
        .collect();
    AblationTable {
        suite: suite.name().to_string(),
        rows,
    }
}

/// Prepares one context per seed and runs `suite` over them.
pub fn run_ablation(
    suite: Suite,
    base: &TrainConfig,
    synth: &SynthConfig,
    detector: &DetectorConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let mut contexts = Vec::new();
    let mut lost = Vec::new();
    for &seed in seeds {
        match prepare_seed(synth, detector, base, seed) {
            Ok(c) => contexts.push(c),
            Err(e) => {
                log::warn!("seed {seed} preparation failed: {e}");
                lost.push(format!("seed {seed}: {e}"));
            }
        }
    }
    let mut table = run_suite_on(&mut contexts, suite, base);
    for row in &mut table.rows {
        row.failures.extend(lost.iter().cloned());
    }
    Ok(table)
}
