use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use pairalign::detector::{load_detector, save_detector, save_discriminator, DetectorParams};
use pairalign::eval::EvalReport;
use pairalign::memory::{load_memory, save_memory, MemoryBank};
use pairalign::numerics::{Concern, RngStream};
use pairalign::par;
use pairalign::synthgen::{generate_benchmark, load_dataset, save_dataset, Dataset};
use pairalign::trainer::{
    adapt, evaluate_detector, memory_scenes, pretrain_source, run_ablation, AblationTable, AlignmentMode,
    MetricsTrace, Suite,
};

use crate::config::ExperimentConfig;
use crate::record::{write_file, ExperimentRecord, OutputDir};
use crate::svg::{bar_chart, line_chart, Series};
use crate::{Cli, Command, FormatArg, Invalid, SplitArg};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 && !par::configure_threads(cli.threads) {
        log::warn!("--threads {} ignored: the thread pool is already set up or unavailable", cli.threads);
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.train.seed = cli.seed;
    let out_path = cli
        .out
        .as_ref()
        .ok_or_else(|| Invalid("--out is required".into()))?;
    let started = Instant::now();
    match &cli.command {
        Command::GenData { scenes, classes, fog } => {
            if let Some(n) = scenes {
                config.synth.scenes = *n;
            }
            if let Some(c) = classes {
                config.synth.classes = *c;
                config.detector.classes = *c;
            }
            if let Some(f) = fog {
                config.synth.fog_intensity = *f;
            }
            config.validate()?;
            let out = OutputDir::claim(out_path, cli.force)?;
            gen_data(&config, cli.seed, &out.path, started)
        }
        Command::Pretrain { data } => {
            config.validate()?;
            let data = open_dataset(data, &config)?;
            let out = OutputDir::claim(out_path, cli.force)?;
            pretrain(&config, &data, &out.path, started)
        }
        Command::BuildMemory { data, model, mode } => {
            if let Some(m) = mode {
                config.train.mode = parse_mode(m)?;
            }
            config.validate()?;
            let data = open_dataset(data, &config)?;
            let params = open_model(model)?;
            let out = OutputDir::claim(out_path, cli.force)?;
            build_memory(&config, &data, &params, &out.path, started)
        }
        Command::Subsample {
            memory,
            method,
            keep_fg,
            keep_bg,
        } => {
            config.train.subsample = (*method).into();
            config.train.keep_fg = *keep_fg;
            config.train.keep_bg = *keep_bg;
            config.validate()?;
            let bank = open_memory(memory)?;
            let out = OutputDir::claim(out_path, cli.force)?;
            subsample(&config, &bank, &out.path, started)
        }
        Command::Adapt {
            data,
            model,
            memory,
            mode,
        } => {
            if let Some(m) = mode {
                config.train.mode = parse_mode(m)?;
            }
            config.validate()?;
            let data = open_dataset(data, &config)?;
            let params = open_model(model)?;
            let bank = memory.as_deref().map(open_memory).transpose()?;
            let out = OutputDir::claim(out_path, cli.force)?;
            run_adapt(&config, &data, &params, bank.as_ref(), &out.path, started)
        }
        Command::Eval {
            data,
            model,
            split,
            delta,
        } => {
            if let Some(d) = delta {
                config.train.eval_delta = *d;
            }
            config.validate()?;
            let data = open_dataset(data, &config)?;
            let params = open_model(model)?;
            let out = OutputDir::claim(out_path, cli.force)?;
            eval(&config, &data, &params, *split, &out.path, started)
        }
        Command::Ablate { suite, seeds } => {
            let suite: Suite = suite.parse()?;
            if *seeds == 0 {
                return Err(Invalid("--seeds must be at least 1".into()).into());
            }
            config.validate()?;
            let out = OutputDir::claim(out_path, cli.force)?;
            ablate(&config, suite, cli.seed, *seeds, &out.path, started)
        }
        Command::Report { inputs, format } => {
            let records = inputs
                .iter()
                .map(|p| ExperimentRecord::load_verified(p))
                .collect::<Result<Vec<_>>>()?;
            let out = OutputDir::claim(out_path, cli.force)?;
            report(&config, &records, *format, &out.path, started)
        }
    }
}

fn parse_mode(s: &str) -> Result<AlignmentMode> {
    Ok(s.parse()?)
}

fn open_dataset(dir: &Path, config: &ExperimentConfig) -> Result<Dataset> {
    let data = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.config.classes != config.detector.classes {
        return Err(Invalid(format!(
            "dataset {} has {} classes but the detector config expects {}",
            dir.display(),
            data.config.classes,
            config.detector.classes
        ))
        .into());
    }
    Ok(data)
}

fn open_model(dir: &Path) -> Result<DetectorParams> {
    load_detector(dir).with_context(|| format!("loading model {}", dir.display()))
}

fn open_memory(dir: &Path) -> Result<MemoryBank> {
    load_memory(dir).with_context(|| format!("loading memory {}", dir.display()))
}

fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializes");
    v.push(b'\n');
    v
}

fn gen_data(config: &ExperimentConfig, seed: u64, out: &Path, started: Instant) -> Result<()> {
    let scenes = out.join("scenes");
    if scenes.exists() {
        fs::remove_dir_all(&scenes).with_context(|| format!("clearing {}", scenes.display()))?;
    }
    let data = generate_benchmark(&config.synth, seed)?;
    let manifest = save_dataset(&data, out)?;
    println!(
        "{} source, {} target, {} sibling scenes; {} source boxes",
        manifest.counts.source, manifest.counts.target, manifest.counts.sibling, manifest.counts.source_boxes
    );
    ExperimentRecord::new("gen-data", config, seed).finish(
        out,
        &["manifest.json", "provenance.json"],
        started.elapsed(),
    )?;
    Ok(())
}

fn pretrain(config: &ExperimentConfig, data: &Dataset, out: &Path, started: Instant) -> Result<()> {
    let (params, trace) = pretrain_source(&data.source, &config.detector, &config.train)?;
    let report = evaluate_detector(&data.source, &params, config.train.eval_delta)?;
    save_detector(&params, out)?;
    write_file(out, "metrics.csv", trace.to_csv().as_bytes())?;
    write_file(out, "report.json", &json(&report))?;
    println!("source mAP {:.4} accuracy {:.4}", report.map, report.accuracy);
    let mut rec = ExperimentRecord::new("pretrain", config, config.train.seed);
    rec.trace = Some(trace);
    rec.report = Some(report);
    rec.finish(
        out,
        &["model.json", "model.f64", "metrics.csv", "report.json"],
        started.elapsed(),
    )?;
    Ok(())
}

fn build_memory(
    config: &ExperimentConfig,
    data: &Dataset,
    params: &DetectorParams,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let scenes = memory_scenes(data, config.train.mode);
    let (bank, stats) = MemoryBank::build(&scenes, params, 0)?;
    save_memory(&bank, out)?;
    println!(
        "{} foreground entries, {} background entries, {} boxes skipped",
        stats.fg_entries, stats.bg_entries, stats.skipped
    );
    ExperimentRecord::new("build-memory", config, config.train.seed).finish(
        out,
        &["memory.json", "memory.f32"],
        started.elapsed(),
    )?;
    Ok(())
}

fn subsample(config: &ExperimentConfig, bank: &MemoryBank, out: &Path, started: Instant) -> Result<()> {
    let t = &config.train;
    let mut rng = RngStream::for_concern(t.seed, Concern::Subsample, 0);
    let reduced = bank.subsample(t.subsample, t.keep_fg, t.keep_bg, &mut rng)?;
    save_memory(&reduced, out)?;
    println!(
        "kept {}/{} foreground and {}/{} background entries",
        reduced.fg_len(),
        bank.fg_len(),
        reduced.bg.len(),
        bank.bg.len()
    );
    ExperimentRecord::new("subsample", config, t.seed).finish(
        out,
        &["memory.json", "memory.f32"],
        started.elapsed(),
    )?;
    Ok(())
}

fn run_adapt(
    config: &ExperimentConfig,
    data: &Dataset,
    params: &DetectorParams,
    bank: Option<&MemoryBank>,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let outcome = adapt(data, params, bank, &config.train)?;
    save_detector(&outcome.params, out)?;
    save_discriminator(&outcome.discriminator, out)?;
    let mut files = vec!["model.json", "model.f64", "discriminator.json", "discriminator.f64"];
    if let Some(m) = &outcome.memory {
        save_memory(m, out)?;
        files.extend(["memory.json", "memory.f32"]);
    }
    write_file(out, "metrics.csv", outcome.trace.to_csv().as_bytes())?;
    write_file(out, "report.json", &json(&outcome.report))?;
    files.extend(["metrics.csv", "report.json"]);
    println!(
        "target mAP {:.4} accuracy {:.4}",
        outcome.report.map, outcome.report.accuracy
    );
    let mut rec = ExperimentRecord::new("adapt", config, config.train.seed);
    rec.trace = Some(outcome.trace);
    rec.report = Some(outcome.report);
    rec.finish(out, &files, started.elapsed())?;
    Ok(())
}

fn report_csv(split: &str, r: &EvalReport) -> String {
    let mut head = vec!["split", "map", "accuracy", "tp", "fp", "fn", "gt"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    head.extend((0..r.per_class_ap.len()).map(|c| format!("ap_{c}")));
    let mut row = vec![
        split.to_string(),
        r.map.to_string(),
        r.accuracy.to_string(),
        r.tp.to_string(),
        r.fp.to_string(),
        r.fn_.to_string(),
        r.gt.to_string(),
    ];
    row.extend(r.per_class_ap.iter().map(|ap| ap.map(|v| v.to_string()).unwrap_or_default()));
    format!("{}\n{}\n", head.join(","), row.join(","))
}

fn eval(
    config: &ExperimentConfig,
    data: &Dataset,
    params: &DetectorParams,
    split: SplitArg,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let (name, scenes) = match split {
        SplitArg::Source => ("source", &data.source),
        SplitArg::Target => ("target", &data.target),
    };
    let report = evaluate_detector(scenes, params, config.train.eval_delta)?;
    write_file(out, "report.json", &json(&report))?;
    write_file(out, "report.csv", report_csv(name, &report).as_bytes())?;
    println!("{name} mAP {:.4} accuracy {:.4}", report.map, report.accuracy);
    let mut rec = ExperimentRecord::new("eval", config, config.train.seed);
    rec.report = Some(report);
    rec.finish(out, &["report.json", "report.csv"], started.elapsed())?;
    Ok(())
}

fn ablate(
    config: &ExperimentConfig,
    suite: Suite,
    first_seed: u64,
    count: u64,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let seeds: Vec<u64> = (first_seed..first_seed + count).collect();
    let table = run_ablation(suite, &config.train, &config.synth, &config.detector, &seeds)?;
    write_file(out, "ablation.json", &json(&table))?;
    write_file(out, "ablation.csv", table.to_csv().as_bytes())?;
    for r in &table.rows {
        println!(
            "{:<20} mAP {:.4} ± {:.4}  accuracy {:.4} ± {:.4}  n={}",
            r.cell, r.map_mean, r.map_sd, r.accuracy_mean, r.accuracy_sd, r.n
        );
    }
    let mut rec = ExperimentRecord::new("ablate", config, first_seed);
    rec.ablation = Some(table);
    rec.finish(out, &["ablation.json", "ablation.csv"], started.elapsed())?;
    Ok(())
}

fn ablation_svg(table: &AblationTable) -> String {
    let cats: Vec<String> = table.rows.iter().map(|r| r.cell.clone()).collect();
    let series = vec![
        Series {
            name: "mAP".into(),
            values: table.rows.iter().map(|r| r.map_mean).collect(),
            errors: table.rows.iter().map(|r| r.map_sd).collect(),
        },
        Series {
            name: "accuracy".into(),
            values: table.rows.iter().map(|r| r.accuracy_mean).collect(),
            errors: table.rows.iter().map(|r| r.accuracy_sd).collect(),
        },
    ];
    let title = format!("{} (mean ± sd over seeds)", table.suite);
    if table.suite.ends_with("_sweep") {
        line_chart(&title, "score", &cats, &series)
    } else {
        bar_chart(&title, "score", &cats, &series)
    }
}

fn trace_svg(title: &str, trace: &MetricsTrace) -> String {
    let cats: Vec<String> = trace
        .records
        .iter()
        .map(|r| format!("{:?} {}", r.phase, r.epoch).to_lowercase())
        .collect();
    let nan = f64::NAN;
    let series = vec![
        Series {
            name: "mAP".into(),
            values: trace.records.iter().map(|r| r.map.unwrap_or(nan)).collect(),
            errors: Vec::new(),
        },
        Series {
            name: "accuracy".into(),
            values: trace.records.iter().map(|r| r.accuracy.unwrap_or(nan)).collect(),
            errors: Vec::new(),
        },
        Series {
            name: "total loss".into(),
            values: trace.records.iter().map(|r| r.losses.total).collect(),
            errors: Vec::new(),
        },
    ];
    line_chart(title, "value", &cats, &series)
}

fn report(
    config: &ExperimentConfig,
    records: &[(ExperimentRecord, PathBuf)],
    format: FormatArg,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let mut files = Vec::new();
    for (i, (rec, dir)) in records.iter().enumerate() {
        let stem = format!("{i:02}_{}", rec.command);
        let title = format!("{} ({})", rec.command, dir.display());
        let mut emit = |name: String, body: String| -> Result<()> {
            write_file(out, &name, body.as_bytes())?;
            files.push(name);
            Ok(())
        };
        match format {
            FormatArg::Csv => {
                if let Some(t) = &rec.ablation {
                    emit(format!("{stem}_ablation.csv"), t.to_csv())?;
                }
                if let Some(t) = &rec.trace {
                    emit(format!("{stem}_metrics.csv"), t.to_csv())?;
                }
                if let Some(r) = &rec.report {
                    emit(format!("{stem}_report.csv"), report_csv(&rec.command, r))?;
                }
            }
            FormatArg::Svg => {
                if let Some(t) = &rec.ablation {
                    emit(format!("{stem}_ablation.svg"), ablation_svg(t))?;
                }
                if let Some(t) = &rec.trace {
                    emit(format!("{stem}_trace.svg"), trace_svg(&title, t))?;
                }
            }
        }
    }
    if files.is_empty() {
        return Err(Invalid("none of the records holds a trace, report or ablation table".into()).into());
    }
    for f in &files {
        println!("{}", out.join(f).display());
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    ExperimentRecord::new("report", config, config.train.seed).finish(out, &names, started.elapsed())?;
    Ok(())
}
