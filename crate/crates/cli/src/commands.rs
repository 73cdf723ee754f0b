use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lionrank::checkpoint::Checkpoint;
use lionrank::ir_eval::{self, EvalOptions, Gain, MetricReport, METRIC_NAMES};
use lionrank::model::{CrossEncoder, Vocab};
use lionrank::optim::OptimizerKind;
use lionrank::synth::{self, SynthConfig};
use lionrank::train::{self, format_loss_log, parse_triplets, triplets_to_pairs, ResourceStats};
use serde::Serialize;

use crate::config::{synthetic_config_toml, Overrides, RunConfig};
use crate::error::{CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Artifact {
    kind: &'static str,
    path: String,
}

#[derive(Debug, Serialize)]
struct Manifest<C: Serialize> {
    format_version: u32,
    command: &'static str,
    seed: Option<u64>,
    config: C,
    created_unix: u64,
    artifacts: Vec<Artifact>,
}

/// Writes files into one directory and records each in a manifest.
struct ArtifactDir {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, kind: &'static str, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_file(&path, contents)?;
        self.artifacts.push(Artifact {
            kind,
            path: name.into(),
        });
        Ok(path)
    }

    fn finish<C: Serialize>(mut self, command: &'static str, seed: Option<u64>, config: C) -> Result<PathBuf> {
        self.artifacts.push(Artifact {
            kind: "manifest",
            path: MANIFEST_FILE.into(),
        });
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            command,
            seed,
            config,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            artifacts: self.artifacts,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_file(&path, &(json + "\n"))?;
        Ok(path)
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

struct TrainedRun {
    kind: OptimizerKind,
    resources: ResourceStats,
}

fn train_all(cfg: &RunConfig, kinds: &[OptimizerKind], out: &Path) -> Result<Vec<TrainedRun>> {
    let triplets = parse_triplets(&read_file(&cfg.data.triplets)?)
        .map_err(|e| CliError::Parse(format!("{}: {e}", cfg.data.triplets.display())))?;
    let (pairs, skipped) = triplets_to_pairs(&triplets);
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} malformed triplet(s)");
    }
    let vocab = Vocab::from_texts(pairs.iter().flat_map(|p| [p.query.as_str(), p.passage.as_str()]));

    let mut runs = Vec::new();
    for &kind in kinds {
        let tc = cfg.train_config(kind);
        let model = CrossEncoder::new(cfg.model_config(vocab.len()))?;
        log::info!(
            "training {} ({} params, {} pairs)",
            tc.checkpoint_name(0),
            model.param_count(),
            pairs.len()
        );
        let outcome = train::run_training(model, &vocab, &pairs, &tc)?;

        let mut dir = ArtifactDir::create(&out.join(format!("{}-{kind}", tc.run_name)))?;
        for ck in &outcome.checkpoints {
            dir.write("checkpoint", &format!("{}.ckpt", ck.name), &ck.to_text())?;
        }
        dir.write("loss_log", "loss.tsv", &format_loss_log(&outcome.loss_log))?;
        dir.write("resources", "resources.txt", &outcome.resources.to_report(kind))?;
        let manifest = dir.finish("train", Some(tc.seed), &tc)?;
        println!(
            "{kind}: final epoch mean BCE {:.6}; manifest {}",
            outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
            manifest.display()
        );
        runs.push(TrainedRun {
            kind,
            resources: outcome.resources,
        });
    }
    Ok(runs)
}

pub fn train(config: &Path, overrides: &Overrides, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides);
    train_all(&cfg, &cfg.optimizers(), out)?;
    Ok(())
}

pub fn rerank(
    checkpoint: &Path,
    queries: &Path,
    passages: &Path,
    candidates: &Path,
    output: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::from_text(&read_file(checkpoint)?)
        .map_err(|e| CliError::Parse(format!("{}: {e}", checkpoint.display())))?;
    let queries = ir_eval::parse_id_text(&read_file(queries)?, "queries")?;
    let passages = ir_eval::parse_id_text(&read_file(passages)?, "passages")?;
    let cands = ir_eval::parse_run(&read_file(candidates)?)?;
    let run = ir_eval::rerank(&ck, &queries, &passages, &cands, &ck.name)?;
    let path = output.map_or_else(|| out.join(format!("{}.run", ck.name)), Path::to_path_buf);
    write_file(&path, &ir_eval::format_run(&run))?;
    println!("wrote {} lines to {}", run.len(), path.display());
    Ok(())
}

pub fn eval(run: &Path, qrels: &Path, k: usize, binarize_at: u32, gain: Gain, out: &Path) -> Result<()> {
    if k == 0 {
        return Err(CliError::Config("--k must be ≥ 1".into()));
    }
    if binarize_at == 0 {
        return Err(CliError::Config("--binarize-at must be ≥ 1".into()));
    }
    let entries = ir_eval::parse_run(&read_file(run)?)?;
    let judgments = ir_eval::parse_qrels(&read_file(qrels)?)?;
    if judgments.duplicates > 0 {
        eprintln!(
            "warning: {} duplicate qrels line(s); last value kept",
            judgments.duplicates
        );
    }
    let opts = EvalOptions { k, binarize_at, gain };
    let report = ir_eval::evaluate(&entries, &judgments, &opts);
    if report.skipped_queries > 0 {
        eprintln!("warning: {} run queries have no judgments", report.skipped_queries);
    }
    let stem = run.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let table = report.to_table();
    write_file(&out.join(format!("{stem}.metrics.txt")), &table)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_file(&out.join(format!("{stem}.metrics.json")), &(json + "\n"))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub mean: f64,
    pub peak: f64,
    pub std: f64,
    pub data_points: usize,
    pub state_bytes: Option<usize>,
}

/// Rows of `label mean peak std data_points [state_bytes]`; `#` starts a
/// comment.
pub fn parse_bench_import(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Parse(format!("bench import line {}: {msg}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(5..=6).contains(&f.len()) {
            return Err(bad(format!("expected 5 or 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("`{s}` is not a count")));
        rows.push(BenchRow {
            label: f[0].into(),
            mean: num(f[1])?,
            peak: num(f[2])?,
            std: num(f[3])?,
            data_points: int(f[4])?,
            state_bytes: f.get(5).map(|s| int(s)).transpose()?,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow], baseline: &str, candidate: &str, unit: &str) -> Result<String> {
    let find = |label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .ok_or_else(|| CliError::Config(format!("no bench row labelled `{label}`")))
    };
    let (b, c) = (find(baseline)?, find(candidate)?);
    let numeric = |e: train::TrainError| CliError::Numeric(e.to_string());

    let mut out = format!(
        "{:<12} {:>14} {:>14} {:>14} {:>12} {:>14}\n",
        "optimizer",
        format!("mean_{unit}"),
        format!("peak_{unit}"),
        format!("std_{unit}"),
        "data_points",
        "state_bytes"
    );
    for r in rows {
        let bytes = r.state_bytes.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(
            out,
            "{:<12} {:>14.4} {:>14.4} {:>14.4} {:>12} {:>14}",
            r.label, r.mean, r.peak, r.std, r.data_points, bytes
        );
    }
    let gain = train::efficiency_gain(b.mean, c.mean).map_err(numeric)?;
    let _ = writeln!(out, "efficiency_gain_mean_pct={gain:.2} ({candidate} vs {baseline})");
    if let (Some(bb), Some(cb)) = (b.state_bytes, c.state_bytes) {
        let g = train::efficiency_gain(bb as f64, cb as f64).map_err(numeric)?;
        let _ = writeln!(out, "efficiency_gain_state_bytes_pct={g:.2}");
    }
    Ok(out)
}

pub fn bench_import(path: &Path, baseline: &str, candidate: &str, out: &Path) -> Result<()> {
    let rows = parse_bench_import(&read_file(path)?)?;
    let table = bench_table(&rows, baseline, candidate, "usage")?;
    write_file(&out.join("bench-import.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn bench_config(config: &Path, overrides: &Overrides, baseline: &str, candidate: &str, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides);
    let runs = train_all(&cfg, &[OptimizerKind::Lion, OptimizerKind::AdamW], out)?;
    let rows: Vec<BenchRow> = runs
        .iter()
        .map(|r| BenchRow {
            label: r.kind.to_string(),
            mean: r.resources.mean_step_ms,
            peak: r.resources.peak_step_ms,
            std: r.resources.std_step_ms,
            data_points: r.resources.n_steps,
            state_bytes: Some(r.resources.optimizer_state_bytes),
        })
        .collect();
    let table = bench_table(&rows, baseline, candidate, "ms")?;
    let mut dir = ArtifactDir::create(&out.join(format!("{}-bench", cfg.model.name)))?;
    dir.write("bench", "bench.txt", &table)?;
    dir.finish("bench-optim", Some(cfg.train.seed), &cfg)?;
    print!("{table}");
    Ok(())
}

pub fn synthetic_data(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    if cfg.relevant_per_query > cfg.candidates_per_query {
        return Err(CliError::Config("--relevant cannot exceed --candidates".into()));
    }
    let corpus = synth::generate(cfg);
    let id_text = |m: &BTreeMap<String, String>| m.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect::<String>();
    let mut out = ArtifactDir::create(dir)?;
    out.write("triplets", "triplets.tsv", &train::format_triplets(&corpus.triplets))?;
    out.write("queries", "queries.tsv", &id_text(&corpus.queries))?;
    out.write("passages", "passages.tsv", &id_text(&corpus.passages))?;
    out.write("candidates", "candidates.run", &ir_eval::format_run(&corpus.candidates))?;
    out.write("qrels", "qrels.txt", &ir_eval::format_qrels(&corpus.qrels))?;
    out.write("config", "config.toml", &synthetic_config_toml(cfg.seed))?;
    let manifest = out.finish("synthetic-data", Some(cfg.seed), cfg)?;
    println!("wrote synthetic corpus; manifest {}", manifest.display());
    Ok(())
}

pub fn report(paths: &[PathBuf]) -> Result<()> {
    let mut out = format!("{:<24}", "run");
    for name in METRIC_NAMES {
        let _ = write!(out, " {name:>13}");
    }
    out.push('\n');
    for path in paths {
        let report: MetricReport =
            serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        let label = path
            .file_name()
            .and_then(|s| s.to_str())
            .map_or("run", |s| s.trim_end_matches(".metrics.json"));
        let _ = write!(out, "{label:<24}");
        for v in report.aggregate.as_array() {
            let cell = v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            let _ = write!(out, " {cell:>13}");
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
