//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use lanerope::bench::{run_generation_bench, summarize, text_table, write_csv};
use lanerope::data::{
    curate as curate_records, gen_collab_dataset, gen_kto_dataset, read_records, CollabEpisode,
    PreferenceGroup, VocabManifest,
};
use lanerope::engine::{maj_at_k, run_batch, LaneRecord, Prompt, Query};
use lanerope::model::{checkpoint, ModelParameters};
use lanerope::selftest;
use lanerope::training::{train as run_training, write_metrics, SftGroup, TrainData};

use crate::config::RunConfig;
use crate::{SelftestFailed, Usage};

fn required<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    field.as_ref().ok_or_else(|| {
        Usage(format!(
            "config field \"{name}\" is required (or pass --out)"
        ))
        .into()
    })
}

/// Fails with a data error unless every input path exists.
fn must_exist<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        if !p.exists() {
            let e = std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} does not exist", p.display()),
            );
            return Err(lanerope::Error::Io(e).into());
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(lanerope::Error::from)?;
    }
    let f = File::create(path)
        .map_err(lanerope::Error::from)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(lanerope::Error::from)?;
    writeln!(w).map_err(lanerope::Error::from)?;
    w.flush().map_err(lanerope::Error::from)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(lanerope::Error::from)?;
        writeln!(w).map_err(lanerope::Error::from)?;
    }
    w.flush().map_err(lanerope::Error::from)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(lanerope::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                lanerope::Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)).into()
            })
        })
        .collect()
}

/// `<path>.config.json`, the provenance record next to a non-JSON artifact.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn effective(command: &str, cfg: &RunConfig, extra: Value) -> Value {
    json!({ "command": command, "config": cfg, "resolved": extra })
}

fn load_or_build(cfg: &RunConfig, seed: u64) -> Result<ModelParameters> {
    match &cfg.checkpoint_in {
        Some(dir) => Ok(checkpoint::load(dir)
            .with_context(|| format!("loading checkpoint {}", dir.display()))?),
        None => Ok(cfg.model.build(seed)?),
    }
}

/// A line of SFT data: a full collaboration episode or a bare lane group.
#[derive(Deserialize)]
#[serde(untagged)]
enum SftLine {
    Episode(CollabEpisode),
    Group(SftGroup),
}

pub fn train(kto: bool, config: &Path, threads: usize) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let seed = cfg.seed("train")?;
    let out = required(&cfg.checkpoint_out, "checkpoint_out")?.clone();
    let dataset = required(&cfg.dataset, "dataset")?.clone();
    must_exist(
        [&dataset]
            .into_iter()
            .chain(&cfg.checkpoint_in)
            .chain(&cfg.reference_checkpoint),
    )?;
    let mut params = load_or_build(&cfg, seed)?;
    let data = if kto {
        TrainData::Kto(read_jsonl::<PreferenceGroup>(&dataset)?)
    } else {
        let lines = read_jsonl::<SftLine>(&dataset)?;
        TrainData::Sft(
            lines
                .iter()
                .map(|l| match l {
                    SftLine::Episode(e) => SftGroup::from(e),
                    SftLine::Group(g) => g.clone(),
                })
                .collect(),
        )
    };
    let reference = match (kto, &cfg.reference_checkpoint) {
        (false, _) => None,
        (true, Some(dir)) => Some(checkpoint::load(dir)?),
        (true, None) => Some(params.clone()),
    };
    let metrics_path = cfg
        .metrics_out
        .clone()
        .unwrap_or_else(|| out.join("metrics.jsonl"));
    cfg.metrics_out = Some(metrics_path.clone());
    let tc = cfg.train.train_config(seed, threads);
    let every = cfg.train.checkpoint_every.filter(|&n| n > 0);
    let mut log = create(&metrics_path)?;
    let metrics = run_training(&mut params, reference.as_ref(), &data, &tc, |m, p| {
        write_metrics(&mut log, m)?;
        if let Some(n) = every {
            if (m.step + 1) % n == 0 {
                checkpoint::save(p, &out.join(format!("step-{}", m.step + 1)))?;
            }
        }
        Ok(())
    })?;
    log.flush().map_err(lanerope::Error::from)?;
    checkpoint::save(&params, &out)?;
    let mode = if kto { "kto" } else { "sft" };
    write_json(
        &out.join("run_config.json"),
        &effective("train", &cfg, json!({ "mode": mode, "train": tc })),
    )?;
    if let Some(last) = metrics.last() {
        eprintln!(
            "trained {} steps ({mode}); final loss {:.6}; checkpoint {}",
            metrics.len(),
            last.loss,
            out.display()
        );
    }
    Ok(())
}

pub fn generate(config: &Path, queries: &Path, out: Option<PathBuf>, threads: usize) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let seed = cfg.seed("generate")?;
    if out.is_some() {
        cfg.output = out;
    }
    let out = required(&cfg.output, "output")?.clone();
    must_exist(
        [&queries.to_path_buf()]
            .into_iter()
            .chain(&cfg.checkpoint_in),
    )?;
    let params = load_or_build(&cfg, seed)?;
    let queries: Vec<Query> = read_jsonl(queries)?;
    let sampling = cfg.engine.sampling(seed);
    let samples = cfg.engine.samples.unwrap_or(sampling.lanes);
    let records = run_batch(&params, &queries, samples, &sampling, threads)?;
    write_jsonl(&out, &records)?;
    write_json(
        &sidecar(&out, ".config.json"),
        &effective(
            "generate",
            &cfg,
            json!({ "sampling": sampling, "samples": samples }),
        ),
    )?;
    eprintln!(
        "{} lane records for {} queries -> {}",
        records.len(),
        queries.len(),
        out.display()
    );
    Ok(())
}

pub fn eval(results: &Path, k: usize, out: Option<PathBuf>) -> Result<()> {
    if k == 0 {
        return Err(Usage("--k must be positive".into()).into());
    }
    must_exist([&results.to_path_buf()])?;
    let records: Vec<LaneRecord> = read_jsonl(results)?;
    let summary = maj_at_k(&records, k)?;
    let mut value = serde_json::to_value(&summary).map_err(lanerope::Error::from)?;
    value["effective_config"] = json!({ "results": results, "k": k });
    println!(
        "{}",
        serde_json::to_string(&value).map_err(lanerope::Error::from)?
    );
    if let Some(path) = out {
        write_json(&path, &value)?;
    }
    Ok(())
}

pub fn bench(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if out.is_some() {
        cfg.output = out;
    }
    let seed = cfg.seed.unwrap_or(0);
    let bc = cfg.bench.resolve(seed)?;
    must_exist(&cfg.checkpoint_in)?;
    let params = load_or_build(&cfg, seed)?;
    let result = run_generation_bench(&params, &bc)?;
    let summary = summarize(&bc, &result);
    eprint!("{}", text_table(&result.rows));
    for (name, o) in &summary.overhead {
        eprintln!("overhead {name}: {:+.1}%", 100.0 * o);
    }
    let echo = effective("bench", &cfg, json!({ "bench": bc, "summary": summary }));
    match &cfg.output {
        Some(path) => {
            let mut w = create(path)?;
            write_csv(&result.rows, &mut w)?;
            w.flush().map_err(lanerope::Error::from)?;
            write_json(&sidecar(path, ".summary.json"), &echo)?;
        }
        None => write_csv(&result.rows, std::io::stdout().lock())?,
    }
    Ok(())
}

pub fn gen_collab(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let seed = cfg.seed("data gen-collab")?;
    if out.is_some() {
        cfg.output = out;
    }
    let out = required(&cfg.output, "output")?.clone();
    let d = &cfg.data;
    let episodes = gen_collab_dataset(seed, d.count, d.lanes, &d.collab)?;
    write_jsonl(&out, &episodes)?;
    if let Some(path) = &cfg.secondary_output {
        let queries: Vec<Query> = episodes
            .iter()
            .map(|e| Query {
                query_id: e.id,
                prompt: Prompt::PerLane(e.prompts.clone()),
                expected: Some(e.answer),
            })
            .collect();
        write_jsonl(path, &queries)?;
    }
    write_json(
        &sidecar(&out, ".config.json"),
        &effective(
            "data gen-collab",
            &cfg,
            json!({ "vocab": VocabManifest::default() }),
        ),
    )?;
    eprintln!("{} episodes -> {}", episodes.len(), out.display());
    Ok(())
}

pub fn gen_kto(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let seed = cfg.seed("data gen-kto")?;
    if out.is_some() {
        cfg.output = out;
    }
    let out = required(&cfg.output, "output")?.clone();
    let groups = gen_kto_dataset(seed, &cfg.data.kto)?;
    write_jsonl(&out, &groups)?;
    write_json(
        &sidecar(&out, ".config.json"),
        &effective(
            "data gen-kto",
            &cfg,
            json!({ "vocab": VocabManifest::default() }),
        ),
    )?;
    eprintln!("{} preference groups -> {}", groups.len(), out.display());
    Ok(())
}

pub fn curate(config: &Path, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if input.is_some() {
        cfg.dataset = input;
    }
    if out.is_some() {
        cfg.output = out;
    }
    let input = required(&cfg.dataset, "dataset")?.clone();
    let out = required(&cfg.output, "output")?.clone();
    must_exist([&input])?;
    let text = fs::read_to_string(&input)
        .map_err(lanerope::Error::from)
        .with_context(|| format!("reading {}", input.display()))?;
    let records = read_records(&text);
    let (kept, _, report) = curate_records(&records, &cfg.data.curation)?;
    write_jsonl(&out, &kept)?;
    let report_path = cfg
        .secondary_output
        .clone()
        .unwrap_or_else(|| sidecar(&out, ".report.json"));
    let value = json!({ "report": report, "effective_config": effective("data curate", &cfg, Value::Null) });
    write_json(&report_path, &value)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(lanerope::Error::from)?
    );
    Ok(())
}

pub fn selftest() -> Result<()> {
    let outcomes = selftest::run();
    for c in &outcomes {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(SelftestFailed(failed).into());
    }
    Ok(())
}
