//! Inference-timing harness: wall time to fixed generation checkpoints across
//! lane counts under a fixed total batch.
//!
//! Every variant decodes all `batch` sequences together. The weight
//! projections of a decode step cover all new rows at once; attention stays
//! within each group. The `baseline` variant decodes the same sequences as
//! plain causal single-lane streams without any layout bookkeeping.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Coord, MaskRule};
use crate::engine::{
    feed_groups, sample_token, KvCache, SampleKey, DEFAULT_TEMPERATURE, DEFAULT_TOP_P,
};
use crate::error::{invalid, Error, Result};
use crate::model::{embed_rows, logits_from_hidden, run_layer, LayerKv, ModelParameters};
use crate::tensor::Matrix;

pub const LANEROPE: &str = "lanerope";
pub const BASELINE: &str = "baseline";

/// Named sizing presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// The full protocol: 256-token prompt, checkpoints up to 8192 tokens.
    Paper,
    /// Everything scaled down by 8 so a laptop CPU finishes in minutes.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => invalid(format!(
                "unknown bench profile {other:?} (expected paper or desk)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Total number of sequences decoded together.
    pub batch: usize,
    pub lanes: Vec<usize>,
    pub prompt_len: usize,
    /// Generated tokens per lane at which the elapsed time is recorded.
    pub checkpoints: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
    /// Also time the plain single-lane decoding path.
    pub baseline: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl BenchConfig {
    pub fn profile(profile: Profile) -> Self {
        let (prompt_len, checkpoints) = match profile {
            Profile::Paper => (256, vec![2048, 4096, 6144, 8192]),
            Profile::Desk => (32, vec![256, 512, 768, 1024]),
        };
        Self {
            batch: 8,
            lanes: vec![1, 2, 4],
            prompt_len,
            checkpoints,
            repeats: 5,
            warmup: 1,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            baseline: true,
        }
    }

    pub fn max_checkpoint(&self) -> usize {
        self.checkpoints.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return invalid("batch must be positive");
        }
        if self.lanes.is_empty() {
            return invalid("at least one lane count is required");
        }
        if let Some(n) = self.lanes.iter().find(|&&n| n == 0 || self.batch % n != 0) {
            return invalid(format!(
                "lane count {n} does not divide the batch of {}",
                self.batch
            ));
        }
        if self.prompt_len == 0 {
            return invalid("prompt_len must be positive");
        }
        if self.checkpoints.is_empty() || self.checkpoints[0] == 0 {
            return invalid("checkpoints must be non-empty and positive");
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("checkpoints must be strictly ascending");
        }
        if self.repeats == 0 {
            return invalid("repeats must be positive");
        }
        if !(self.temperature >= 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid("temperature must be >= 0 and top_p in (0, 1]");
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of the time to one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub lanes: usize,
    pub checkpoint: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

/// Prefill timing of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillRow {
    pub variant: String,
    pub lanes: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub prefill: Vec<PrefillRow>,
    /// Generated tokens of the last timed run per `variant/lanes`, flattened
    /// in (sequence, step) order.
    #[serde(skip)]
    pub tokens: BTreeMap<String, Vec<Vec<u32>>>,
}

impl BenchResult {
    pub fn row(&self, variant: &str, lanes: usize, checkpoint: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.lanes == lanes && r.checkpoint == checkpoint)
    }

    /// `time(a) / time(b) - 1` at `checkpoint`.
    pub fn relative_overhead(
        &self,
        a: (&str, usize),
        b: (&str, usize),
        checkpoint: usize,
    ) -> Option<f64> {
        let ta = self.row(a.0, a.1, checkpoint)?.mean_s;
        let tb = self.row(b.0, b.1, checkpoint)?.mean_s;
        (tb > 0.0).then(|| ta / tb - 1.0)
    }
}

/// Sample mean and standard deviation (zero for a single sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct RunTiming {
    prefill: Duration,
    checkpoints: Vec<Duration>,
    tokens: Vec<Vec<u32>>,
}

/// Identical prompt for every sequence of a run.
fn bench_prompt(cfg: &BenchConfig, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let top = vocab.min(100) as u32;
    (0..cfg.prompt_len).map(|_| rng.gen_range(0..top)).collect()
}

fn sample(cfg: &BenchConfig, logits: &[f64], sequence: usize, step: usize) -> Result<u32> {
    let key = SampleKey {
        seed: cfg.seed,
        query: 0,
        group: 0,
        lane: sequence as u64,
        step: step as u64,
    };
    sample_token(logits, cfg.temperature, cfg.top_p, &mut key.rng())
}

/// Times one run of `batch / lanes` groups of `lanes` lanes.
fn run_lanes(params: &ModelParameters, cfg: &BenchConfig, lanes: usize) -> Result<RunTiming> {
    let groups = cfg.batch / lanes;
    let prompt = bench_prompt(cfg, params.config.vocab_size);
    let p = prompt.len();
    let mut caches: Vec<KvCache> = (0..groups)
        .map(|_| KvCache::new(params, lanes, p, MaskRule::default()))
        .collect();
    let feed: Vec<(Coord, u32)> = prompt
        .iter()
        .enumerate()
        .flat_map(|(s, &t)| (0..lanes).map(move |l| (Coord::new(l, s), t)))
        .collect();
    let start = Instant::now();
    let logits = {
        let mut refs: Vec<&mut KvCache> = caches.iter_mut().collect();
        feed_groups(params, &mut refs, &vec![feed; groups])?
    };
    let prefill = start.elapsed();
    // Sequence `g * lanes + l` is lane `l` of group `g`.
    let mut last: Vec<Vec<f64>> = (0..cfg.batch)
        .map(|s| logits[s / lanes].row((p - 1) * lanes + s % lanes).to_vec())
        .collect();
    let mut tokens = vec![Vec::with_capacity(cfg.max_checkpoint()); cfg.batch];
    let mut marks = Vec::with_capacity(cfg.checkpoints.len());
    let start = Instant::now();
    for step in 0..cfg.max_checkpoint() {
        for (s, seq) in tokens.iter_mut().enumerate() {
            seq.push(sample(cfg, &last[s], s, step)?);
        }
        if cfg.checkpoints.contains(&(step + 1)) {
            marks.push(start.elapsed());
            if step + 1 == cfg.max_checkpoint() {
                break;
            }
        }
        let feeds: Vec<Vec<(Coord, u32)>> = (0..groups)
            .map(|g| {
                (0..lanes)
                    .map(|l| (Coord::new(l, p + step), tokens[g * lanes + l][step]))
                    .collect()
            })
            .collect();
        let mut refs: Vec<&mut KvCache> = caches.iter_mut().collect();
        let out = feed_groups(params, &mut refs, &feeds)?;
        for (s, row) in last.iter_mut().enumerate() {
            row.copy_from_slice(out[s / lanes].row(s % lanes));
        }
    }
    Ok(RunTiming {
        prefill,
        checkpoints: marks,
        tokens,
    })
}

/// Plain causal decoding of `batch` independent sequences.
fn run_baseline(params: &ModelParameters, cfg: &BenchConfig) -> Result<RunTiming> {
    let model = &params.config;
    let b = cfg.batch;
    let prompt = bench_prompt(cfg, model.vocab_size);
    let p = prompt.len();
    let mut kv: Vec<Vec<LayerKv>> = (0..b)
        .map(|_| (0..model.n_layers).map(|_| LayerKv::new(model)).collect())
        .collect();
    // Runs `rows` (token, position) per sequence through every layer.
    let mut forward = |rows: &[Vec<(u32, usize)>]| -> Result<Matrix> {
        let ids: Vec<u32> = rows.iter().flatten().map(|r| r.0).collect();
        let coords: Vec<Coord> = rows.iter().flatten().map(|r| Coord::new(0, r.1)).collect();
        let visible: Vec<Vec<usize>> = rows.iter().flatten().map(|r| (0..=r.1).collect()).collect();
        let group: Vec<usize> = rows
            .iter()
            .enumerate()
            .flat_map(|(s, r)| std::iter::repeat(s).take(r.len()))
            .collect();
        let mut x = embed_rows(params, &ids)?;
        for (l, layer) in params.layers.iter().enumerate() {
            let mut kvs: Vec<&mut LayerKv> = kv.iter_mut().map(|s| &mut s[l]).collect();
            x = run_layer(model, layer, &x, &coords, &visible, &mut kvs, &group, false).0;
        }
        Ok(logits_from_hidden(params, &x).2)
    };
    let prompt_rows: Vec<(u32, usize)> = prompt.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let start = Instant::now();
    let logits = forward(&vec![prompt_rows; b])?;
    let prefill = start.elapsed();
    let mut last: Vec<Vec<f64>> = (0..b).map(|s| logits.row(s * p + p - 1).to_vec()).collect();
    let mut tokens = vec![Vec::with_capacity(cfg.max_checkpoint()); b];
    let mut marks = Vec::with_capacity(cfg.checkpoints.len());
    let start = Instant::now();
    for step in 0..cfg.max_checkpoint() {
        for (s, seq) in tokens.iter_mut().enumerate() {
            seq.push(sample(cfg, &last[s], s, step)?);
        }
        if cfg.checkpoints.contains(&(step + 1)) {
            marks.push(start.elapsed());
            if step + 1 == cfg.max_checkpoint() {
                break;
            }
        }
        let rows: Vec<Vec<(u32, usize)>> =
            tokens.iter().map(|t| vec![(t[step], p + step)]).collect();
        let out = forward(&rows)?;
        for (s, row) in last.iter_mut().enumerate() {
            row.copy_from_slice(out.row(s));
        }
    }
    Ok(RunTiming {
        prefill,
        checkpoints: marks,
        tokens,
    })
}

/// Runs the timing protocol for every configured lane count (and the plain
/// baseline when enabled). Warmup runs are discarded.
pub fn run_generation_bench(params: &ModelParameters, cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let need = cfg.prompt_len + cfg.max_checkpoint();
    if need > params.config.max_steps {
        return Err(Error::Budget(format!(
            "prompt {} + {} generated tokens exceeds the model context of {}",
            cfg.prompt_len,
            cfg.max_checkpoint(),
            params.config.max_steps
        )));
    }
    let mut variants: Vec<(&str, usize)> = cfg.lanes.iter().map(|&n| (LANEROPE, n)).collect();
    if cfg.baseline {
        variants.push((BASELINE, 1));
    }
    let mut result = BenchResult {
        rows: Vec::new(),
        prefill: Vec::new(),
        tokens: BTreeMap::new(),
    };
    for (variant, lanes) in variants {
        let run = || match variant {
            BASELINE => run_baseline(params, cfg),
            _ => run_lanes(params, cfg, lanes),
        };
        for _ in 0..cfg.warmup {
            run()?;
        }
        let mut prefill = Vec::with_capacity(cfg.repeats);
        let mut marks = vec![Vec::with_capacity(cfg.repeats); cfg.checkpoints.len()];
        let mut tokens = Vec::new();
        for _ in 0..cfg.repeats {
            let t = run()?;
            prefill.push(t.prefill.as_secs_f64());
            for (m, d) in marks.iter_mut().zip(&t.checkpoints) {
                m.push(d.as_secs_f64());
            }
            tokens = t.tokens;
        }
        let (mean_s, std_s) = mean_std(&prefill);
        result.prefill.push(PrefillRow {
            variant: variant.into(),
            lanes,
            mean_s,
            std_s,
        });
        for (&checkpoint, m) in cfg.checkpoints.iter().zip(&marks) {
            let (mean_s, std_s) = mean_std(m);
            result.rows.push(BenchRow {
                variant: variant.into(),
                lanes,
                checkpoint,
                mean_s,
                std_s,
            });
        }
        result.tokens.insert(format!("{variant}/{lanes}"), tokens);
    }
    sort_rows(&mut result.rows);
    Ok(result)
}

pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| {
        (a.variant.as_str(), a.lanes, a.checkpoint).cmp(&(
            b.variant.as_str(),
            b.lanes,
            b.checkpoint,
        ))
    });
}

/// Writes rows as CSV with header `variant,lanes,checkpoint,mean_s,std_s`.
pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(["variant", "lanes", "checkpoint", "mean_s", "std_s"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<BenchRow>, _>>()?;
    Ok(rows)
}

/// Aligned table with one line per (variant, lanes) and one column per checkpoint.
pub fn text_table(rows: &[BenchRow]) -> String {
    let mut checkpoints: Vec<usize> = rows.iter().map(|r| r.checkpoint).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut lines: BTreeMap<(String, usize), BTreeMap<usize, &BenchRow>> = BTreeMap::new();
    for r in rows {
        lines
            .entry((r.variant.clone(), r.lanes))
            .or_default()
            .insert(r.checkpoint, r);
    }
    let mut out = format!("{:<10} {:>5}", "variant", "N");
    for c in &checkpoints {
        out.push_str(&format!(" {:>20}", format!("{c} tok")));
    }
    out.push('\n');
    for ((variant, lanes), cells) in &lines {
        out.push_str(&format!("{variant:<10} {lanes:>5}"));
        for c in &checkpoints {
            let cell = cells.get(c).map_or_else(
                || "-".to_string(),
                |r| format!("{:.3} ± {:.3} s", r.mean_s, r.std_s),
            );
            out.push_str(&format!(" {cell:>20}"));
        }
        out.push('\n');
    }
    out
}

/// Free-form description of the machine running the benchmark.
pub fn host_metadata() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("os".into(), std::env::consts::OS.into());
    m.insert("arch".into(), std::env::consts::ARCH.into());
    m.insert(
        "available_parallelism".into(),
        std::thread::available_parallelism().map_or_else(|_| "unknown".into(), |n| n.to_string()),
    );
    m.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert(
        "debug_assertions".into(),
        cfg!(debug_assertions).to_string(),
    );
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub host: BTreeMap<String, String>,
    pub rows: Vec<BenchRow>,
    pub prefill: Vec<PrefillRow>,
    /// Relative time overhead at the final checkpoint, keyed like `lanerope/4 vs lanerope/1`.
    pub overhead: BTreeMap<String, f64>,
}

pub fn summarize(cfg: &BenchConfig, result: &BenchResult) -> BenchSummary {
    let last = cfg.max_checkpoint();
    let mut overhead = BTreeMap::new();
    for &n in &cfg.lanes {
        if n != 1 {
            if let Some(o) = result.relative_overhead((LANEROPE, n), (LANEROPE, 1), last) {
                overhead.insert(format!("{LANEROPE}/{n} vs {LANEROPE}/1"), o);
            }
        }
    }
    if let Some(o) = result.relative_overhead((LANEROPE, 1), (BASELINE, 1), last) {
        overhead.insert(format!("{LANEROPE}/1 vs {BASELINE}/1"), o);
    }
    BenchSummary {
        config: cfg.clone(),
        host: host_metadata(),
        rows: result.rows.clone(),
        prefill: result.prefill.clone(),
        overhead,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_from_base, LaneInit, LaneStrategy, ModelConfig};

    fn tiny() -> ModelParameters {
        let cfg = ModelConfig::base(32, 1, 2, 4, 16, 64).unwrap();
        let base = ModelParameters::random(cfg, 3).unwrap();
        init_from_base(&base, &LaneInit::new(LaneStrategy::Ntk, 1000.0, 4)).unwrap()
    }

    fn tiny_config() -> BenchConfig {
        BenchConfig {
            batch: 4,
            lanes: vec![1, 2, 4],
            prompt_len: 5,
            checkpoints: vec![4, 8, 16],
            repeats: 2,
            warmup: 0,
            ..BenchConfig::profile(Profile::Desk)
        }
    }

    #[test]
    fn profiles_are_valid() {
        BenchConfig::profile(Profile::Paper).validate().unwrap();
        BenchConfig::profile(Profile::Desk).validate().unwrap();
        assert_eq!(
            BenchConfig::default().checkpoints,
            vec![2048, 4096, 6144, 8192]
        );
        assert_eq!("DESK".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("huge".parse::<Profile>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            BenchConfig {
                lanes: vec![3],
                ..tiny_config()
            },
            BenchConfig {
                checkpoints: vec![8, 4],
                ..tiny_config()
            },
            BenchConfig {
                repeats: 0,
                ..tiny_config()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidParameter(_))));
        }
    }

    #[test]
    fn context_overflow_is_a_budget_error() {
        let cfg = BenchConfig {
            checkpoints: vec![100],
            ..tiny_config()
        };
        assert!(matches!(
            run_generation_bench(&tiny(), &cfg),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn sample_std_matches_hand_computation() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn timings_are_cumulative_and_tokens_deterministic() {
        let p = tiny();
        let cfg = tiny_config();
        let a = run_generation_bench(&p, &cfg).unwrap();
        let b = run_generation_bench(&p, &cfg).unwrap();
        assert_eq!(a.rows.len(), 4 * 3);
        for w in a.rows.windows(2) {
            if w[0].variant == w[1].variant && w[0].lanes == w[1].lanes {
                assert!(w[1].checkpoint > w[0].checkpoint);
                assert!(w[1].mean_s >= w[0].mean_s);
            }
        }
        assert_eq!(a.tokens, b.tokens);
        // Single-lane groups with the plain path produce the same streams.
        assert_eq!(a.tokens["lanerope/1"], a.tokens["baseline/1"]);
        assert!(a
            .tokens
            .values()
            .all(|t| t.len() == 4 && t.iter().all(|s| s.len() == 16)));
        let single = BenchConfig { repeats: 1, ..cfg };
        let c = run_generation_bench(&p, &single).unwrap();
        assert!(c.rows.iter().all(|r| r.std_s == 0.0));
    }

    #[test]
    fn csv_is_header_only_when_empty_and_round_trips() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "variant,lanes,checkpoint,mean_s,std_s"
        );

        let row = BenchRow {
            variant: LANEROPE.into(),
            lanes: 4,
            checkpoint: 512,
            mean_s: 1.25,
            std_s: 0.0625,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), vec![row]);
    }

    #[test]
    fn rows_sort_by_variant_lanes_checkpoint() {
        let r = |v: &str, n, c| BenchRow {
            variant: v.into(),
            lanes: n,
            checkpoint: c,
            mean_s: 0.0,
            std_s: 0.0,
        };
        let mut rows = vec![
            r("lanerope", 2, 8),
            r("baseline", 1, 8),
            r("lanerope", 1, 16),
            r("lanerope", 1, 8),
        ];
        sort_rows(&mut rows);
        let keys: Vec<_> = rows
            .iter()
            .map(|x| (x.variant.clone(), x.lanes, x.checkpoint))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("baseline".into(), 1, 8),
                ("lanerope".into(), 1, 8),
                ("lanerope".into(), 1, 16),
                ("lanerope".into(), 2, 8)
            ]
        );
        let table = text_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("16 tok"));
    }
}
