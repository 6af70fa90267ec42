//! Multi-lane autoregressive generation with a shared key/value cache.
//!
//! A group of `N` lanes advances one step at a time: each unfinished lane
//! samples its next token from logits that condition on every visible token
//! of every lane, then all new tokens are fed through the model together as
//! rows of one batch.

mod sampling;
mod vote;

pub use sampling::{argmax, nucleus, sample_token, SampleKey};
pub use vote::{extract_answer, maj_at_k, majority_vote, FinishReason, LaneRecord, MajSummary};

use serde::{Deserialize, Serialize};

use crate::attention::{visible_keys, Coord, LaneLayout, MaskRule};
use crate::error::{invalid, Error, Result};
use crate::model::{embed_rows, logits_from_hidden, run_layer, LayerKv, ModelParameters};
use crate::tensor::Matrix;

pub const DEFAULT_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 4096;

/// How a prompt is placed on the lane grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Every lane holds its own copy of the prompt at steps `0..P`.
    #[default]
    Replicated,
    /// The prompt is stored once in lane 0; other lanes start at step `P` and
    /// see it through cross-lane attention.
    Shared,
}

/// Prompt tokens: one prompt for all lanes, or one per lane (equal lengths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Shared(Vec<u32>),
    PerLane(Vec<Vec<u32>>),
}

impl Prompt {
    fn lane(&self, lane: usize) -> &[u32] {
        match self {
            Prompt::Shared(p) => p,
            Prompt::PerLane(ps) => &ps[lane],
        }
    }

    fn len(&self) -> usize {
        self.lane(0).len()
    }
}

/// Sampling and termination settings shared by every group of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub lanes: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    pub seed: u64,
    #[serde(default)]
    pub eos: Option<u32>,
    #[serde(default)]
    pub marker: Option<u32>,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    #[serde(default)]
    pub mask: MaskRule,
}

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}

impl SamplingConfig {
    pub fn new(lanes: usize, seed: u64) -> Self {
        Self {
            lanes,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            seed,
            eos: None,
            marker: None,
            prompt_mode: PromptMode::Replicated,
            mask: MaskRule::default(),
        }
    }

    /// Greedy decoding with the given budget.
    pub fn greedy(lanes: usize, max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            temperature: 0.0,
            ..Self::new(lanes, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return invalid("lanes must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return invalid(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        Ok(())
    }
}

/// One group to generate: the prompt plus identifiers that key its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: Prompt,
    pub query_id: u64,
    pub group_id: u64,
    pub sampling: SamplingConfig,
}

impl GenerationRequest {
    pub fn new(prompt: Prompt, sampling: SamplingConfig) -> Self {
        Self {
            prompt,
            query_id: 0,
            group_id: 0,
            sampling,
        }
    }

    pub fn validate(&self, params: &ModelParameters) -> Result<()> {
        self.sampling.validate()?;
        let n = self.sampling.lanes;
        if let Prompt::PerLane(ps) = &self.prompt {
            if ps.len() != n {
                return invalid(format!("{} lane prompts given for {n} lanes", ps.len()));
            }
            if ps.iter().any(|p| p.len() != ps[0].len()) {
                return invalid("per-lane prompts must have equal lengths");
            }
            if self.sampling.prompt_mode == PromptMode::Shared {
                return invalid("shared prompt mode needs a single prompt");
            }
        }
        if self.prompt.len() == 0 {
            return invalid("prompt must not be empty");
        }
        let vocab = params.config.vocab_size;
        if (0..n).any(|l| self.prompt.lane(l).iter().any(|&t| t as usize >= vocab)) {
            return invalid(format!("prompt token outside vocabulary of {vocab}"));
        }
        Ok(())
    }
}

/// Rotated keys and values of one group, per layer, in flat layout order.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    layout: LaneLayout,
    rule: MaskRule,
    max_steps: usize,
    /// Step at which each still-empty lane will place its first token.
    first_step: Vec<usize>,
}

impl KvCache {
    pub fn new(
        params: &ModelParameters,
        group_size: usize,
        prompt_len: usize,
        rule: MaskRule,
    ) -> Self {
        let cfg = &params.config;
        Self {
            layers: (0..cfg.n_layers).map(|_| LayerKv::new(cfg)).collect(),
            layout: LaneLayout::empty(group_size, prompt_len),
            rule,
            max_steps: cfg.max_steps,
            first_step: vec![0; group_size],
        }
    }

    pub fn layout(&self) -> &LaneLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Tokens stored for `lane`.
    pub fn lane_len(&self, lane: usize) -> usize {
        self.layout.per_lane_len[lane]
    }

    /// Step the next token of `lane` occupies.
    pub fn next_step(&self, lane: usize) -> usize {
        match self.layout.per_lane_len[lane] {
            0 => self.first_step[lane],
            n => self.layout.lane_start[lane] + n,
        }
    }

    /// Appends `tokens` to the layout and returns their coordinates and the
    /// keys each one may see. The cache is untouched on error.
    fn stage(&mut self, tokens: &[(Coord, u32)]) -> Result<(Vec<Coord>, Vec<Vec<usize>>)> {
        if let Some((c, _)) = tokens.iter().find(|(c, _)| c.step >= self.max_steps) {
            return Err(Error::Budget(format!(
                "step {} exceeds the cache capacity of {} steps",
                c.step, self.max_steps
            )));
        }
        let first = self.layout.len();
        let mut trial = self.layout.clone();
        for &(c, _) in tokens {
            trial.push(c)?;
        }
        self.layout = trial;
        let coords = tokens.iter().map(|t| t.0).collect();
        let visible = (first..self.layout.len())
            .map(|i| visible_keys(&self.layout, i, self.rule))
            .collect();
        Ok((coords, visible))
    }

    /// Feeds new tokens (in flat order) and returns one logit row per token.
    pub fn feed(&mut self, params: &ModelParameters, tokens: &[(Coord, u32)]) -> Result<Matrix> {
        let mut out = feed_groups(params, &mut [self], &[tokens.to_vec()])?;
        Ok(out.remove(0))
    }
}

/// Feeds several independent groups in one pass: the projections of all new
/// rows are computed together, attention stays within each group's cache.
/// Returns one logit matrix per group.
pub fn feed_groups(
    params: &ModelParameters,
    caches: &mut [&mut KvCache],
    tokens: &[Vec<(Coord, u32)>],
) -> Result<Vec<Matrix>> {
    if caches.len() != tokens.len() {
        return invalid("one token list per cache is required");
    }
    let ids: Vec<u32> = tokens.iter().flatten().map(|t| t.1).collect();
    let mut x = embed_rows(params, &ids)?;
    let mut coords = Vec::with_capacity(ids.len());
    let mut visible = Vec::with_capacity(ids.len());
    let mut group = Vec::with_capacity(ids.len());
    for (g, (cache, toks)) in caches.iter_mut().zip(tokens).enumerate() {
        let (c, v) = cache.stage(toks)?;
        coords.extend(c);
        visible.extend(v);
        group.extend(std::iter::repeat(g).take(toks.len()));
    }
    for (l, p) in params.layers.iter().enumerate() {
        let mut kvs: Vec<&mut LayerKv> = caches.iter_mut().map(|c| &mut c.layers[l]).collect();
        x = run_layer(
            &params.config,
            p,
            &x,
            &coords,
            &visible,
            &mut kvs,
            &group,
            false,
        )
        .0;
    }
    let logits = logits_from_hidden(params, &x).2;
    let mut out = Vec::with_capacity(tokens.len());
    let mut start = 0;
    for toks in tokens {
        let mut m = Matrix::zeros(toks.len(), logits.cols);
        for r in 0..toks.len() {
            m.row_mut(r).copy_from_slice(logits.row(start + r));
        }
        start += toks.len();
        out.push(m);
    }
    Ok(out)
}

/// Runs the prompt through a fresh cache. Returns the cache and one row of
/// next-token logits per lane.
pub fn prefill(params: &ModelParameters, request: &GenerationRequest) -> Result<(KvCache, Matrix)> {
    request.validate(params)?;
    let s = &request.sampling;
    let n = s.lanes;
    let p = request.prompt.len();
    if p > params.config.max_steps {
        return Err(Error::Budget(format!(
            "prompt of {p} tokens exceeds max_steps {}",
            params.config.max_steps
        )));
    }
    let mut cache = KvCache::new(params, n, p, s.mask);
    let prompt_lanes = match s.prompt_mode {
        PromptMode::Replicated => n,
        PromptMode::Shared => 1,
    };
    cache.first_step[prompt_lanes..].fill(p);
    let mut feed = Vec::with_capacity(p * prompt_lanes);
    for step in 0..p {
        for lane in 0..prompt_lanes {
            feed.push((Coord::new(lane, step), request.prompt.lane(lane)[step]));
        }
    }
    let logits = cache.feed(params, &feed)?;
    let mut out = Matrix::zeros(n, logits.cols);
    for lane in 0..n {
        let src = (p - 1) * prompt_lanes + lane.min(prompt_lanes - 1);
        out.row_mut(lane).copy_from_slice(logits.row(src));
    }
    Ok((cache, out))
}

/// Feeds one token for each listed lane at that lane's next step. Lanes must
/// be given in increasing order; returns one logit row per lane.
pub fn decode_step(
    params: &ModelParameters,
    cache: &mut KvCache,
    tokens: &[(usize, u32)],
) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::ContractViolation(
            "decode step with no unfinished lane".into(),
        ));
    }
    let feed: Vec<(Coord, u32)> = tokens
        .iter()
        .map(|&(lane, t)| (Coord::new(lane, cache.next_step(lane)), t))
        .collect();
    cache.feed(params, &feed)
}

/// Output of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: Vec<Vec<u32>>,
    pub answers: Vec<Option<u32>>,
    pub finish: Vec<FinishReason>,
}

/// Generates every lane of one group until each hits EOS or its budget.
/// A lane's EOS token is recorded in its stream but never fed back.
pub fn generate(params: &ModelParameters, request: &GenerationRequest) -> Result<GenerationResult> {
    let s = &request.sampling;
    let n = s.lanes;
    let (mut cache, mut logits) = prefill(params, request)?;
    let mut tokens = vec![Vec::new(); n];
    let mut finish: Vec<Option<FinishReason>> = vec![None; n];
    if s.max_new_tokens == 0 {
        finish.fill(Some(FinishReason::Budget));
    }
    // Row of `logits` holding each lane's latest prediction.
    let mut row_of: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    while finish.iter().any(Option::is_none) {
        let mut feeds = Vec::new();
        for lane in 0..n {
            if finish[lane].is_some() {
                continue;
            }
            let key = SampleKey {
                seed: s.seed,
                query: request.query_id,
                group: request.group_id,
                lane: lane as u64,
                step,
            };
            let tok = sample_token(
                logits.row(row_of[lane]),
                s.temperature,
                s.top_p,
                &mut key.rng(),
            )?;
            tokens[lane].push(tok);
            if Some(tok) == s.eos {
                finish[lane] = Some(FinishReason::Eos);
            } else if tokens[lane].len() >= s.max_new_tokens {
                finish[lane] = Some(FinishReason::Budget);
            } else {
                feeds.push((lane, tok));
            }
        }
        if feeds.is_empty() {
            break;
        }
        logits = decode_step(params, &mut cache, &feeds)?;
        for (r, &(lane, _)) in feeds.iter().enumerate() {
            row_of[lane] = r;
        }
        step += 1;
    }
    let answers = tokens
        .iter()
        .map(|t| s.marker.and_then(|m| extract_answer(t, m, s.eos)))
        .collect();
    Ok(GenerationResult {
        tokens,
        answers,
        finish: finish
            .into_iter()
            .map(|f| f.expect("every lane finished"))
            .collect(),
    })
}

/// One evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<u32>,
}

/// Splits `samples` per query into `samples / lanes` independent groups and
/// generates them, using up to `threads` workers. Output order is by query,
/// group, lane regardless of the thread count.
pub fn run_batch(
    params: &ModelParameters,
    queries: &[Query],
    samples: usize,
    sampling: &SamplingConfig,
    threads: usize,
) -> Result<Vec<LaneRecord>> {
    sampling.validate()?;
    let n = sampling.lanes;
    if samples == 0 || samples % n != 0 {
        return invalid(format!("lanes {n} must divide the sample count {samples}"));
    }
    let groups = samples / n;
    let jobs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..groups).map(move |g| (q, g)))
        .collect();
    let run = |&(q, g): &(usize, usize)| -> Result<Vec<LaneRecord>> {
        let query = &queries[q];
        let request = GenerationRequest {
            prompt: query.prompt.clone(),
            query_id: query.query_id,
            group_id: g as u64,
            sampling: sampling.clone(),
        };
        let res = generate(params, &request)?;
        Ok((0..n)
            .map(|lane| LaneRecord {
                query_id: query.query_id,
                group_id: g as u64,
                lane_id: lane as u64,
                tokens: res.tokens[lane].clone(),
                answer: res.answers[lane],
                finish_reason: res.finish[lane],
                expected: query.expected,
            })
            .collect())
    };
    let results = parallel_map(&jobs, threads, run);
    let mut out = Vec::with_capacity(queries.len() * samples);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Order-preserving map over `items` with at most `threads` scoped workers.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, U)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, u) in done.into_iter().flatten() {
        slots[i] = Some(u);
    }
    slots
        .into_iter()
        .map(|s| s.expect("every item mapped"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_from_base, reference, LaneInit, LaneStrategy, ModelConfig};

    fn base() -> ModelParameters {
        let cfg = ModelConfig::base(48, 2, 2, 8, 32, 256).unwrap();
        ModelParameters::random(cfg, 21).unwrap()
    }

    fn lane_model(bias_norm: f64, max_lanes: usize) -> ModelParameters {
        init_from_base(
            &base(),
            &LaneInit::new(LaneStrategy::Ntk, bias_norm, max_lanes),
        )
        .unwrap()
    }

    #[test]
    fn single_lane_prefill_matches_reference() {
        let p = lane_model(1000.0, 2);
        let prompt = vec![3, 9, 27, 4, 12];
        let req =
            GenerationRequest::new(Prompt::Shared(prompt.clone()), SamplingConfig::greedy(1, 4));
        let (cache, logits) = prefill(&p, &req).unwrap();
        let want = reference::forward_sequence(&p, &prompt).unwrap();
        let diff = logits
            .row(0)
            .iter()
            .zip(want.row(4))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8);
        assert_eq!(cache.lane_len(0), 5);
    }

    #[test]
    fn prefill_fills_every_lane() {
        let p = lane_model(2.0, 3);
        let req =
            GenerationRequest::new(Prompt::Shared(vec![1, 2, 3]), SamplingConfig::greedy(3, 4));
        let (cache, logits) = prefill(&p, &req).unwrap();
        assert_eq!(
            (0..3).map(|l| cache.lane_len(l)).collect::<Vec<_>>(),
            vec![3, 3, 3]
        );
        assert_eq!(logits.rows, 3);

        let mut shared = req.clone();
        shared.sampling.prompt_mode = PromptMode::Shared;
        let (cache, logits) = prefill(&p, &shared).unwrap();
        assert_eq!(
            (0..3).map(|l| cache.lane_len(l)).collect::<Vec<_>>(),
            vec![3, 0, 0]
        );
        assert_eq!(logits.row(0), logits.row(2));
        assert_eq!(cache.next_step(2), 3);
    }

    #[test]
    fn prefill_rejects_overlong_prompts() {
        let p = lane_model(2.0, 2);
        let req =
            GenerationRequest::new(Prompt::Shared(vec![1; 257]), SamplingConfig::greedy(2, 4));
        assert!(matches!(prefill(&p, &req), Err(Error::Budget(_))));
        let req = GenerationRequest::new(Prompt::Shared(vec![]), SamplingConfig::greedy(2, 4));
        assert!(prefill(&p, &req).is_err());
        let req = GenerationRequest::new(
            Prompt::PerLane(vec![vec![1, 2], vec![3]]),
            SamplingConfig::greedy(2, 4),
        );
        assert!(prefill(&p, &req).is_err());
    }

    /// Incremental logits must equal a full forward over everything so far.
    fn check_incremental(p: &ModelParameters, lanes: usize, mode: PromptMode, steps: usize) {
        let mut s = SamplingConfig::new(lanes, 5);
        s.prompt_mode = mode;
        s.temperature = 1.0;
        let prompt = vec![7, 1, 30, 2];
        let req = GenerationRequest::new(Prompt::Shared(prompt.clone()), s);
        let (mut cache, mut logits) = prefill(p, &req).unwrap();
        let mut tokens: Vec<u32> = Vec::new();
        let mut last_rows: Vec<usize> = Vec::new();
        for step in 0..steps {
            let layout = cache.layout().clone();
            if tokens.is_empty() {
                tokens = layout.coords.iter().map(|c| prompt[c.step]).collect();
            }
            let full = forward(p, &tokens, &layout, MaskRule::default()).unwrap();
            for lane in 0..lanes {
                let row = if step == 0 {
                    let holder = if mode == PromptMode::Shared { 0 } else { lane };
                    layout
                        .coords
                        .iter()
                        .rposition(|c| c.lane == holder)
                        .unwrap()
                } else {
                    last_rows[lane]
                };
                let diff = logits
                    .row(lane)
                    .iter()
                    .zip(full.logits.row(row))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-9, "step {step} lane {lane}: {diff}");
            }
            let feeds: Vec<(usize, u32)> = (0..lanes)
                .map(|l| (l, ((step * 7 + l * 3) % 48) as u32))
                .collect();
            let start = cache.len();
            logits = decode_step(p, &mut cache, &feeds).unwrap();
            last_rows = (start..start + lanes).collect();
            tokens.extend(feeds.iter().map(|f| f.1));
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let p = lane_model(3.0, 4);
        for lanes in [1, 2, 4] {
            check_incremental(&p, lanes, PromptMode::Replicated, 6);
        }
        check_incremental(&p, 3, PromptMode::Shared, 5);
    }

    #[test]
    fn greedy_generation_is_argmax_and_deterministic() {
        let p = lane_model(2.0, 2);
        let mut s = SamplingConfig::new(2, 17);
        s.max_new_tokens = 6;
        let req = GenerationRequest::new(Prompt::Shared(vec![4, 5, 6]), s.clone());
        let a = generate(&p, &req).unwrap();
        assert_eq!(a, generate(&p, &req).unwrap());
        assert!(a.tokens.iter().all(|t| t.len() == 6));
        assert!(a.finish.iter().all(|f| *f == FinishReason::Budget));

        let greedy =
            GenerationRequest::new(Prompt::Shared(vec![4, 5, 6]), SamplingConfig::greedy(2, 1));
        let (_, logits) = prefill(&p, &greedy).unwrap();
        let g = generate(&p, &greedy).unwrap();
        for lane in 0..2 {
            assert_eq!(g.tokens[lane], vec![argmax(logits.row(lane)).unwrap()]);
        }
    }

    #[test]
    fn finished_lane_stays_visible() {
        let p = lane_model(0.0, 2);
        let prompt = vec![8, 9, 10];
        let probe = generate(
            &p,
            &GenerationRequest::new(Prompt::Shared(prompt.clone()), SamplingConfig::greedy(2, 5)),
        )
        .unwrap();
        // Declare lane 0's third token the end-of-sequence token.
        let eos = probe.tokens[0][2];
        let mut s = SamplingConfig::greedy(2, 5);
        s.eos = Some(eos);
        let res = generate(&p, &GenerationRequest::new(Prompt::Shared(prompt), s)).unwrap();
        let stop = res.tokens[0].iter().position(|&t| t == eos).unwrap();
        assert_eq!(res.tokens[0].len(), stop + 1);
        assert_eq!(res.finish[0], FinishReason::Eos);
        if !res.tokens[1].contains(&eos) {
            assert_eq!(res.tokens[1].len(), 5);
        }
    }

    #[test]
    fn run_batch_groups_and_isolation() {
        let p = lane_model(2.0, 4);
        let mut s = SamplingConfig::new(4, 3);
        s.max_new_tokens = 4;
        let queries = vec![
            Query {
                query_id: 10,
                prompt: Prompt::Shared(vec![1, 2]),
                expected: Some(3),
            },
            Query {
                query_id: 11,
                prompt: Prompt::Shared(vec![5, 6]),
                expected: None,
            },
        ];
        let out = run_batch(&p, &queries, 16, &s, 1).unwrap();
        assert_eq!(out.len(), 32);
        assert_eq!(
            out.iter()
                .filter(|r| r.query_id == 10)
                .map(|r| r.group_id)
                .max(),
            Some(3)
        );
        assert_eq!(run_batch(&p, &queries, 16, &s, 3).unwrap(), out);
        assert!(run_batch(&p, &queries, 6, &s, 1).is_err());
        let one = run_batch(&p, &queries, 4, &s, 1).unwrap();
        assert!(one.iter().all(|r| r.group_id == 0));

        // Changing another query's prompt leaves query 10's groups untouched.
        let mut other = queries.clone();
        other[1].prompt = Prompt::Shared(vec![40, 41]);
        let alt = run_batch(&p, &other, 16, &s, 2).unwrap();
        assert_eq!(alt[..16], out[..16]);
    }
}
