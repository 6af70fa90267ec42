//! Cross-lane causal attention.
//!
//! A group of `N` lanes is flattened step-major, lane-minor: token `(lane m,
//! step i)` precedes `(n, j)` whenever `(i, m) < (j, n)`. With that order every
//! key at an earlier step sits in a prefix of the flat sequence, which is what
//! [`visible_keys`] exploits. [`dense_oracle_attention`] ignores the ordering
//! entirely and checks [`visible`] on every pair.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rope::{self, LaneRopeParams};
use crate::tensor::{dot, softmax_in_place, Matrix};

/// Grid coordinate of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub lane: usize,
    pub step: usize,
}

impl Coord {
    pub fn new(lane: usize, step: usize) -> Self {
        Self { lane, step }
    }

    fn order_key(self) -> (usize, usize) {
        (self.step, self.lane)
    }
}

/// Placement of every token of a group on the (lane, step) grid, in flat order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneLayout {
    pub group_size: usize,
    pub coords: Vec<Coord>,
    pub per_lane_len: Vec<usize>,
    /// First step of each lane; zero unless the prompt is shared.
    pub lane_start: Vec<usize>,
    pub prompt_len: usize,
}

impl LaneLayout {
    pub fn empty(group_size: usize, prompt_len: usize) -> Self {
        Self {
            group_size,
            coords: Vec::new(),
            per_lane_len: vec![0; group_size],
            lane_start: vec![0; group_size],
            prompt_len,
        }
    }

    /// Lanes starting at step 0 with the given lengths.
    pub fn from_lane_lengths(lengths: &[usize], prompt_len: usize) -> Result<Self> {
        Self::from_spans(&vec![0; lengths.len()], lengths, prompt_len)
    }

    /// Every lane holds `steps` tokens.
    pub fn rectangular(group_size: usize, steps: usize) -> Result<Self> {
        Self::from_lane_lengths(&vec![steps; group_size], 0)
    }

    /// Lane `m` occupies steps `starts[m] .. starts[m] + lengths[m]`.
    pub fn from_spans(starts: &[usize], lengths: &[usize], prompt_len: usize) -> Result<Self> {
        if lengths.is_empty() {
            return invalid("a layout needs at least one lane");
        }
        if starts.len() != lengths.len() {
            return invalid("lane starts and lengths differ in count");
        }
        let mut coords: Vec<Coord> = lengths
            .iter()
            .zip(starts)
            .enumerate()
            .flat_map(|(lane, (&len, &start))| {
                (start..start + len).map(move |s| Coord::new(lane, s))
            })
            .collect();
        coords.sort_by_key(|c| c.order_key());
        Ok(Self {
            group_size: lengths.len(),
            coords,
            per_lane_len: lengths.to_vec(),
            lane_start: starts.to_vec(),
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Appends a token; it must follow every existing token in flat order and
    /// extend its lane contiguously.
    pub fn push(&mut self, coord: Coord) -> Result<usize> {
        if coord.lane >= self.group_size {
            return invalid(format!(
                "lane {} outside group of {}",
                coord.lane, self.group_size
            ));
        }
        if let Some(last) = self.coords.last() {
            if coord.order_key() <= last.order_key() {
                return invalid(format!("{coord:?} does not follow {last:?} in flat order"));
            }
        }
        let lane = coord.lane;
        if self.per_lane_len[lane] == 0 {
            self.lane_start[lane] = coord.step;
        } else if coord.step != self.lane_start[lane] + self.per_lane_len[lane] {
            return invalid(format!(
                "lane {lane} is not contiguous at step {}",
                coord.step
            ));
        }
        self.per_lane_len[lane] += 1;
        self.coords.push(coord);
        Ok(self.coords.len() - 1)
    }

    /// Number of tokens whose step is strictly below `step`.
    pub fn step_start(&self, step: usize) -> usize {
        self.coords.partition_point(|c| c.step < step)
    }

    pub fn index_of(&self, coord: Coord) -> Option<usize> {
        self.coords
            .binary_search_by_key(&coord.order_key(), |c| c.order_key())
            .ok()
    }

    /// Flat indices of one lane, in step order.
    pub fn lane_indices(&self, lane: usize) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(_, c)| c.lane == lane)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_lane_len.len() != self.group_size || self.lane_start.len() != self.group_size {
            return invalid("per-lane tables do not match group size");
        }
        let rebuilt = Self::from_spans(&self.lane_start, &self.per_lane_len, self.prompt_len)?;
        if rebuilt.coords != self.coords {
            return invalid("coordinates are not the interleaved order of the lane spans");
        }
        Ok(())
    }
}

/// Which cross-lane pairs may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    /// When false, lanes attend only to themselves.
    pub cross_lane: bool,
    /// When true, a query also sees lower-indexed lanes at its own step.
    pub same_step_cross_lane_visible: bool,
}

impl Default for MaskRule {
    fn default() -> Self {
        Self {
            cross_lane: true,
            same_step_cross_lane_visible: false,
        }
    }
}

impl MaskRule {
    pub fn within_lane() -> Self {
        Self {
            cross_lane: false,
            same_step_cross_lane_visible: false,
        }
    }

    /// Visibility of a single interleaved causal sequence.
    pub fn interleaved() -> Self {
        Self {
            cross_lane: true,
            same_step_cross_lane_visible: true,
        }
    }
}

/// Whether the token at `key` is visible from the token at `query`.
pub fn visible(query: Coord, key: Coord, rule: MaskRule) -> bool {
    if key.lane == query.lane {
        return key.step <= query.step;
    }
    if !rule.cross_lane {
        return false;
    }
    if rule.same_step_cross_lane_visible {
        key.step < query.step || (key.step == query.step && key.lane < query.lane)
    } else {
        key.step < query.step
    }
}

/// Indices of the keys visible from the token at flat index `query` of `layout`.
pub fn visible_keys(layout: &LaneLayout, query: usize, rule: MaskRule) -> Vec<usize> {
    let q = layout.coords[query];
    let earlier = layout.step_start(q.step);
    let mut out = Vec::with_capacity(query + 1);
    if rule.cross_lane {
        out.extend(0..earlier);
    } else {
        out.extend((0..earlier).filter(|&k| layout.coords[k].lane == q.lane));
    }
    if rule.cross_lane && rule.same_step_cross_lane_visible {
        out.extend(earlier..query);
    }
    out.push(query);
    out
}

/// Softmax attention of one query row over the listed keys. Writes the output
/// into `out` and returns the attention probabilities aligned with `keys`.
pub(crate) fn attend(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    keys: &[usize],
    scale: f64,
    out: &mut [f64],
) -> Vec<f64> {
    let mut probs: Vec<f64> = keys.iter().map(|&s| dot(q, k.row(s)) * scale).collect();
    softmax_in_place(&mut probs);
    out.fill(0.0);
    for (&s, &p) in keys.iter().zip(&probs) {
        for (o, x) in out.iter_mut().zip(v.row(s)) {
            *o += p * x;
        }
    }
    probs
}

fn check_shapes(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &LaneLayout,
    qk_dim: usize,
) -> Result<()> {
    let n = layout.len();
    if q.rows != n || k.rows != n || v.rows != n {
        return invalid(format!(
            "attention inputs have {}/{}/{} rows for a layout of {n} tokens",
            q.rows, k.rows, v.rows
        ));
    }
    if q.cols != qk_dim || k.cols != qk_dim {
        return invalid(format!(
            "query/key width {}/{} differs from head_dim + bias_dim = {qk_dim}",
            q.cols, k.cols
        ));
    }
    Ok(())
}

/// Score scale `1 / sqrt(d)` using the rotary head width.
pub fn score_scale(lane: &LaneRopeParams) -> f64 {
    1.0 / (lane.head_dim() as f64).sqrt()
}

/// Applies the lane-aware rotation to raw query or key rows of width `d + F`:
/// the first `d` components by `theta * step + omega * lane`, the trailing `F`
/// by `2 pi * w_bias * lane`.
pub fn project_qk(raw: &Matrix, layout: &LaneLayout, lane: &LaneRopeParams) -> Result<Matrix> {
    let d = lane.head_dim();
    if raw.cols != d + lane.bias_dim || raw.rows != layout.len() {
        return invalid("raw projection does not match layout or lane parameters");
    }
    let mut out = raw.clone();
    for (r, c) in layout.coords.iter().enumerate() {
        let row = out.row_mut(r);
        rope::rotate_planes(&mut row[..d], &lane.rope_angles(c.step, c.lane));
        rope::rotate_planes(&mut row[d..], &lane.bias_angles(c.lane));
    }
    Ok(out)
}

/// Attention weights per query: `(key index, probability)` pairs.
pub fn cross_lane_attention_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &LaneLayout,
    lane: &LaneRopeParams,
    rule: MaskRule,
    rotate: bool,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let (_, weights) = run_attention(q, k, v, layout, lane, rule, rotate)?;
    Ok(weights)
}

/// Masked scaled-dot-product attention over a lane layout.
///
/// `rotate` applies [`project_qk`] to `q` and `k` first; pass `false` when they
/// already carry their rotations.
pub fn cross_lane_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &LaneLayout,
    lane: &LaneRopeParams,
    rule: MaskRule,
    rotate: bool,
) -> Result<Matrix> {
    let (out, _) = run_attention(q, k, v, layout, lane, rule, rotate)?;
    Ok(out)
}

type AttentionOutput = (Matrix, Vec<Vec<(usize, f64)>>);

fn run_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &LaneLayout,
    lane: &LaneRopeParams,
    rule: MaskRule,
    rotate: bool,
) -> Result<AttentionOutput> {
    lane.validate()?;
    check_shapes(q, k, v, layout, lane.head_dim() + lane.bias_dim)?;
    let (q, k) = if rotate {
        (project_qk(q, layout, lane)?, project_qk(k, layout, lane)?)
    } else {
        (q.clone(), k.clone())
    };
    let scale = score_scale(lane);
    let mut out = Matrix::zeros(layout.len(), v.cols);
    let mut weights = Vec::with_capacity(layout.len());
    for t in 0..layout.len() {
        let keys = visible_keys(layout, t, rule);
        let probs = attend(q.row(t), &k, v, &keys, scale, out.row_mut(t));
        weights.push(keys.into_iter().zip(probs).collect());
    }
    Ok((out, weights))
}

/// Reference attention: explicit mask, explicit rotations, O(L^2) loops.
pub fn dense_oracle_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &LaneLayout,
    lane: &LaneRopeParams,
    rule: MaskRule,
    rotate: bool,
) -> Result<Matrix> {
    lane.validate()?;
    let d = lane.head_dim();
    let f = lane.bias_dim;
    check_shapes(q, k, v, layout, d + f)?;
    let n = layout.len();

    let place = |row: &[f64], c: Coord| -> Result<Vec<f64>> {
        if !rotate {
            return Ok(row.to_vec());
        }
        let mut r = rope::lane_rotate(&row[..d], c.step, c.lane, &lane.rope.theta, &lane.omega)?;
        let mut bias = row[d..].to_vec();
        for (t, w) in lane.bias_freqs.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * w * c.lane as f64;
            let (x, y) = (bias[2 * t], bias[2 * t + 1]);
            bias[2 * t] = a.cos() * x + a.sin() * y;
            bias[2 * t + 1] = -a.sin() * x + a.cos() * y;
        }
        r.extend(bias);
        Ok(r)
    };
    let qs: Vec<Vec<f64>> = (0..n)
        .map(|t| place(q.row(t), layout.coords[t]))
        .collect::<Result<_>>()?;
    let ks: Vec<Vec<f64>> = (0..n)
        .map(|t| place(k.row(t), layout.coords[t]))
        .collect::<Result<_>>()?;

    let mut mask = vec![vec![false; n]; n];
    for a in 0..n {
        for b in 0..n {
            mask[a][b] = visible(layout.coords[a], layout.coords[b], rule);
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(n, v.cols);
    for a in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; n];
        let mut any = false;
        for b in 0..n {
            if mask[a][b] {
                let mut s = 0.0;
                for c in 0..d + f {
                    s += qs[a][c] * ks[b][c];
                }
                scores[b] = s * scale;
                any = true;
            }
        }
        if !any {
            return Err(Error::ContractViolation(format!(
                "query {a} has no visible keys"
            )));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores
            .iter()
            .map(|&s| {
                if s == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s - max).exp()
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for b in 0..n {
            if weights[b] > 0.0 {
                for c in 0..v.cols {
                    out.data[a * v.cols + c] += weights[b] / total * v.data[b * v.cols + c];
                }
            }
        }
    }
    Ok(out)
}

/// Flattens per-lane sequences step-major, lane-minor.
pub fn interleave<T: Clone>(lanes: &[Vec<T>]) -> Result<(Vec<T>, LaneLayout)> {
    let lengths: Vec<usize> = lanes.iter().map(Vec::len).collect();
    let layout = LaneLayout::from_lane_lengths(&lengths, 0)?;
    let flat = layout
        .coords
        .iter()
        .map(|c| lanes[c.lane][c.step].clone())
        .collect();
    Ok((flat, layout))
}

/// Inverse of [`interleave`] for any layout.
pub fn deinterleave<T: Clone>(flat: &[T], layout: &LaneLayout) -> Result<Vec<Vec<T>>> {
    if flat.len() != layout.len() {
        return invalid(format!(
            "flat sequence has {} items but layout has {}",
            flat.len(),
            layout.len()
        ));
    }
    let mut lanes: Vec<Vec<T>> = layout
        .per_lane_len
        .iter()
        .map(|&n| Vec::with_capacity(n))
        .collect();
    for (item, c) in flat.iter().zip(&layout.coords) {
        if c.lane >= lanes.len() {
            return invalid(format!("coordinate lane {} outside group", c.lane));
        }
        lanes[c.lane].push(item.clone());
    }
    Ok(lanes)
}
