//! Per-layer expert shortlists under a budget: static, router-based and
//! oracle-greedy ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_causal, MoEModel};
use crate::moe::{mix_experts, mixing_weights, MoELayerWeights, RoutingRecord};
use crate::numerics::{top_k_indices, Rng};
use crate::tree::random_prompt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Static,
    Router,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Static, Method::Router, Method::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Static => "static",
            Method::Router => "router",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Method::Static),
            "router" => Ok(Method::Router),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Budgeted expert subset for one layer. `experts` is sorted by descending
/// score, then ascending index; `scores[j]` is the score of `experts[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shortlist {
    pub layer: usize,
    pub method: Method,
    pub experts: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Shortlist {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Membership mask over `n` experts.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &e in &self.experts {
            if e < n {
                m[e] = true;
            }
        }
        m
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.experts.contains(&expert)
    }

    /// Every expert, for unbudgeted execution through the budgeted path.
    pub fn all(layer: usize, n: usize, method: Method) -> Self {
        Shortlist {
            layer,
            method,
            experts: (0..n).collect(),
            scores: vec![0.0; n],
        }
    }
}

fn clamp_budget(budget: usize, n: usize) -> Result<usize> {
    if budget == 0 {
        return Err(Error::usage("expert budget must be at least 1"));
    }
    if budget > n {
        log::warn!("budget {budget} exceeds {n} experts; clamping to {n}");
    }
    Ok(budget.min(n))
}

/// Top-B experts by score, with the lower-index tie rule.
pub fn shortlist_by_scores(layer: usize, method: Method, scores: &[f64], budget: usize) -> Result<Shortlist> {
    let b = clamp_budget(budget, scores.len())?;
    let experts = top_k_indices(scores, b)?;
    let scores = experts.iter().map(|&i| scores[i]).collect();
    Ok(Shortlist {
        layer,
        method,
        experts,
        scores,
    })
}

/// Selection frequencies from a calibration stream, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCounts {
    pub counts: Vec<Vec<u64>>,
    pub tokens: u64,
}

impl CalibrationCounts {
    pub fn empty(layers: usize, n: usize) -> Self {
        CalibrationCounts {
            counts: vec![vec![0; n]; layers],
            tokens: 0,
        }
    }

    /// Counts from routing records `[layer][token]`.
    pub fn from_records(layers: &[Vec<RoutingRecord>]) -> Result<Self> {
        let n = layers
            .first()
            .and_then(|l| l.first())
            .map(RoutingRecord::num_experts)
            .ok_or_else(|| Error::usage("no routing records"))?;
        let mut out = CalibrationCounts::empty(layers.len(), n);
        out.add_records(layers)?;
        Ok(out)
    }

    fn add_records(&mut self, layers: &[Vec<RoutingRecord>]) -> Result<()> {
        let tokens = layers.first().map_or(0, Vec::len);
        if layers.len() != self.counts.len() || layers.iter().any(|l| l.len() != tokens) {
            return Err(Error::usage("records must cover every layer for every token"));
        }
        for (counts, records) in self.counts.iter_mut().zip(layers) {
            for r in records {
                for &i in &r.selected {
                    counts[i] += 1;
                }
            }
        }
        self.tokens += tokens as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationCounts) -> Result<()> {
        if self.counts.len() != other.counts.len()
            || self.counts.iter().zip(&other.counts).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::usage("cannot merge counts of different shapes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.tokens += other.tokens;
        Ok(())
    }

    pub fn layer_scores(&self, layer: usize) -> Vec<f64> {
        self.counts[layer].iter().map(|&c| c as f64).collect()
    }
}

/// Runs every calibration sequence causally through `model` and counts how
/// often each expert lands in a token's top-k.
pub fn calibrate_static(model: &MoEModel, streams: &[Vec<usize>]) -> Result<CalibrationCounts> {
    if streams.iter().all(Vec::is_empty) {
        return Err(Error::usage("calibration stream is empty"));
    }
    let mut counts = CalibrationCounts::empty(model.num_layers(), model.num_experts());
    for s in streams.iter().filter(|s| !s.is_empty()) {
        let out = forward_causal(model, s)?;
        counts.add_records(&out.routing)?;
    }
    Ok(counts)
}

/// `total_tokens` calibration tokens as random sequences of `seq_len`, drawn
/// from substreams of `root`.
pub fn calibration_streams(root: &Rng, total_tokens: usize, seq_len: usize, vocab: usize) -> Vec<Vec<usize>> {
    let seq_len = seq_len.max(1);
    let mut out = Vec::new();
    let mut remaining = total_tokens;
    let mut i = 0u64;
    while remaining > 0 {
        let len = remaining.min(seq_len);
        out.push(random_prompt(&mut root.split(i), len, vocab));
        remaining -= len;
        i += 1;
    }
    out
}

pub fn rank_static(counts: &CalibrationCounts, layer: usize, budget: usize) -> Result<Shortlist> {
    if layer >= counts.counts.len() {
        return Err(Error::usage(format!("no calibration counts for layer {layer}")));
    }
    shortlist_by_scores(layer, Method::Static, &counts.layer_scores(layer), budget)
}

/// Aggregate routing probability per expert across the tree's tokens.
pub fn router_scores(records: &[RoutingRecord]) -> Vec<f64> {
    let n = records.first().map_or(0, RoutingRecord::num_experts);
    let mut s = vec![0.0; n];
    for r in records {
        for (acc, p) in s.iter_mut().zip(&r.probs) {
            *acc += p;
        }
    }
    s
}

pub fn rank_router(records: &[RoutingRecord], layer: usize, budget: usize) -> Result<Shortlist> {
    if records.is_empty() {
        return Err(Error::usage("router ranking needs at least one routed token"));
    }
    shortlist_by_scores(layer, Method::Router, &router_scores(records), budget)
}

/// `E_i(h_t)` for every token `t` and expert `i`: `[t][i]`.
pub fn all_expert_outputs(weights: &MoELayerWeights, inputs: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let rows: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(weights.num_experts()); inputs.len()];
    for e in &weights.experts {
        for (t, o) in e.forward_batch(&rows).into_iter().enumerate() {
            outputs[t].push(o);
        }
    }
    outputs
}

/// Unbudgeted layer output `O*_t` using the model's own mixing weights.
pub fn gold_outputs(
    weights: &MoELayerWeights,
    records: &[RoutingRecord],
    outputs: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .zip(outputs)
        .map(|(r, e)| {
            let w = mixing_weights(r, &r.selected, weights.renormalize)?;
            let d = e.first().map_or(0, Vec::len);
            let mut o = vec![0.0; d];
            for (i, g) in w {
                crate::numerics::axpy(&mut o, g, &e[i]);
            }
            Ok(o)
        })
        .collect()
}

/// Per-token, per-expert weight used in the oracle reconstruction: raw
/// probabilities, or the model's mixing scale applied to every expert.
pub fn oracle_weights(weights: &MoELayerWeights, records: &[RoutingRecord], uses_raw_g: bool) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let scale = if !uses_raw_g && weights.renormalize {
                1.0 / r.selected_mass()
            } else {
                1.0
            };
            r.probs.iter().map(|p| p * scale).collect()
        })
        .collect()
}

/// Result of greedy oracle selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSelection {
    pub shortlist: Shortlist,
    /// Experts in the order they were picked.
    pub order: Vec<usize>,
    /// Total squared residual right after each pick.
    pub residuals: Vec<f64>,
}

/// `sum_j (r_j - w e_j)^2` with four independent accumulators.
#[inline(always)]
fn scaled_sq_dist(r: &[f64], w: f64, e: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let cr = r.chunks_exact(4);
    let ce = e.chunks_exact(4);
    let (rr, re) = (cr.remainder(), ce.remainder());
    for (x, y) in cr.zip(ce) {
        for j in 0..4 {
            let diff = x[j] - w * y[j];
            acc[j] += diff * diff;
        }
    }
    let mut tail = 0.0;
    for (x, y) in rr.iter().zip(re) {
        let diff = x - w * y;
        tail += diff * diff;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Summed residual over tokens of `d` values each if the candidate with
/// outputs `e` and per-token weights `w` joins the set.
fn candidate_total(resid: &[f64], w: &[f64], e: &[f64], d: usize) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked just above.
        return unsafe { candidate_total_avx(resid, w, e, d) };
    }
    candidate_total_portable(resid, w, e, d)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn candidate_total_avx(resid: &[f64], w: &[f64], e: &[f64], d: usize) -> f64 {
    candidate_total_portable(resid, w, e, d)
}

#[inline(always)]
fn candidate_total_portable(resid: &[f64], w: &[f64], e: &[f64], d: usize) -> f64 {
    let mut total = 0.0;
    for ((r, e), &wt) in resid.chunks_exact(d).zip(e.chunks_exact(d)).zip(w) {
        total += scaled_sq_dist(r, wt, e);
    }
    total
}

/// Greedy reconstruction-error minimization against the unbudgeted output.
/// Each step adds the expert whose inclusion gives the smallest summed
/// squared residual; ties go to the lower index. The residual may rise when
/// every remaining candidate overshoots; the trace records it as is.
pub fn rank_oracle(
    layer: usize,
    weights: &MoELayerWeights,
    inputs: &[Vec<f64>],
    records: &[RoutingRecord],
    budget: usize,
    uses_raw_g: bool,
) -> Result<OracleSelection> {
    let outputs = all_expert_outputs(weights, inputs);
    rank_oracle_cached(layer, weights, records, &outputs, budget, uses_raw_g)
}

/// [`rank_oracle`] over precomputed expert outputs `[t][i]`.
pub fn rank_oracle_cached(
    layer: usize,
    weights: &MoELayerWeights,
    records: &[RoutingRecord],
    outputs: &[Vec<Vec<f64>>],
    budget: usize,
    uses_raw_g: bool,
) -> Result<OracleSelection> {
    if records.is_empty() || records.len() != outputs.len() {
        return Err(Error::usage("oracle needs one expert-output set per routed token"));
    }
    let n = weights.num_experts();
    let b = clamp_budget(budget, n)?;
    let gold = gold_outputs(weights, records, outputs)?;
    let w = oracle_weights(weights, records, uses_raw_g);
    let d = weights.dim();
    // expert-major copies so each candidate scan reads contiguous memory
    let per_expert: Vec<Vec<f64>> = (0..n)
        .map(|i| outputs.iter().flat_map(|o| o[i].iter().copied()).collect())
        .collect();
    let w: Vec<Vec<f64>> = (0..n).map(|i| w.iter().map(|wt| wt[i]).collect()).collect();
    // residual r_t = O*_t - sum_{j in S} w_tj E_tj, token-major
    let mut resid: Vec<f64> = gold.concat();
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(b);
    let mut residuals = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            let total = candidate_total(&resid, &w[i], &per_expert[i], d);
            if best.is_none_or(|(_, v)| total < v) {
                best = Some((i, total));
            }
        }
        let (pick, value) = best.expect("candidates remain while picks < N");
        chosen[pick] = true;
        for ((r, e), &wt) in resid.chunks_exact_mut(d).zip(per_expert[pick].chunks_exact(d)).zip(&w[pick]) {
            for (r, e) in r.iter_mut().zip(e) {
                *r -= wt * e;
            }
        }
        order.push(pick);
        residuals.push(value);
    }
    let mut ranked: Vec<(usize, f64)> = order.iter().copied().zip(residuals.iter().map(|r| -r)).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(OracleSelection {
        shortlist: Shortlist {
            layer,
            method: Method::Oracle,
            experts: ranked.iter().map(|x| x.0).collect(),
            scores: ranked.iter().map(|x| x.1).collect(),
        },
        order,
        residuals,
    })
}

/// Summed squared reconstruction residual of the weighted sum over `subset`.
/// Used to audit oracle picks.
pub fn subset_residual(
    weights: &MoELayerWeights,
    inputs: &[Vec<f64>],
    records: &[RoutingRecord],
    subset: &[usize],
    uses_raw_g: bool,
) -> Result<f64> {
    let outputs = all_expert_outputs(weights, inputs);
    let gold = gold_outputs(weights, records, &outputs)?;
    let w = oracle_weights(weights, records, uses_raw_g);
    let mut total = 0.0;
    for (t, h) in inputs.iter().enumerate() {
        let mix: Vec<(usize, f64)> = subset.iter().map(|&j| (j, w[t][j])).collect();
        let approx = mix_experts(weights, h, &mix);
        total += crate::numerics::sq_dist(&gold[t], &approx);
    }
    Ok(total)
}

/// A ranking strategy bound to whatever state it needs.
#[derive(Clone, Copy, Debug)]
pub enum Ranker<'a> {
    Static(&'a CalibrationCounts),
    Router,
    Oracle { uses_raw_g: bool },
}

impl Ranker<'_> {
    pub fn method(&self) -> Method {
        match self {
            Ranker::Static(_) => Method::Static,
            Ranker::Router => Method::Router,
            Ranker::Oracle { .. } => Method::Oracle,
        }
    }

    pub fn shortlist(
        &self,
        layer: usize,
        weights: &MoELayerWeights,
        inputs: &[Vec<f64>],
        records: &[RoutingRecord],
        budget: usize,
    ) -> Result<Shortlist> {
        match *self {
            Ranker::Static(counts) => rank_static(counts, layer, budget),
            Ranker::Router => rank_router(records, layer, budget),
            Ranker::Oracle { uses_raw_g } => {
                Ok(rank_oracle(layer, weights, inputs, records, budget, uses_raw_g)?.shortlist)
            }
        }
    }
}
