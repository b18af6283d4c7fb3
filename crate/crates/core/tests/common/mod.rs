//! Brute-force reimplementations used as test oracles. They share no code
//! with the library beyond its data types.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::path::Path;

use moe_budget::moe::{Expert, MoELayerWeights, RouterWeights, RoutingRecord};
use moe_budget::numerics::{Mat, Rng};

pub fn random_layer(rng: &mut Rng, n: usize, k: usize, d: usize, renormalize: bool) -> MoELayerWeights {
    let router = RouterWeights {
        w: Mat::gaussian(n, d, 1.0, rng),
        bias: (0..n).map(|_| 0.5 * rng.normal()).collect(),
    };
    let experts = (0..n).map(|_| Expert::random(d, 2 * d, rng)).collect();
    MoELayerWeights::new(router, experts, k, renormalize).unwrap()
}

pub fn random_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in logits {
        if x > m {
            m = x;
        }
    }
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let mut z = 0.0;
    for e in &exps {
        z += e;
    }
    exps.iter().map(|e| e / z).collect()
}

/// Indices sorted by descending score, ties to the lower index.
pub fn naive_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn naive_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    naive_ranking(scores).into_iter().take(k).collect()
}

pub fn naive_probs(layer: &MoELayerWeights, h: &[f64]) -> Vec<f64> {
    let w = &layer.router.w;
    let mut logits = vec![0.0; w.rows];
    for (i, l) in logits.iter_mut().enumerate() {
        let mut s = layer.router.bias[i];
        for (j, x) in h.iter().enumerate() {
            s += w.data[i * w.cols + j] * x;
        }
        *l = s;
    }
    naive_softmax(&logits)
}

pub fn naive_expert(e: &Expert, h: &[f64]) -> Vec<f64> {
    let (d, d_ff) = (e.w_in.rows, e.w_in.cols);
    let mut inner = vec![0.0; d_ff];
    for (i, v) in inner.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..d {
            s += h[j] * e.w_in.data[j * d_ff + i];
        }
        *v = s / (1.0 + (-s).exp());
    }
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        for j in 0..d_ff {
            *o += inner[j] * e.w_out.data[j * d + i];
        }
    }
    out
}

/// `sum_j weights_j E_j(h)`.
pub fn naive_mix(layer: &MoELayerWeights, h: &[f64], weights: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for &(j, g) in weights {
        let e = naive_expert(&layer.experts[j], h);
        for (o, v) in out.iter_mut().zip(e) {
            *o += g * v;
        }
    }
    out
}

/// Weights over `set`, renormalized over `set` when asked.
pub fn naive_weights(probs: &[f64], set: &[usize], renormalize: bool) -> Vec<(usize, f64)> {
    let total: f64 = set.iter().map(|&j| probs[j]).sum();
    set.iter()
        .map(|&j| (j, if renormalize { probs[j] / total } else { probs[j] }))
        .collect()
}

pub fn naive_full(layer: &MoELayerWeights, h: &[f64]) -> Vec<f64> {
    let probs = naive_probs(layer, h);
    let top = naive_top_k(&probs, layer.top_k);
    naive_mix(layer, h, &naive_weights(&probs, &top, layer.renormalize))
}

pub fn naive_union(records: &[RoutingRecord]) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    for r in records {
        for &i in &r.selected {
            s.insert(i);
        }
    }
    s
}

/// Experts ranked by summed probability over the tokens.
pub fn naive_router_shortlist(records: &[RoutingRecord], budget: usize) -> Vec<usize> {
    let n = records[0].probs.len();
    let mut agg = vec![0.0; n];
    for r in records {
        for i in 0..n {
            agg[i] += r.probs[i];
        }
    }
    naive_top_k(&agg, budget.min(n))
}

pub fn naive_truncation(layer: &MoELayerWeights, h: &[f64], record: &RoutingRecord, shortlist: &[usize]) -> Vec<f64> {
    let full = naive_weights(&record.probs, &record.selected, layer.renormalize);
    let kept: Vec<(usize, f64)> = full.into_iter().filter(|(j, _)| shortlist.contains(j)).collect();
    naive_mix(layer, h, &kept)
}

pub fn naive_substitution(layer: &MoELayerWeights, h: &[f64], record: &RoutingRecord, shortlist: &[usize]) -> Vec<f64> {
    let mut cand: Vec<usize> = shortlist.to_vec();
    cand.sort_by(|&a, &b| record.probs[b].total_cmp(&record.probs[a]).then(a.cmp(&b)));
    cand.truncate(record.selected.len());
    naive_mix(layer, h, &naive_weights(&record.probs, &cand, layer.renormalize))
}

/// Per-token oracle weight on every expert: raw probabilities, or scaled by
/// the inverse top-k mass on renormalizing layers when not using raw g.
pub fn naive_oracle_weights(layer: &MoELayerWeights, record: &RoutingRecord, uses_raw_g: bool) -> Vec<f64> {
    let mass: f64 = record.selected.iter().map(|&j| record.probs[j]).sum();
    let scale = if !uses_raw_g && layer.renormalize { 1.0 / mass } else { 1.0 };
    record.probs.iter().map(|p| p * scale).collect()
}

/// Summed squared distance between the full output and the oracle-weighted
/// sum over `subset`, recomputed from scratch.
pub fn naive_subset_residual(
    layer: &MoELayerWeights,
    inputs: &[Vec<f64>],
    records: &[RoutingRecord],
    subset: &[usize],
    uses_raw_g: bool,
) -> f64 {
    let mut total = 0.0;
    for (h, r) in inputs.iter().zip(records) {
        let gold = naive_mix(layer, h, &naive_weights(&r.probs, &r.selected, layer.renormalize));
        let w = naive_oracle_weights(layer, r, uses_raw_g);
        let mix: Vec<(usize, f64)> = subset.iter().map(|&j| (j, w[j])).collect();
        let approx = naive_mix(layer, h, &mix);
        for (a, b) in gold.iter().zip(&approx) {
            total += (a - b) * (a - b);
        }
    }
    total
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Routing records from the layer's own router on random inputs.
pub fn routed_tokens(rng: &mut Rng, layer: &MoELayerWeights, tokens: usize) -> (Vec<Vec<f64>>, Vec<RoutingRecord>) {
    let d = layer.dim();
    let inputs: Vec<Vec<f64>> = (0..tokens).map(|_| random_vec(rng, d)).collect();
    let records = inputs
        .iter()
        .map(|h| {
            let probs = naive_probs(layer, h);
            let selected = naive_top_k(&probs, layer.top_k);
            RoutingRecord { probs, selected }
        })
        .collect();
    (inputs, records)
}

/// Data rows of a result CSV, skipping `#` header lines.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let headers = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (headers, rows)
}

pub fn header_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(str::to_string)
        .collect()
}
