//! Reconstruction error, coverage curves, co-activation statistics and
//! quality/speedup tables.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::budget::{
    all_expert_outputs, gold_outputs, oracle_weights, rank_oracle_cached, rank_router, rank_static, router_scores,
    CalibrationCounts, Method, Shortlist,
};
use crate::coverage::{budgeted_mixing, CoveragePolicy};
use crate::error::{Error, Result};
use crate::model::{MoEModel, PrefixCache};
use crate::moe::{MoELayerWeights, RoutingRecord};
use crate::numerics::{axpy, rank_order, sq_dist, sq_norm, Rng};
use crate::sim::{CellSummary, Mode};
use crate::tree::{build_tree, target_tree_forward, TreeShape};

/// How the budgeted output is formed when measuring reconstruction error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ErrorMode {
    /// The output a coverage policy would produce.
    Policy { policy: CoveragePolicy },
    /// `sum_{j in S} w_tj E_j(h_t)` with the oracle's weights.
    Raw { uses_raw_g: bool },
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorMode::Policy { policy } => write!(f, "{policy}"),
            ErrorMode::Raw { uses_raw_g: true } => f.write_str("raw_g"),
            ErrorMode::Raw { uses_raw_g: false } => f.write_str("raw_mixing"),
        }
    }
}

/// Budgeted outputs `[t]` from cached expert outputs `[t][i]`.
fn budgeted_outputs(
    weights: &MoELayerWeights,
    records: &[RoutingRecord],
    outputs: &[Vec<Vec<f64>>],
    shortlist: &Shortlist,
    mode: ErrorMode,
) -> Result<Vec<Vec<f64>>> {
    let n = weights.num_experts();
    let d = weights.dim();
    let mask = shortlist.mask(n);
    let raw_w = match mode {
        ErrorMode::Raw { uses_raw_g } => Some(oracle_weights(weights, records, uses_raw_g)),
        ErrorMode::Policy { .. } => None,
    };
    records
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let mix: Vec<(usize, f64)> = match (mode, &raw_w) {
                (ErrorMode::Policy { policy }, _) => {
                    budgeted_mixing(weights, r, &shortlist.experts, &mask, policy)?.0
                }
                (ErrorMode::Raw { .. }, Some(w)) => shortlist.experts.iter().map(|&j| (j, w[t][j])).collect(),
                (ErrorMode::Raw { .. }, None) => unreachable!(),
            };
            let mut o = vec![0.0; d];
            for (i, g) in mix {
                axpy(&mut o, g, &outputs[t][i]);
            }
            Ok(o)
        })
        .collect()
}

fn normalized_error(gold: &[Vec<f64>], approx: &[Vec<f64>]) -> Result<f64> {
    let den: f64 = gold.iter().map(|o| sq_norm(o)).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("full MoE output is zero on every token".into()));
    }
    let num: f64 = gold.iter().zip(approx).map(|(g, a)| sq_dist(g, a)).sum();
    Ok(num / den)
}

/// `sum_t |O_S,t - O*_t|^2 / sum_t |O*_t|^2` for one layer, with MoE inputs
/// taken from the full model.
pub fn reconstruction_error(
    weights: &MoELayerWeights,
    inputs: &[Vec<f64>],
    records: &[RoutingRecord],
    shortlist: &Shortlist,
    mode: ErrorMode,
) -> Result<f64> {
    let outputs = all_expert_outputs(weights, inputs);
    reconstruction_error_cached(weights, records, &outputs, shortlist, mode)
}

pub fn reconstruction_error_cached(
    weights: &MoELayerWeights,
    records: &[RoutingRecord],
    outputs: &[Vec<Vec<f64>>],
    shortlist: &Shortlist,
    mode: ErrorMode,
) -> Result<f64> {
    if shortlist.is_empty() {
        return Err(Error::usage("empty shortlist"));
    }
    let gold = gold_outputs(weights, records, outputs)?;
    let approx = budgeted_outputs(weights, records, outputs, shortlist, mode)?;
    normalized_error(&gold, &approx)
}

/// One measurement of the reconstruction study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub tree: usize,
    pub method: Method,
    pub budget: usize,
    pub mode: ErrorMode,
    /// Mean over layers.
    pub error: f64,
    pub per_layer: Vec<f64>,
}

/// Inputs of a reconstruction study.
#[derive(Clone, Debug)]
pub struct ReconstructionSpec<'a> {
    pub target: &'a MoEModel,
    pub draft: &'a MoEModel,
    pub calibration: Option<&'a CalibrationCounts>,
    pub prompts: &'a [Vec<usize>],
    pub tree_size: usize,
    pub budgets: &'a [usize],
    pub methods: &'a [Method],
    pub modes: &'a [ErrorMode],
    pub uses_raw_g: bool,
}

/// Teacher-forced error of every (method, budget, mode) on one draft tree
/// per prompt.
pub fn reconstruction_study(spec: &ReconstructionSpec<'_>) -> Result<Vec<ReconstructionRow>> {
    let shape = TreeShape::for_size(spec.tree_size)?;
    let mut rows = Vec::new();
    for (tree_idx, prompt) in spec.prompts.iter().enumerate() {
        rows.extend(reconstruction_for_prompt(spec, &shape, tree_idx, prompt)?);
    }
    Ok(rows)
}

pub fn reconstruction_for_prompt(
    spec: &ReconstructionSpec<'_>,
    shape: &TreeShape,
    tree_idx: usize,
    prompt: &[usize],
) -> Result<Vec<ReconstructionRow>> {
    let target = spec.target;
    let dprefix = PrefixCache::new(spec.draft, prompt)?;
    let tprefix = PrefixCache::new(target, prompt)?;
    let tree = build_tree(spec.draft, &dprefix, shape)?;
    let (routing, out) = target_tree_forward(target, &tprefix, &tree)?;
    let layers = target.num_layers();
    let mut errors = vec![vec![vec![vec![0.0; layers]; spec.modes.len()]; spec.budgets.len()]; spec.methods.len()];
    for (l, block) in target.blocks.iter().enumerate() {
        let weights = &block.moe;
        let records = routing.layer(l);
        let outputs = all_expert_outputs(weights, &out.moe_inputs[l]);
        for (mi, &method) in spec.methods.iter().enumerate() {
            for (bi, &budget) in spec.budgets.iter().enumerate() {
                let shortlist = match method {
                    Method::Static => rank_static(
                        spec.calibration
                            .ok_or_else(|| Error::usage("static ranking needs calibration counts"))?,
                        l,
                        budget,
                    )?,
                    Method::Router => rank_router(records, l, budget)?,
                    Method::Oracle => {
                        rank_oracle_cached(l, weights, records, &outputs, budget, spec.uses_raw_g)?.shortlist
                    }
                };
                for (ei, &mode) in spec.modes.iter().enumerate() {
                    errors[mi][bi][ei][l] = reconstruction_error_cached(weights, records, &outputs, &shortlist, mode)?;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (mi, &method) in spec.methods.iter().enumerate() {
        for (bi, &budget) in spec.budgets.iter().enumerate() {
            for (ei, &mode) in spec.modes.iter().enumerate() {
                let per_layer = errors[mi][bi][ei].clone();
                rows.push(ReconstructionRow {
                    tree: tree_idx,
                    method,
                    budget,
                    mode,
                    error: per_layer.iter().sum::<f64>() / layers as f64,
                    per_layer,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean error per (method, budget, mode), in first-seen order.
pub fn mean_errors(rows: &[ReconstructionRow]) -> Vec<(Method, usize, ErrorMode, f64, usize)> {
    let mut out: Vec<(Method, usize, ErrorMode, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|x| x.0 == r.method && x.1 == r.budget && x.2 == r.mode) {
            Some(x) => {
                x.3 += r.error;
                x.4 += 1;
            }
            None => out.push((r.method, r.budget, r.mode, r.error, 1)),
        }
    }
    for x in &mut out {
        x.3 /= x.4 as f64;
    }
    out
}

/// Cumulative share of aggregate routing probability captured by the top-B
/// experts; `values[b - 1]` is the share at budget `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl CoverageCurve {
    pub fn at(&self, budget: usize) -> f64 {
        self.values[budget.clamp(1, self.values.len()) - 1]
    }
}

pub fn coverage_curve(records: &[RoutingRecord], layer: usize) -> Result<CoverageCurve> {
    if records.is_empty() {
        return Err(Error::usage("coverage curve needs at least one token"));
    }
    let scores = router_scores(records);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_order(&scores, a, b));
    let mut cumulative = Vec::with_capacity(scores.len());
    let mut acc = 0.0;
    for &i in &order {
        acc += scores[i];
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::Degenerate("no routing mass".into()));
    }
    Ok(CoverageCurve {
        layer,
        values: cumulative.into_iter().map(|c| c / acc).collect(),
    })
}

/// `k(k-1) / (N(N-1))` kept as an unreduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProbability {
    pub numerator: u64,
    pub denominator: u64,
}

impl PairProbability {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n < 2 || k > n {
            return Err(Error::usage("pair probability needs N >= 2 and k <= N"));
        }
        Ok(PairProbability {
            numerator: (k * k.saturating_sub(1)) as u64,
            denominator: (n * (n - 1)) as u64,
        })
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// Pairwise selection counts for one layer. The diagonal holds per-expert
/// selection counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoactivationMatrix {
    pub layer: usize,
    pub counts: Vec<Vec<u64>>,
    pub tokens: u64,
    pub k: usize,
}

impl CoactivationMatrix {
    pub fn new(layer: usize, n: usize, k: usize) -> Self {
        CoactivationMatrix {
            layer,
            counts: vec![vec![0; n]; n],
            tokens: 0,
            k,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, record: &RoutingRecord) -> Result<()> {
        if record.num_experts() != self.num_experts() {
            return Err(Error::usage("record has the wrong number of experts"));
        }
        for &i in &record.selected {
            for &j in &record.selected {
                self.counts[i][j] += 1;
            }
        }
        self.tokens += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CoactivationMatrix) -> Result<()> {
        if other.num_experts() != self.num_experts() {
            return Err(Error::usage("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.tokens += other.tokens;
        Ok(())
    }

    pub fn max_pair(&self) -> u64 {
        let n = self.num_experts();
        let mut m = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m = m.max(self.counts[i][j]);
                }
            }
        }
        m
    }

    pub fn pair_probability(&self) -> Result<PairProbability> {
        PairProbability::new(self.num_experts(), self.k)
    }

    /// Most frequent pair relative to its count under uniform random
    /// k-subsets.
    pub fn concentration(&self) -> Result<f64> {
        let p = self.pair_probability()?;
        if self.tokens == 0 || p.numerator == 0 {
            return Err(Error::Degenerate("no pairs observed".into()));
        }
        Ok(self.max_pair() as f64 * p.denominator as f64 / (self.tokens as f64 * p.numerator as f64))
    }
}

pub fn coactivation(records: &[RoutingRecord], layer: usize) -> Result<CoactivationMatrix> {
    let first = records.first().ok_or_else(|| Error::usage("co-activation needs at least one token"))?;
    let mut m = CoactivationMatrix::new(layer, first.num_experts(), first.k());
    for r in records {
        if r.k() != m.k {
            return Err(Error::usage("records disagree on k"));
        }
        m.add(r)?;
    }
    Ok(m)
}

/// Routing records whose selections are uniform random k-subsets.
pub fn uniform_random_records(rng: &mut Rng, tokens: usize, n: usize, k: usize) -> Result<Vec<RoutingRecord>> {
    if k == 0 || k > n {
        return Err(Error::usage("need 1 <= k <= N"));
    }
    let probs = vec![1.0 / n as f64; n];
    let mut pool: Vec<usize> = (0..n).collect();
    Ok((0..tokens)
        .map(|_| {
            for i in 0..k {
                let j = i + rng.below(n - i);
                pool.swap(i, j);
            }
            let mut selected = pool[..k].to_vec();
            selected.sort_unstable();
            RoutingRecord {
                probs: probs.clone(),
                selected,
            }
        })
        .collect())
}

/// Quality and speedup relative to AR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub label: String,
    pub tree_size: usize,
    pub mode: String,
    pub method: Option<Method>,
    pub policy: Option<CoveragePolicy>,
    pub budget: Option<usize>,
    /// Percent of AR quality.
    pub quality: f64,
    /// Multiple of AR speed.
    pub speedup: f64,
}

pub fn pareto_table(summaries: &[CellSummary]) -> Result<Vec<ParetoRow>> {
    let ar = summaries
        .iter()
        .find(|s| s.cell.mode == Mode::Ar)
        .ok_or_else(|| Error::usage("pareto table needs an AR baseline cell"))?;
    if ar.quality <= 0.0 || ar.speedup <= 0.0 {
        return Err(Error::Degenerate("AR baseline has zero quality or speed".into()));
    }
    let mut rows: Vec<ParetoRow> = summaries
        .iter()
        .map(|s| ParetoRow {
            label: s.cell.to_string(),
            tree_size: s.cell.tree_size,
            mode: s.cell.mode.name().to_string(),
            method: s.cell.mode.method(),
            policy: s.cell.mode.policy(),
            budget: s.cell.mode.budget(),
            quality: 100.0 * s.quality / ar.quality,
            speedup: s.speedup / ar.speedup,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.speedup
            .partial_cmp(&b.speedup)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{route, Expert, RouterWeights};
    use crate::numerics::Mat;
    use crate::sim::SweepCell;

    fn layer(n: usize, k: usize, d: usize, seed: u64) -> MoELayerWeights {
        let mut rng = Rng::new(seed);
        let router = RouterWeights {
            w: Mat::gaussian(n, d, 1.0, &mut rng),
            bias: vec![0.0; n],
        };
        let experts = (0..n).map(|_| Expert::random(d, 2 * d, &mut rng)).collect();
        MoELayerWeights::new(router, experts, k, true).unwrap()
    }

    fn inputs(m: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        (0..m).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    fn shortlist(experts: Vec<usize>) -> Shortlist {
        let scores = vec![0.0; experts.len()];
        Shortlist {
            layer: 0,
            method: Method::Router,
            experts,
            scores,
        }
    }

    #[test]
    fn all_experts_give_zero_error() {
        let l = layer(8, 2, 4, 1);
        let hs = inputs(5, 4, 2);
        let recs: Vec<RoutingRecord> = hs.iter().map(|h| route(&l, h).unwrap()).collect();
        for policy in CoveragePolicy::ALL {
            let e = reconstruction_error(&l, &hs, &recs, &shortlist((0..8).collect()), ErrorMode::Policy { policy }).unwrap();
            assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn fully_skipped_tokens_give_unit_error() {
        let l = layer(8, 2, 4, 1);
        let hs = inputs(1, 4, 2);
        let recs: Vec<RoutingRecord> = hs.iter().map(|h| route(&l, h).unwrap()).collect();
        let others: Vec<usize> = (0..8).filter(|i| !recs[0].selected.contains(i)).collect();
        let mode = ErrorMode::Policy {
            policy: CoveragePolicy::Truncation,
        };
        assert_eq!(reconstruction_error(&l, &hs, &recs, &shortlist(others), mode).unwrap(), 1.0);
    }

    #[test]
    fn zero_gold_is_degenerate() {
        let mut l = layer(4, 2, 4, 1);
        for e in &mut l.experts {
            e.w_out = Mat::zeros(8, 4);
        }
        let hs = inputs(2, 4, 2);
        let recs: Vec<RoutingRecord> = hs.iter().map(|h| route(&l, h).unwrap()).collect();
        let mode = ErrorMode::Raw { uses_raw_g: true };
        assert!(matches!(
            reconstruction_error(&l, &hs, &recs, &shortlist(vec![0]), mode),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn uniform_routing_coverage_is_linear() {
        let r = RoutingRecord::from_probs(vec![0.125; 8], 2).unwrap();
        let c = coverage_curve(&[r.clone(), r], 0).unwrap();
        for b in 1..=8 {
            assert!((c.at(b) - b as f64 / 8.0).abs() < 1e-9);
        }
        assert_eq!(c.at(8), 1.0);
    }

    #[test]
    fn pair_probability_olmoe() {
        let p = PairProbability::new(64, 8).unwrap();
        assert_eq!((p.numerator, p.denominator), (56, 4032));
        assert!((p.value() - 0.013_888_888_888_888_888).abs() < 1e-15);
    }

    #[test]
    fn single_token_concentration() {
        let r = RoutingRecord::from_probs((0..64).map(|i| (64 - i) as f64).collect(), 8).unwrap();
        let m = coactivation(&[r], 0).unwrap();
        assert_eq!(m.max_pair(), 1);
        assert!((m.concentration().unwrap() - 72.0).abs() < 1e-12);
    }

    #[test]
    fn coactivation_diagonal_and_symmetry() {
        let mut rng = Rng::new(4);
        let recs = uniform_random_records(&mut rng, 500, 16, 4).unwrap();
        let m = coactivation(&recs, 0).unwrap();
        let counts = CalibrationCounts::from_records(&[recs]).unwrap();
        for i in 0..16 {
            assert_eq!(m.counts[i][i], counts.counts[0][i]);
            for j in 0..16 {
                assert_eq!(m.counts[i][j], m.counts[j][i]);
                assert!(m.counts[i][j] <= m.tokens);
            }
        }
    }

    fn summary(mode: Mode, quality: f64, speedup: f64) -> CellSummary {
        CellSummary {
            cell: SweepCell { tree_size: 63, mode },
            seeds: 1,
            mean_tau: 1.0,
            std_tau: 0.0,
            mean_unique: 0.0,
            std_unique: 0.0,
            max_unique: 0,
            speedup,
            std_speedup: 0.0,
            quality,
            std_quality: 0.0,
        }
    }

    #[test]
    fn pareto_needs_baseline_and_sorts() {
        let full = summary(Mode::SpecFull, 1.0, 1.4);
        assert!(pareto_table(std::slice::from_ref(&full)).is_err());
        let b = summary(
            Mode::SpecBudgeted {
                method: Method::Router,
                policy: CoveragePolicy::Substitution,
                budget: 32,
            },
            0.9,
            1.7,
        );
        let rows = pareto_table(&[b, full, summary(Mode::Ar, 1.0, 1.0)]).unwrap();
        assert_eq!(rows[0].mode, "ar");
        assert_eq!((rows[0].quality, rows[0].speedup), (100.0, 1.0));
        assert_eq!(rows[1].quality, 100.0);
        assert!((rows[2].quality - 90.0).abs() < 1e-12);
    }
}
