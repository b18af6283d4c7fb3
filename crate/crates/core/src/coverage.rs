//! Budgeted MoE execution under a shortlist: truncation and substitution.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::budget::{all_expert_outputs, rank_oracle_cached, Ranker, Shortlist};
use crate::error::{Error, Result};
use crate::model::{BatchOutput, MoEModel, MoeExecutor, PrefixCache, TreeSession};
use crate::moe::{mix_experts, mix_experts_batch, mixing_weights, MoELayerWeights, RoutingRecord};
use crate::numerics::{axpy, top_k_within};
use crate::tree::DraftTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoveragePolicy {
    /// Drop missing experts; keep the original mixing weights.
    Truncation,
    /// Re-select the top-k inside the shortlist.
    Substitution,
}

impl CoveragePolicy {
    pub const ALL: [CoveragePolicy; 2] = [CoveragePolicy::Truncation, CoveragePolicy::Substitution];

    pub fn as_str(self) -> &'static str {
        match self {
            CoveragePolicy::Truncation => "truncation",
            CoveragePolicy::Substitution => "substitution",
        }
    }
}

impl fmt::Display for CoveragePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoveragePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncation" => Ok(CoveragePolicy::Truncation),
            "substitution" => Ok(CoveragePolicy::Substitution),
            other => Err(Error::config("policy", format!("unknown policy `{other}`"))),
        }
    }
}

/// How one token fared under a shortlist.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCoverageStats {
    /// Natural top-k experts outside the shortlist.
    pub missing_count: usize,
    /// No natural expert survived.
    pub fully_skipped: bool,
    /// Experts actually mixed for this token.
    pub applied: usize,
}

/// Mixing weights a token uses under `policy` and shortlist membership
/// `in_shortlist`.
pub fn budgeted_mixing(
    layer: &MoELayerWeights,
    record: &RoutingRecord,
    shortlist: &[usize],
    in_shortlist: &[bool],
    policy: CoveragePolicy,
) -> Result<(Vec<(usize, f64)>, TokenCoverageStats)> {
    if shortlist.is_empty() {
        return Err(Error::usage("empty shortlist"));
    }
    let covered = record.selected.iter().filter(|&&i| in_shortlist[i]).count();
    let missing_count = record.k() - covered;
    let weights = match policy {
        CoveragePolicy::Truncation => {
            let full = mixing_weights(record, &record.selected, layer.renormalize)?;
            full.into_iter().filter(|&(i, _)| in_shortlist[i]).collect()
        }
        CoveragePolicy::Substitution => {
            let chosen = top_k_within(&record.probs, shortlist, record.k());
            mixing_weights(record, &chosen, layer.renormalize)?
        }
    };
    let stats = TokenCoverageStats {
        missing_count,
        fully_skipped: covered == 0,
        applied: weights.len(),
    };
    Ok((weights, stats))
}

/// Budgeted layer output for one routed token.
pub fn moe_forward_budgeted(
    layer: &MoELayerWeights,
    h: &[f64],
    record: &RoutingRecord,
    shortlist: &Shortlist,
    policy: CoveragePolicy,
) -> Result<(Vec<f64>, TokenCoverageStats)> {
    let mask = shortlist.mask(layer.num_experts());
    let (weights, stats) = budgeted_mixing(layer, record, &shortlist.experts, &mask, policy)?;
    Ok((mix_experts(layer, h, &weights), stats))
}

/// Where a budgeted executor gets its per-layer shortlists from.
#[derive(Clone, Debug)]
pub enum ShortlistSource<'a> {
    Fixed(Vec<Shortlist>),
    Ranked { ranker: Ranker<'a>, budget: usize },
}

/// MoE executor that enforces a shortlist per layer and records what it did.
#[derive(Clone, Debug)]
pub struct BudgetedMoe<'a> {
    source: ShortlistSource<'a>,
    policy: CoveragePolicy,
    /// Shortlist applied at each layer, in layer order.
    pub shortlists: Vec<Shortlist>,
    /// Per-layer, per-token coverage.
    pub stats: Vec<Vec<TokenCoverageStats>>,
    /// Experts whose outputs were actually mixed, per layer.
    pub executed: Vec<BTreeSet<usize>>,
}

impl<'a> BudgetedMoe<'a> {
    pub fn new(source: ShortlistSource<'a>, policy: CoveragePolicy) -> Self {
        BudgetedMoe {
            source,
            policy,
            shortlists: Vec::new(),
            stats: Vec::new(),
            executed: Vec::new(),
        }
    }

    pub fn policy(&self) -> CoveragePolicy {
        self.policy
    }
}

impl MoeExecutor for BudgetedMoe<'_> {
    fn execute(
        &mut self,
        layer: usize,
        weights: &MoELayerWeights,
        inputs: &[Vec<f64>],
        records: &[RoutingRecord],
    ) -> Result<Vec<Vec<f64>>> {
        // the oracle evaluates every expert anyway; mixing reuses those outputs
        let mut cached = None;
        let shortlist = match &self.source {
            ShortlistSource::Fixed(lists) => lists
                .iter()
                .find(|s| s.layer == layer)
                .cloned()
                .ok_or_else(|| Error::usage(format!("no shortlist for layer {layer}")))?,
            ShortlistSource::Ranked {
                ranker: Ranker::Oracle { uses_raw_g },
                budget,
            } => {
                let outputs = all_expert_outputs(weights, inputs);
                let s = rank_oracle_cached(layer, weights, records, &outputs, *budget, *uses_raw_g)?.shortlist;
                cached = Some(outputs);
                s
            }
            ShortlistSource::Ranked { ranker, budget } => {
                ranker.shortlist(layer, weights, inputs, records, *budget)?
            }
        };
        let mask = shortlist.mask(weights.num_experts());
        let mut executed = BTreeSet::new();
        let mut stats = Vec::with_capacity(inputs.len());
        let mut mixes = Vec::with_capacity(inputs.len());
        for r in records {
            let (w, s) = budgeted_mixing(weights, r, &shortlist.experts, &mask, self.policy)?;
            executed.extend(w.iter().map(|x| x.0));
            mixes.push(w);
            stats.push(s);
        }
        let out = match &cached {
            Some(outputs) => mixes
                .iter()
                .zip(outputs)
                .map(|(w, outputs)| {
                    let mut o = vec![0.0; weights.dim()];
                    for &(i, g) in w {
                        axpy(&mut o, g, &outputs[i]);
                    }
                    o
                })
                .collect(),
            None => mix_experts_batch(weights, inputs, &mixes),
        };
        self.shortlists.push(shortlist);
        self.stats.push(stats);
        self.executed.push(executed);
        Ok(out)
    }
}

/// Output of a budgeted forward over a tree.
#[derive(Clone, Debug)]
pub struct BudgetedForward {
    pub output: BatchOutput,
    pub shortlists: Vec<Shortlist>,
    pub stats: Vec<Vec<TokenCoverageStats>>,
    pub executed: Vec<BTreeSet<usize>>,
}

/// Target forward over `tree` where every MoE sublayer runs budgeted. Routing
/// is computed on the budgeted stream's own hidden states.
pub fn tree_forward_budgeted(
    model: &MoEModel,
    prefix: &PrefixCache,
    tree: &DraftTree,
    source: ShortlistSource<'_>,
    policy: CoveragePolicy,
) -> Result<BudgetedForward> {
    let mut exec = BudgetedMoe::new(source, policy);
    let mut session = TreeSession::new(model, prefix);
    let nodes: Vec<(Option<usize>, usize)> = tree.nodes().iter().map(|n| (n.parent, n.token)).collect();
    let output = session.push(&nodes, &mut exec)?;
    Ok(BudgetedForward {
        output,
        shortlists: exec.shortlists,
        stats: exec.stats,
        executed: exec.executed,
    })
}

/// Budgeted forward with one fixed shortlist per layer.
pub fn model_forward_budgeted(
    model: &MoEModel,
    prefix: &PrefixCache,
    tree: &DraftTree,
    shortlists: &[Shortlist],
    policy: CoveragePolicy,
) -> Result<BudgetedForward> {
    for l in 0..model.num_layers() {
        if !shortlists.iter().any(|s| s.layer == l) {
            return Err(Error::usage(format!("no shortlist for layer {l}")));
        }
    }
    tree_forward_budgeted(model, prefix, tree, ShortlistSource::Fixed(shortlists.to_vec()), policy)
}
