//! Speculative generation loop, greedy verification and the bandwidth cost
//! model.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{CalibrationCounts, Method, Ranker, Shortlist};
use crate::coverage::{tree_forward_budgeted, CoveragePolicy, ShortlistSource, TokenCoverageStats};
use crate::error::{Error, Result};
use crate::model::{MoEModel, PrefixCache};
use crate::numerics::{argmax, mean, std_dev};
use crate::tree::{build_tree, expert_union, target_tree_forward, DraftTree, TreeShape};

/// Modeled memory traffic, in abstract cost units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    /// Loading one expert of one layer.
    pub bytes_expert: f64,
    /// Fixed per-step traffic: attention, embeddings, router, head.
    pub bytes_shared: f64,
    /// One draft forward (charged once per tree level).
    pub draft_step_cost: f64,
    /// Shortlist computation, as a fraction of the verify step.
    pub selection_overhead_frac: f64,
}

impl Default for CostModelParams {
    /// Produced by `examples/calibrate_cost.rs` on the default toy model.
    fn default() -> Self {
        CostModelParams {
            bytes_expert: 1.0,
            bytes_shared: 64.0,
            draft_step_cost: 14.5,
            selection_overhead_frac: 0.025,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cost.bytes_expert", self.bytes_expert),
            ("cost.bytes_shared", self.bytes_shared),
            ("cost.draft_step_cost", self.draft_step_cost),
            ("cost.selection_overhead_frac", self.selection_overhead_frac),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.bytes_expert + self.bytes_shared <= 0.0 {
            return Err(Error::config("cost", "a step must cost something"));
        }
        Ok(())
    }

    pub fn ar_step_cost(&self, layers: usize, k: usize) -> f64 {
        self.bytes_shared + (layers * k) as f64 * self.bytes_expert
    }

    pub fn verify_step_cost(&self, unique_experts: &[usize], budgeted: bool, depth: usize) -> f64 {
        let loads: usize = unique_experts.iter().sum();
        let mut c = self.bytes_shared + loads as f64 * self.bytes_expert;
        if budgeted {
            c *= 1.0 + self.selection_overhead_frac;
        }
        c + self.draft_step_cost * depth as f64
    }
}

/// Decoding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Ar,
    SpecFull,
    SpecBudgeted {
        method: Method,
        policy: CoveragePolicy,
        budget: usize,
    },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Ar => "ar",
            Mode::SpecFull => "spec_full",
            Mode::SpecBudgeted { .. } => "spec_budgeted",
        }
    }

    pub fn method(&self) -> Option<Method> {
        match self {
            Mode::SpecBudgeted { method, .. } => Some(*method),
            _ => None,
        }
    }

    pub fn policy(&self) -> Option<CoveragePolicy> {
        match self {
            Mode::SpecBudgeted { policy, .. } => Some(*policy),
            _ => None,
        }
    }

    pub fn budget(&self) -> Option<usize> {
        match self {
            Mode::SpecBudgeted { budget, .. } => Some(*budget),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::SpecBudgeted { method, policy, budget } => {
                write!(f, "spec_budgeted({method},{policy},{budget})")
            }
            other => f.write_str(other.name()),
        }
    }
}

/// One decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Accepted draft tokens plus the bonus token.
    pub tau: usize,
    /// Tokens actually appended (`tau` clipped at the generation length).
    pub emitted: usize,
    pub tree_size: usize,
    pub tree_depth: usize,
    /// Experts loaded per layer.
    pub unique_experts: Vec<usize>,
    pub method: Option<Method>,
    pub policy: Option<CoveragePolicy>,
    pub budget: Option<usize>,
    pub cost: f64,
    /// `[layer][node]`; empty for unbudgeted steps.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coverage: Vec<Vec<TokenCoverageStats>>,
}

impl StepReport {
    /// The same step with its cost recomputed under other parameters.
    pub fn priced(&self, cost: &CostModelParams, layers: usize, k: usize) -> StepReport {
        let c = if self.tree_depth == 0 {
            cost.ar_step_cost(layers, k)
        } else {
            cost.verify_step_cost(&self.unique_experts, self.method.is_some(), self.tree_depth)
        };
        StepReport {
            cost: c,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tokens: usize,
    pub steps: usize,
    pub mean_tau: f64,
    pub mean_unique_per_layer: Vec<f64>,
    pub mean_unique: f64,
    pub max_unique: usize,
    pub ar_cost_per_token: f64,
    pub cost_per_token: f64,
    pub speedup: f64,
    /// Informational only; never written to result files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Aggregates step reports. The speedup depends on nothing but the reports
/// and the cost parameters.
pub fn summarize(reports: &[StepReport], cost: &CostModelParams, layers: usize, k: usize) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::usage("no steps to summarize"));
    }
    let ar = cost.ar_step_cost(layers, k);
    let mut tokens = 0;
    let mut total = 0.0;
    let mut ar_total = 0.0;
    let mut per_layer = vec![0.0; layers];
    let mut max_unique = 0;
    for r in reports {
        tokens += r.emitted;
        total += r.cost;
        ar_total += ar * r.emitted as f64;
        for (acc, &u) in per_layer.iter_mut().zip(&r.unique_experts) {
            *acc += u as f64;
            max_unique = max_unique.max(u);
        }
    }
    let steps = reports.len();
    let mean_unique_per_layer: Vec<f64> = per_layer.iter().map(|s| s / steps as f64).collect();
    Ok(RunSummary {
        tokens,
        steps,
        mean_tau: reports.iter().map(|r| r.tau as f64).sum::<f64>() / steps as f64,
        mean_unique: mean(&mean_unique_per_layer),
        mean_unique_per_layer,
        max_unique,
        ar_cost_per_token: ar,
        cost_per_token: total / tokens as f64,
        speedup: ar_total / total,
        wall_clock_secs: 0.0,
    })
}

/// Result of verifying one tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// Accepted node indices, root first.
    pub path: Vec<usize>,
    /// Accepted tokens followed by the bonus token.
    pub tokens: Vec<usize>,
    pub bonus: usize,
    pub unique_experts: Vec<usize>,
    pub shortlists: Vec<Shortlist>,
    pub coverage: Vec<Vec<TokenCoverageStats>>,
}

impl Verification {
    pub fn tau(&self) -> usize {
        self.path.len() + 1
    }
}

/// Budget applied during verification.
#[derive(Clone, Copy, Debug)]
pub struct VerifyBudget<'a> {
    pub ranker: Ranker<'a>,
    pub budget: usize,
    pub policy: CoveragePolicy,
}

/// Greedy acceptance given the target's next-token logits at the context end
/// and at every tree node.
pub fn accept_greedy(tree: &DraftTree, context_logits: &[f64], node_logits: &[Vec<f64>]) -> (Vec<usize>, usize) {
    let nodes = tree.nodes();
    let mut accepted = vec![false; nodes.len()];
    let mut best: Option<usize> = None;
    let root_target = argmax(context_logits);
    for (i, n) in nodes.iter().enumerate() {
        let (ok_parent, expected) = match n.parent {
            None => (true, root_target),
            Some(p) => (accepted[p], argmax(&node_logits[p])),
        };
        accepted[i] = ok_parent && n.token == expected;
        if accepted[i] && best.is_none_or(|b| n.depth > nodes[b].depth) {
            best = Some(i);
        }
    }
    match best {
        Some(last) => (tree.path(last), argmax(&node_logits[last])),
        None => (Vec::new(), root_target),
    }
}

/// Verifies `tree` against the target, budgeted or not.
pub fn verify_greedy(
    target: &MoEModel,
    prefix: &PrefixCache,
    tree: &DraftTree,
    budget: Option<VerifyBudget<'_>>,
) -> Result<Verification> {
    let (logits, unique_experts, shortlists, coverage) = match budget {
        None => {
            let (routing, out) = target_tree_forward(target, prefix, tree)?;
            let unique = (0..routing.num_layers()).map(|l| expert_union(&routing, l).len()).collect();
            (out.logits, unique, Vec::new(), Vec::new())
        }
        Some(b) => {
            let source = ShortlistSource::Ranked {
                ranker: b.ranker,
                budget: b.budget,
            };
            let f = tree_forward_budgeted(target, prefix, tree, source, b.policy)?;
            let unique = f.executed.iter().map(|s| s.len()).collect();
            (f.output.logits, unique, f.shortlists, f.stats)
        }
    };
    let (path, bonus) = accept_greedy(tree, prefix.last_logits(), &logits);
    let mut tokens: Vec<usize> = path.iter().map(|&i| tree.nodes()[i].token).collect();
    tokens.push(bonus);
    Ok(Verification {
        path,
        tokens,
        bonus,
        unique_experts,
        shortlists,
        coverage,
    })
}

/// Everything a generation run needs besides the prompt.
#[derive(Clone, Copy, Debug)]
pub struct RunContext<'a> {
    pub target: &'a MoEModel,
    pub draft: &'a MoEModel,
    pub calibration: Option<&'a CalibrationCounts>,
    pub cost: CostModelParams,
    pub uses_raw_g: bool,
}

impl<'a> RunContext<'a> {
    fn ranker(&self, method: Method) -> Result<Ranker<'a>> {
        Ok(match method {
            Method::Static => Ranker::Static(
                self.calibration
                    .ok_or_else(|| Error::usage("static ranking needs calibration counts"))?,
            ),
            Method::Router => Ranker::Router,
            Method::Oracle => Ranker::Oracle {
                uses_raw_g: self.uses_raw_g,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    pub tokens: Vec<usize>,
    pub reports: Vec<StepReport>,
    pub summary: RunSummary,
}

/// Generates `gen_len` tokens after `prompt` in the given mode.
pub fn run_generation(
    ctx: &RunContext<'_>,
    prompt: &[usize],
    gen_len: usize,
    shape: &TreeShape,
    mode: Mode,
) -> Result<GenerationResult> {
    if gen_len == 0 {
        return Err(Error::usage("gen_len must be at least 1"));
    }
    ctx.cost.validate()?;
    let started = Instant::now();
    let target = ctx.target;
    let layers = target.num_layers();
    let k = target.top_k();
    let mut tprefix = PrefixCache::new(target, prompt)?;
    let mut tokens = Vec::with_capacity(gen_len);
    let mut reports = Vec::new();
    if mode == Mode::Ar {
        let step_cost = ctx.cost.ar_step_cost(layers, k);
        while tokens.len() < gen_len {
            let t = argmax(tprefix.last_logits());
            tokens.push(t);
            reports.push(StepReport {
                step: reports.len(),
                tau: 1,
                emitted: 1,
                tree_size: 0,
                tree_depth: 0,
                unique_experts: vec![k; layers],
                method: None,
                policy: None,
                budget: None,
                cost: step_cost,
                coverage: Vec::new(),
            });
            if tokens.len() < gen_len {
                tprefix.extend(target, &[t])?;
            }
        }
    } else {
        let mut dprefix = PrefixCache::new(ctx.draft, prompt)?;
        let budget = match mode {
            Mode::SpecBudgeted { method, policy, budget } => Some(VerifyBudget {
                ranker: ctx.ranker(method)?,
                budget,
                policy,
            }),
            _ => None,
        };
        while tokens.len() < gen_len {
            let tree = build_tree(ctx.draft, &dprefix, shape)?;
            let v = verify_greedy(target, &tprefix, &tree, budget)?;
            let take = v.tokens.len().min(gen_len - tokens.len());
            let new = &v.tokens[..take];
            tokens.extend_from_slice(new);
            let depth = tree.depth();
            reports.push(StepReport {
                step: reports.len(),
                tau: v.tau(),
                emitted: take,
                tree_size: tree.len(),
                tree_depth: depth,
                cost: ctx.cost.verify_step_cost(&v.unique_experts, budget.is_some(), depth),
                unique_experts: v.unique_experts,
                method: mode.method(),
                policy: mode.policy(),
                budget: mode.budget(),
                coverage: v.coverage,
            });
            if tokens.len() < gen_len {
                tprefix.extend(target, new)?;
                dprefix.extend(ctx.draft, new)?;
            }
        }
    }
    let mut summary = summarize(&reports, &ctx.cost, layers, k)?;
    summary.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(GenerationResult {
        tokens,
        reports,
        summary,
    })
}

/// Fraction of positions where two streams agree; the shorter length counts
/// as mismatches against the longer.
pub fn exact_match_rate(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

/// One configuration of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SweepCell {
    pub tree_size: usize,
    #[serde(flatten)]
    pub mode: Mode,
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@M={}", self.mode, self.tree_size)
    }
}

/// Grid axes. AR appears once; `spec_full` once per tree size; budgeted cells
/// cover every tree size, method, policy and budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub tree_sizes: Vec<usize>,
    pub budgets: Vec<usize>,
    pub methods: Vec<Method>,
    pub policies: Vec<CoveragePolicy>,
    pub include_ar: bool,
    pub include_full: bool,
}

impl SweepAxes {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        if self.include_ar {
            cells.push(SweepCell {
                tree_size: 0,
                mode: Mode::Ar,
            });
        }
        for &m in &self.tree_sizes {
            if self.include_full {
                cells.push(SweepCell {
                    tree_size: m,
                    mode: Mode::SpecFull,
                });
            }
            for &method in &self.methods {
                for &policy in &self.policies {
                    for &budget in &self.budgets {
                        cells.push(SweepCell {
                            tree_size: m,
                            mode: Mode::SpecBudgeted { method, policy, budget },
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Work shared by every cell: prompts per seed and AR reference streams.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub cells: Vec<SweepCell>,
    /// Sorted, deduplicated.
    pub seeds: Vec<u64>,
    pub prompts_per_seed: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

/// One (cell, seed) result, pooled over that seed's prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub seed: u64,
    pub prompts: usize,
    pub tokens: usize,
    pub steps: usize,
    pub mean_tau: f64,
    pub mean_unique: f64,
    pub max_unique: usize,
    pub speedup: f64,
    /// Exact-match rate against the AR greedy stream.
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub seeds: usize,
    pub mean_tau: f64,
    pub std_tau: f64,
    pub mean_unique: f64,
    pub std_unique: f64,
    pub max_unique: usize,
    pub speedup: f64,
    pub std_speedup: f64,
    pub quality: f64,
    pub std_quality: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<CellSummary>,
    /// Step reports per row, same order as `rows`.
    pub reports: Vec<Vec<StepReport>>,
    pub failures: Vec<(SweepCell, u64, String)>,
}

pub fn sweep_prompts(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    crate::tree::random_prompts(seed, count, len, vocab)
}

fn run_cell_seed(
    ctx: &RunContext<'_>,
    plan: &SweepPlan,
    cell: SweepCell,
    seed: u64,
    prompts: &[Vec<usize>],
    references: &[Vec<usize>],
) -> Result<(SweepRow, Vec<StepReport>)> {
    let shape = if cell.mode == Mode::Ar {
        TreeShape::chain(1)
    } else {
        TreeShape::for_size(cell.tree_size)?
    };
    let mut reports = Vec::new();
    let mut quality = 0.0;
    for (p, reference) in prompts.iter().zip(references) {
        let r = run_generation(ctx, p, plan.gen_len, &shape, cell.mode)?;
        quality += exact_match_rate(&r.tokens, reference);
        reports.extend(r.reports);
    }
    let s = summarize(&reports, &ctx.cost, ctx.target.num_layers(), ctx.target.top_k())?;
    let row = SweepRow {
        cell: 0,
        seed,
        prompts: prompts.len(),
        tokens: s.tokens,
        steps: s.steps,
        mean_tau: s.mean_tau,
        mean_unique: s.mean_unique,
        max_unique: s.max_unique,
        speedup: s.speedup,
        quality: quality / prompts.len() as f64,
    };
    Ok((row, reports))
}

fn summarize_cell(cell: SweepCell, rows: &[&SweepRow]) -> CellSummary {
    let pick = |f: fn(&SweepRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
    let tau = pick(|r| r.mean_tau);
    let unique = pick(|r| r.mean_unique);
    let speedup = pick(|r| r.speedup);
    let quality = pick(|r| r.quality);
    CellSummary {
        cell,
        seeds: rows.len(),
        mean_tau: mean(&tau),
        std_tau: std_dev(&tau),
        mean_unique: mean(&unique),
        std_unique: std_dev(&unique),
        max_unique: rows.iter().map(|r| r.max_unique).max().unwrap_or(0),
        speedup: mean(&speedup),
        std_speedup: std_dev(&speedup),
        quality: mean(&quality),
        std_quality: std_dev(&quality),
    }
}

/// Evaluates every (cell, seed) pair on a pool of `workers` threads. Results
/// do not depend on the worker count or on the order seeds were given in.
pub fn sweep(ctx: &RunContext<'_>, cells: &[SweepCell], seeds: &[u64], prompts_per_seed: usize, prompt_len: usize, gen_len: usize, workers: usize) -> Result<SweepOutput> {
    if cells.is_empty() {
        return Err(Error::usage("sweep needs at least one cell"));
    }
    if seeds.is_empty() {
        return Err(Error::usage("sweep needs at least one seed"));
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let plan = SweepPlan {
        cells: cells.to_vec(),
        seeds,
        prompts_per_seed,
        prompt_len,
        gen_len,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))?;
    let vocab = ctx.target.vocab();
    let ar_shape = TreeShape::chain(1);
    type PromptSet = (Vec<Vec<usize>>, Vec<Vec<usize>>);
    let per_seed: Vec<Result<PromptSet>> = pool.install(|| {
        plan.seeds
            .par_iter()
            .map(|&seed| {
                let prompts = sweep_prompts(seed, plan.prompts_per_seed, plan.prompt_len, vocab);
                let refs = prompts
                    .iter()
                    .map(|p| run_generation(ctx, p, plan.gen_len, &ar_shape, Mode::Ar).map(|r| r.tokens))
                    .collect::<Result<Vec<_>>>()?;
                Ok((prompts, refs))
            })
            .collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..plan.cells.len())
        .flat_map(|c| (0..plan.seeds.len()).map(move |s| (c, s)))
        .collect();
    let results: Vec<Result<(SweepRow, Vec<StepReport>)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                let (prompts, refs) = &per_seed[s];
                run_cell_seed(ctx, &plan, plan.cells[c], plan.seeds[s], prompts, refs).map(|(mut row, rep)| {
                    row.cell = c;
                    (row, rep)
                })
            })
            .collect()
    });
    let mut out = SweepOutput {
        rows: Vec::new(),
        summaries: Vec::new(),
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for (&(c, s), r) in jobs.iter().zip(results) {
        match r {
            Ok((row, rep)) => {
                out.rows.push(row);
                out.reports.push(rep);
            }
            Err(e) => out.failures.push((plan.cells[c], plan.seeds[s], e.to_string())),
        }
    }
    for (c, &cell) in plan.cells.iter().enumerate() {
        let rows: Vec<&SweepRow> = out.rows.iter().filter(|r| r.cell == c).collect();
        if !rows.is_empty() {
            out.summaries.push(summarize_cell(cell, &rows));
        }
    }
    Ok(out)
}
