//! Derives the default cost parameters on the default toy model.
//!
//! Expert loads per layer are fixed at four times the shared traffic per
//! layer (all `N` experts against the shared weights), so
//! `bytes_shared = layers * N * bytes_expert / 4`. The draft step cost is then
//! chosen from a grid to give the unbudgeted speedup curve the clearest
//! interior maximum while keeping the budgeted cell at the largest tree ahead
//! of the unbudgeted one.
//!
//! Run with `cargo run --release --example calibrate_cost`.

use moe_budget::budget::Method;
use moe_budget::config::{Experiment, ExperimentConfig};
use moe_budget::coverage::CoveragePolicy;
use moe_budget::sim::{summarize, sweep, CostModelParams, Mode, SweepCell, SweepOutput};

const TREE_SIZES: [usize; 7] = [3, 7, 15, 31, 63, 127, 255];
const SEEDS: [u64; 3] = [1, 2, 3];
const PROMPTS: usize = 3;
const PROMPT_LEN: usize = 16;
const GEN_LEN: usize = 64;

fn cells(budget: usize) -> Vec<SweepCell> {
    let mut cells: Vec<SweepCell> = TREE_SIZES
        .iter()
        .map(|&m| SweepCell {
            tree_size: m,
            mode: Mode::SpecFull,
        })
        .collect();
    cells.push(SweepCell {
        tree_size: 255,
        mode: Mode::SpecBudgeted {
            method: Method::Router,
            policy: CoveragePolicy::Substitution,
            budget,
        },
    });
    cells
}

/// Mean speedup per cell, re-priced under `cost`.
fn speedups(out: &SweepOutput, n_cells: usize, cost: &CostModelParams, layers: usize, k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_cells];
    let mut counts = vec![0usize; n_cells];
    for (row, reports) in out.rows.iter().zip(&out.reports) {
        let priced: Vec<_> = reports.iter().map(|r| r.priced(cost, layers, k)).collect();
        let s = summarize(&priced, cost, layers, k).expect("non-empty reports");
        sums[row.cell] += s.speedup;
        counts[row.cell] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

fn main() {
    let cfg = ExperimentConfig::default();
    let exp = Experiment::build(&cfg).expect("default experiment");
    let (layers, n, k) = (exp.target.num_layers(), exp.target.num_experts(), exp.target.top_k());
    let cells = cells(n / 2);
    let out = sweep(&exp.context(), &cells, &SEEDS, PROMPTS, PROMPT_LEN, GEN_LEN, cfg.workers).expect("sweep");
    assert!(out.failures.is_empty(), "{:?}", out.failures);

    let base = CostModelParams {
        bytes_expert: 1.0,
        bytes_shared: (layers * n) as f64 / 4.0,
        draft_step_cost: 0.0,
        selection_overhead_frac: 0.025,
    };
    let mut best: Option<(f64, f64)> = None;
    for step in 0..=80 {
        let c = step as f64 * 0.5;
        let cost = CostModelParams {
            draft_step_cost: c,
            ..base
        };
        let s = speedups(&out, cells.len(), &cost, layers, k);
        let full = &s[..TREE_SIZES.len()];
        let peak = (0..full.len()).max_by(|&a, &b| full[a].total_cmp(&full[b])).unwrap();
        let budgeted_gap = s[TREE_SIZES.len()] - full[full.len() - 1];
        if peak == 0 || peak == full.len() - 1 || budgeted_gap <= 0.0 {
            continue;
        }
        let margin = (full[peak] - full[0]).min(full[peak] - full[full.len() - 1]) / full[peak];
        println!("draft_step_cost {c:5.1}: peak M={:3} margin {margin:.4} budgeted gap {budgeted_gap:.4}", TREE_SIZES[peak]);
        if best.is_none_or(|(_, m)| margin > m) {
            best = Some((c, margin));
        }
    }
    let (c, margin) = best.expect("no draft cost gives an interior peak");
    let chosen = CostModelParams {
        draft_step_cost: c,
        ..base
    };
    println!("\nchosen (margin {margin:.4}): {chosen:?}");
    let s = speedups(&out, cells.len(), &chosen, layers, k);
    for (cell, v) in cells.iter().zip(&s) {
        println!("  {cell}: speedup {v:.4}");
    }
}
