//! End-to-end behaviour of the toy model and the speculative loop, checked
//! against brute-force replays and sampling bounds.

mod common;

use moe_budget::analysis::{coverage_curve, mean_errors, reconstruction_study, ErrorMode, ReconstructionSpec};
use moe_budget::budget::Method;
use moe_budget::config::{Experiment, ExperimentConfig};
use moe_budget::coverage::CoveragePolicy;
use moe_budget::model::{build_target, derive_draft, forward_causal, random_moe_layer, DraftSpec, ModelConfig, PrefixCache};
use moe_budget::moe::RoutingRecord;
use moe_budget::numerics::{argmax, Rng};
use moe_budget::sim::{run_generation, sweep, verify_greedy, Mode, SweepCell};
use moe_budget::tree::{build_tree, random_prompts, DraftTree, TreeShape};

use common::*;

fn small_experiment() -> Experiment {
    let cfg = ExperimentConfig {
        model: Some(ModelConfig {
            d: 16,
            d_ff: 32,
            num_experts: 16,
            top_k: 4,
            layers: 2,
            vocab: 64,
            ..ModelConfig::default()
        }),
        calibration_tokens: 512,
        ..ExperimentConfig::default()
    };
    Experiment::build(&cfg).unwrap()
}

/// Greedy verification replayed with full causal forwards: walk down the
/// tree while the target's argmax matches a child, then emit the argmax.
fn replay_verification(target: &moe_budget::model::MoEModel, context: &[usize], tree: &DraftTree) -> Vec<usize> {
    let nodes = tree.nodes();
    let mut seq = context.to_vec();
    let mut parent = None;
    let mut out = Vec::new();
    loop {
        let logits = forward_causal(target, &seq).unwrap().logits;
        let next = argmax(&logits[seq.len() - 1]);
        out.push(next);
        match (0..nodes.len()).find(|&i| nodes[i].parent == parent && nodes[i].token == next) {
            Some(i) => {
                seq.push(next);
                parent = Some(i);
            }
            None => return out,
        }
    }
}

#[test]
fn verification_matches_causal_replay() {
    let exp = small_experiment();
    let vocab = exp.target.vocab();
    for (p, prompt) in random_prompts(4, 6, 12, vocab).iter().enumerate() {
        let shape = TreeShape::for_size([7, 15, 31][p % 3]).unwrap();
        let dprefix = PrefixCache::new(&exp.draft, prompt).unwrap();
        let tprefix = PrefixCache::new(&exp.target, prompt).unwrap();
        let tree = build_tree(&exp.draft, &dprefix, &shape).unwrap();
        let v = verify_greedy(&exp.target, &tprefix, &tree, None).unwrap();
        assert_eq!(v.tokens, replay_verification(&exp.target, prompt, &tree), "prompt {p}");
        assert!(v.tau() >= 1 && v.tau() <= tree.depth() + 1);
    }
}

#[test]
fn chain_of_five_follows_draft_rollout() {
    let exp = small_experiment();
    let prompt = &random_prompts(9, 1, 10, exp.target.vocab())[0];
    let dprefix = PrefixCache::new(&exp.draft, prompt).unwrap();
    let tree = build_tree(&exp.draft, &dprefix, &TreeShape::chain(5)).unwrap();
    assert_eq!(tree.len(), 5);
    let mut seq = prompt.clone();
    for node in tree.nodes() {
        let logits = forward_causal(&exp.draft, &seq).unwrap().logits;
        assert_eq!(node.token, argmax(&logits[seq.len() - 1]));
        seq.push(node.token);
    }
}

#[test]
fn identical_draft_accepts_every_level() {
    let exp = small_experiment();
    let draft = derive_draft(
        &exp.target,
        &DraftSpec {
            noise_std: 0.0,
            layers_kept: None,
        },
        &mut Rng::new(0),
    )
    .unwrap();
    let prompt = &random_prompts(2, 1, 10, exp.target.vocab())[0];
    let dprefix = PrefixCache::new(&draft, prompt).unwrap();
    let tprefix = PrefixCache::new(&exp.target, prompt).unwrap();
    let tree = build_tree(&draft, &dprefix, &TreeShape::chain(6)).unwrap();
    let v = verify_greedy(&exp.target, &tprefix, &tree, None).unwrap();
    assert_eq!(v.tau(), 7);
}

#[test]
fn accepted_lengths_stay_within_tree_depth() {
    let exp = Experiment::build(&ExperimentConfig::default()).unwrap();
    let ctx = exp.context();
    let shape = TreeShape::for_size(63).unwrap();
    for prompt in random_prompts(5, 2, 16, exp.target.vocab()) {
        let r = run_generation(&ctx, &prompt, 32, &shape, Mode::SpecFull).unwrap();
        for s in &r.reports {
            assert!(s.tau >= 1 && s.tau <= s.tree_depth + 1, "tau {} depth {}", s.tau, s.tree_depth);
        }
        assert_eq!(r.tokens.len(), 32);
    }
}

#[test]
fn ar_mode_is_the_unit_of_speed() {
    let exp = small_experiment();
    let prompt = &random_prompts(1, 1, 8, exp.target.vocab())[0];
    let r = run_generation(&exp.context(), prompt, 12, &TreeShape::chain(1), Mode::Ar).unwrap();
    assert!(r.reports.iter().all(|s| s.tau == 1));
    assert_eq!(r.summary.speedup, 1.0);
}

fn cells(n: usize) -> Vec<SweepCell> {
    let mut cells = vec![
        SweepCell {
            tree_size: 0,
            mode: Mode::Ar,
        },
        SweepCell {
            tree_size: 15,
            mode: Mode::SpecFull,
        },
    ];
    for budget in [4, n] {
        cells.push(SweepCell {
            tree_size: 15,
            mode: Mode::SpecBudgeted {
                method: Method::Router,
                policy: CoveragePolicy::Substitution,
                budget,
            },
        });
    }
    cells
}

#[test]
fn sweep_summaries_ignore_seed_order() {
    let exp = small_experiment();
    let cells = cells(exp.target.num_experts());
    let a = sweep(&exp.context(), &cells, &[1, 2], 2, 8, 12, 1).unwrap();
    let b = sweep(&exp.context(), &cells, &[2, 1], 2, 8, 12, 2).unwrap();
    assert_eq!(a.summaries, b.summaries);
}

#[test]
fn full_budget_is_lossless_and_small_budget_is_not_better() {
    let exp = small_experiment();
    let n = exp.target.num_experts();
    let cells = cells(n);
    let out = sweep(&exp.context(), &cells, &[1, 2], 2, 8, 24, 1).unwrap();
    let quality = |mode: Mode| out.summaries.iter().find(|s| s.cell.mode == mode).unwrap().quality;
    let speedup = |mode: Mode| out.summaries.iter().find(|s| s.cell.mode == mode).unwrap().speedup;
    let budgeted = |budget| Mode::SpecBudgeted {
        method: Method::Router,
        policy: CoveragePolicy::Substitution,
        budget,
    };
    assert_eq!(quality(Mode::Ar), 1.0);
    assert_eq!(speedup(Mode::Ar), 1.0);
    assert_eq!(quality(Mode::SpecFull), 1.0);
    assert_eq!(quality(budgeted(n)), 1.0);
    assert!(quality(budgeted(4)) <= quality(budgeted(n)));
}

#[test]
fn large_trees_load_many_experts_unless_budgeted() {
    let exp = Experiment::build(&ExperimentConfig::default()).unwrap();
    let n = exp.target.num_experts();
    let ctx = exp.context();
    let shape = TreeShape::for_size(255).unwrap();
    let prompt = &random_prompts(1, 1, 16, exp.target.vocab())[0];
    let full = run_generation(&ctx, prompt, 8, &shape, Mode::SpecFull).unwrap();
    let mode = Mode::SpecBudgeted {
        method: Method::Router,
        policy: CoveragePolicy::Substitution,
        budget: n / 2,
    };
    let budgeted = run_generation(&ctx, prompt, 8, &shape, mode).unwrap();
    assert!(full.summary.mean_unique > (n / 2) as f64, "{}", full.summary.mean_unique);
    assert!(budgeted.summary.max_unique <= n / 2);
}

/// Selection counts when every token meets a freshly drawn router: with no
/// skew, experts are exchangeable, so each is picked with probability k/N.
#[test]
fn unskewed_experts_are_picked_uniformly() {
    let cfg = ModelConfig {
        d_ff: 1,
        skew: 0.0,
        ..ModelConfig::default()
    };
    let (n, k) = (cfg.num_experts, cfg.top_k);
    let draws = 10_000;
    let root = Rng::new(77);
    let mut counts = vec![0u64; n];
    for t in 0..draws {
        let mut rng = root.split(t);
        let layer = random_moe_layer(&cfg, &mut rng).unwrap();
        let h = random_vec(&mut rng, cfg.d);
        for i in naive_top_k(&naive_probs(&layer, &h), k) {
            counts[i] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "expert {i}: {c} vs {mean:.0} +- {:.1}", 3.0 * sigma);
    }
}

/// Top-quarter routing coverage of causal streams under a given skew.
fn top_quarter_coverage(skew: f64) -> f64 {
    let cfg = ModelConfig {
        skew,
        seed: 3,
        ..ModelConfig::default()
    };
    let model = build_target(&cfg).unwrap();
    let mut total = 0.0;
    let prompts = random_prompts(6, 4, 63, cfg.vocab);
    for prompt in &prompts {
        let out = forward_causal(&model, prompt).unwrap();
        for (l, records) in out.routing.iter().enumerate() {
            let c = coverage_curve(records, l).unwrap();
            for w in c.values.windows(3) {
                assert!(w[1] - w[0] >= w[2] - w[1] - 1e-12, "coverage increments must not grow");
            }
            total += c.at(cfg.num_experts / 4);
        }
    }
    total / (prompts.len() * cfg.layers) as f64
}

#[test]
fn skew_concentrates_routing_mass() {
    let flat = top_quarter_coverage(0.0);
    let skewed = top_quarter_coverage(2.0);
    assert!(skewed > flat, "skew 2: {skewed:.4}, skew 0: {flat:.4}");
    // the top quarter of a sorted distribution holds at least a quarter
    assert!(flat >= 0.25 - 1e-12);
}

#[test]
fn substitution_error_falls_with_budget_on_average() {
    let exp = Experiment::build(&ExperimentConfig::default()).unwrap();
    let (n, k) = (exp.target.num_experts(), exp.target.top_k());
    let prompts = random_prompts(11, 20, 16, exp.target.vocab());
    let budgets = [k, 2 * k, n / 2, 3 * n / 4, n];
    let modes = [ErrorMode::Policy {
        policy: CoveragePolicy::Substitution,
    }];
    let spec = ReconstructionSpec {
        target: &exp.target,
        draft: &exp.draft,
        calibration: Some(&exp.calibration),
        prompts: &prompts,
        tree_size: 63,
        budgets: &budgets,
        methods: &[Method::Router],
        modes: &modes,
        uses_raw_g: true,
    };
    let rows = reconstruction_study(&spec).unwrap();
    let means: Vec<f64> = budgets
        .iter()
        .map(|&b| {
            mean_errors(&rows)
                .into_iter()
                .find(|m| m.1 == b)
                .map(|m| m.3)
                .unwrap()
        })
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    assert!(means[means.len() - 1].abs() <= 1e-12);
}

#[test]
fn coverage_curve_hand_instance() {
    // the curve only sees probabilities, so hand-built records work
    let records: Vec<RoutingRecord> = (0..4)
        .map(|t| RoutingRecord::from_probs(if t % 2 == 0 { vec![0.7, 0.2, 0.1] } else { vec![0.1, 0.2, 0.7] }, 1).unwrap())
        .collect();
    let c = coverage_curve(&records, 0).unwrap();
    assert!((c.values[0] - 0.4).abs() <= 1e-12);
    assert!((c.values[1] - 0.8).abs() <= 1e-12);
    assert!((c.values[2] - 1.0).abs() <= 1e-12);
}
