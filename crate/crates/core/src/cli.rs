//! Command-line entry point.
//!
//! Every CSV output starts with `#` comment lines holding the tool version,
//! master seed and the resolved config as JSON; every JSON output is an
//! object `{"header": {...}, "data": ...}`. Column sets are fixed per file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{coactivation, coverage_curve, mean_errors, pareto_table, reconstruction_for_prompt, ReconstructionSpec};
use crate::budget::Method;
use crate::config::{Experiment, ExperimentConfig, Overrides, StaticRanking, ANALYSIS_STREAM};
use crate::coverage::CoveragePolicy;
use crate::error::{Error, Result};
use crate::model::{forward_causal, ModelFile, PrefixCache};
use crate::moe::RoutingRecord;
use crate::numerics::{std_dev, Rng};
use crate::sim::{sweep, CellSummary, SweepAxes, SweepOutput, SweepRow};
use crate::trace::read_trace;
use crate::tree::{build_tree, random_prompts, target_tree_forward, TreeShape};

pub const TOOL_NAME: &str = "moe-budget";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "moe-budget", version, about = "Expert budgets for speculative decoding on toy MoE models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// olmoe-toy | qwen3-toy | mixtral-toy
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Expert budgets, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub budget: Option<Vec<usize>>,
    /// static | router | oracle, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Option<Vec<Method>>,
    /// truncation | substitution, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub policy: Option<Vec<CoveragePolicy>>,
    /// Draft tree sizes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub tree_size: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub gen_len: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep tree sizes: AR, unbudgeted and budgeted speculative decoding.
    Simulate {
        /// Also write every step report as JSON lines.
        #[arg(long)]
        dump_steps: bool,
    },
    /// Method x policy x budget grid plus a quality/speedup table.
    Ablate {
        #[arg(long)]
        dump_steps: bool,
    },
    /// Routing-probability coverage by budget.
    Coverage {
        /// Read routing records from a JSON-lines trace instead of the model.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Expert pair co-activation counts and concentration.
    Coactivation {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Teacher-forced reconstruction error by method and budget.
    Reconstruct,
    /// Count expert selections on the calibration stream.
    CalibrateStatic,
    /// Save target and draft weights.
    ExportModel,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            out_dir: self.out_dir.clone(),
            preset: self.preset.clone(),
            budgets: self.budget.clone(),
            methods: self.method.clone(),
            policies: self.policy.clone(),
            tree_sizes: self.tree_size.clone(),
            gen_len: self.gen_len,
        }
    }
}

/// Files written and cells that failed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

/// Resolves the config: defaults, then the file, then flags.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&common.overrides());
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Header<'a> {
    tool: &'a str,
    version: &'a str,
    seed: u64,
    config: serde_json::Value,
}

struct Out<'a> {
    dir: &'a Path,
    cfg: &'a ExperimentConfig,
    files: Vec<PathBuf>,
}

impl<'a> Out<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Out {
            dir: &cfg.out_dir,
            cfg,
            files: Vec::new(),
        })
    }

    fn header(&self) -> Header<'static> {
        Header {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            seed: self.cfg.seed,
            config: self.cfg.echo(),
        }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = BufWriter::new(File::create(&path)?);
        self.files.push(path);
        Ok(f)
    }

    fn csv(&mut self, name: &str, columns: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
        let mut f = self.create(name)?;
        writeln!(f, "# tool: {TOOL_NAME} {TOOL_VERSION}")?;
        writeln!(f, "# seed: {}", self.cfg.seed)?;
        writeln!(f, "# config: {}", serde_json::to_string(&self.cfg.echo())?)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(columns)?;
        Ok(w)
    }

    fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            header: Header<'a>,
            data: &'a T,
        }
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(
            &mut f,
            &Envelope {
                header: self.header(),
                data,
            },
        )?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    fn jsonl(&mut self, name: &str) -> Result<BufWriter<File>> {
        let header = self.header();
        let mut f = self.create(name)?;
        serde_json::to_writer(&mut f, &serde_json::json!({ "header": header }))?;
        f.write_all(b"\n")?;
        Ok(f)
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "cell", "tree_size", "mode", "method", "policy", "budget", "seed", "prompts", "tokens", "steps", "mean_tau",
    "mean_unique", "max_unique", "speedup", "quality",
];

pub const SUMMARY_COLUMNS: &[&str] = &[
    "cell", "tree_size", "mode", "method", "policy", "budget", "seeds", "mean_tau", "std_tau", "mean_unique",
    "std_unique", "max_unique", "speedup", "std_speedup", "quality", "std_quality",
];

pub const PARETO_COLUMNS: &[&str] = &["label", "tree_size", "mode", "method", "policy", "budget", "quality_pct", "speedup"];

fn write_sweep(out: &mut Out<'_>, prefix: &str, result: &SweepOutput, cells: &[crate::sim::SweepCell], dump_steps: bool) -> Result<()> {
    let mut w = out.csv(&format!("{prefix}.csv"), SWEEP_COLUMNS)?;
    for r in &result.rows {
        let c = cells[r.cell];
        let SweepRow {
            cell,
            seed,
            prompts,
            tokens,
            steps,
            mean_tau,
            mean_unique,
            max_unique,
            speedup,
            quality,
        } = r;
        w.write_record([
            cell.to_string(),
            c.tree_size.to_string(),
            c.mode.name().to_string(),
            opt(c.mode.method()),
            opt(c.mode.policy()),
            opt(c.mode.budget()),
            seed.to_string(),
            prompts.to_string(),
            tokens.to_string(),
            steps.to_string(),
            mean_tau.to_string(),
            mean_unique.to_string(),
            max_unique.to_string(),
            speedup.to_string(),
            quality.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = out.csv(&format!("{prefix}_summary.csv"), SUMMARY_COLUMNS)?;
    for s in &result.summaries {
        let idx = cells.iter().position(|c| *c == s.cell).unwrap_or(0);
        write_summary_row(&mut w, idx, s)?;
    }
    w.flush()?;
    let failed: Vec<String> = result
        .failures
        .iter()
        .map(|(c, s, e)| format!("{c} seed={s}: {e}"))
        .collect();
    out.json(
        &format!("{prefix}_summary.json"),
        &serde_json::json!({ "cells": result.summaries, "failed_cells": failed }),
    )?;
    if dump_steps {
        let mut f = out.jsonl(&format!("{prefix}_steps.jsonl"))?;
        for (row, reports) in result.rows.iter().zip(&result.reports) {
            for rep in reports {
                serde_json::to_writer(&mut f, &serde_json::json!({ "cell": row.cell, "seed": row.seed, "report": rep }))?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

fn write_summary_row<W: Write>(w: &mut csv::Writer<W>, idx: usize, s: &CellSummary) -> Result<()> {
    let c = s.cell;
    w.write_record([
        idx.to_string(),
        c.tree_size.to_string(),
        c.mode.name().to_string(),
        opt(c.mode.method()),
        opt(c.mode.policy()),
        opt(c.mode.budget()),
        s.seeds.to_string(),
        s.mean_tau.to_string(),
        s.std_tau.to_string(),
        s.mean_unique.to_string(),
        s.std_unique.to_string(),
        s.max_unique.to_string(),
        s.speedup.to_string(),
        s.std_speedup.to_string(),
        s.quality.to_string(),
        s.std_quality.to_string(),
    ])?;
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, prefix: &str, dump_steps: bool, pareto: bool) -> Result<Outcome> {
    let exp = Experiment::build(cfg)?;
    let axes = SweepAxes {
        tree_sizes: cfg.tree_sizes.clone(),
        budgets: cfg.budgets.clone(),
        methods: cfg.methods.clone(),
        policies: cfg.policies.clone(),
        include_ar: true,
        include_full: true,
    };
    let cells = axes.cells();
    let result = sweep(&exp.context(), &cells, &cfg.seeds, cfg.prompts, cfg.prompt_len, cfg.gen_len, cfg.workers)?;
    let mut out = Out::new(cfg)?;
    write_sweep(&mut out, prefix, &result, &cells, dump_steps)?;
    if pareto {
        let mut w = out.csv("pareto.csv", PARETO_COLUMNS)?;
        for r in pareto_table(&result.summaries)? {
            w.write_record([
                r.label,
                r.tree_size.to_string(),
                r.mode,
                opt(r.method),
                opt(r.policy),
                opt(r.budget),
                r.quality.to_string(),
                r.speedup.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(Outcome {
        files: out.files,
        failures: result
            .failures
            .iter()
            .map(|(c, s, e)| format!("{c} seed={s}: {e}"))
            .collect(),
    })
}

pub fn cmd_simulate(cfg: &ExperimentConfig, dump_steps: bool) -> Result<Outcome> {
    cmd_sweep(cfg, "simulate", dump_steps, false)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, dump_steps: bool) -> Result<Outcome> {
    cmd_sweep(cfg, "ablate", dump_steps, true)
}

pub const COVERAGE_COLUMNS: &[&str] = &["tree_size", "layer", "budget", "coverage", "trees", "tokens"];

/// Target routing of one draft tree per (tree size, seed, prompt).
fn tree_routings(exp: &Experiment) -> Result<Vec<(usize, Vec<Vec<RoutingRecord>>)>> {
    let cfg = &exp.config;
    let mut jobs = Vec::new();
    for &m in &cfg.tree_sizes {
        for &s in &sorted_seeds(&cfg.seeds) {
            for p in random_prompts(s, cfg.prompts, cfg.prompt_len, exp.target.vocab()) {
                jobs.push((m, p));
            }
        }
    }
    let results: Vec<Result<(usize, Vec<Vec<RoutingRecord>>)>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|(m, p)| {
                let dprefix = PrefixCache::new(&exp.draft, p)?;
                let tprefix = PrefixCache::new(&exp.target, p)?;
                let tree = build_tree(&exp.draft, &dprefix, &TreeShape::for_size(*m)?)?;
                let (routing, _) = target_tree_forward(&exp.target, &tprefix, &tree)?;
                Ok((*m, routing.layers))
            })
            .collect()
    });
    results.into_iter().collect()
}

fn sorted_seeds(seeds: &[u64]) -> Vec<u64> {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn cmd_coverage(cfg: &ExperimentConfig, trace: Option<&Path>) -> Result<Outcome> {
    let mut out = Out::new(cfg)?;
    let mut w = out.csv("coverage.csv", COVERAGE_COLUMNS)?;
    match trace {
        Some(path) => {
            let k = cfg.model_config()?.top_k;
            let t = read_trace(BufReader::new(File::open(path)?), Some(k))?;
            for (&layer, records) in &t.layers {
                let c = coverage_curve(records, layer)?;
                for (b, v) in c.values.iter().enumerate() {
                    w.write_record([
                        "0".to_string(),
                        layer.to_string(),
                        (b + 1).to_string(),
                        v.to_string(),
                        "1".to_string(),
                        records.len().to_string(),
                    ])?;
                }
            }
        }
        None => {
            let exp = Experiment::build(cfg)?;
            let trees = tree_routings(&exp)?;
            let n = exp.target.num_experts();
            for &m in &cfg.tree_sizes {
                let group: Vec<&Vec<Vec<RoutingRecord>>> = trees.iter().filter(|t| t.0 == m).map(|t| &t.1).collect();
                for layer in 0..exp.target.num_layers() {
                    let mut sums = vec![0.0; n];
                    let mut tokens = 0;
                    for layers in &group {
                        let c = coverage_curve(&layers[layer], layer)?;
                        for (s, v) in sums.iter_mut().zip(&c.values) {
                            *s += v;
                        }
                        tokens += layers[layer].len();
                    }
                    for (b, s) in sums.iter().enumerate() {
                        w.write_record([
                            m.to_string(),
                            layer.to_string(),
                            (b + 1).to_string(),
                            (s / group.len() as f64).to_string(),
                            group.len().to_string(),
                            tokens.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    drop(w);
    Ok(Outcome {
        files: out.files,
        failures: Vec::new(),
    })
}

pub const COACTIVATION_COLUMNS: &[&str] = &[
    "layer",
    "tokens",
    "num_experts",
    "k",
    "pair_numerator",
    "pair_denominator",
    "expected_pair_probability",
    "max_pair",
    "concentration",
];

pub fn coactivation_matrix_file(layer: usize) -> String {
    format!("coactivation_layer{layer}.csv")
}

pub fn cmd_coactivation(cfg: &ExperimentConfig, trace: Option<&Path>) -> Result<Outcome> {
    let layers: Vec<(usize, Vec<RoutingRecord>)> = match trace {
        Some(path) => {
            let k = cfg.model_config()?.top_k;
            read_trace(BufReader::new(File::open(path)?), Some(k))?.layers.into_iter().collect()
        }
        None => {
            let exp = Experiment::build(cfg)?;
            let streams = crate::budget::calibration_streams(
                &Rng::with_stream(cfg.seed, ANALYSIS_STREAM),
                cfg.analysis_tokens,
                cfg.prompt_len,
                exp.target.vocab(),
            );
            let outs: Vec<Result<Vec<Vec<RoutingRecord>>>> = pool(cfg.workers)?.install(|| {
                streams
                    .par_iter()
                    .map(|s| forward_causal(&exp.target, s).map(|o| o.routing))
                    .collect()
            });
            let mut per_layer = vec![Vec::new(); exp.target.num_layers()];
            for o in outs {
                for (l, recs) in o?.into_iter().enumerate() {
                    per_layer[l].extend(recs);
                }
            }
            per_layer.into_iter().enumerate().collect()
        }
    };
    let mut out = Out::new(cfg)?;
    let mut w = out.csv("coactivation.csv", COACTIVATION_COLUMNS)?;
    let mut matrices = Vec::new();
    for (layer, records) in &layers {
        let m = coactivation(records, *layer)?;
        let p = m.pair_probability()?;
        w.write_record([
            layer.to_string(),
            m.tokens.to_string(),
            m.num_experts().to_string(),
            m.k.to_string(),
            p.numerator.to_string(),
            p.denominator.to_string(),
            p.value().to_string(),
            m.max_pair().to_string(),
            m.concentration()?.to_string(),
        ])?;
        matrices.push(m);
    }
    w.flush()?;
    drop(w);
    for m in &matrices {
        let n = m.num_experts();
        let mut columns = vec!["expert".to_string()];
        columns.extend((0..n).map(|j| j.to_string()));
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        let mut w = out.csv(&coactivation_matrix_file(m.layer), &cols)?;
        for (i, row) in m.counts.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(Outcome {
        files: out.files,
        failures: Vec::new(),
    })
}

pub const RECONSTRUCT_COLUMNS: &[&str] = &["tree_size", "seed", "tree", "method", "budget", "mode", "error"];
pub const RECONSTRUCT_LAYER_COLUMNS: &[&str] = &["tree_size", "seed", "tree", "method", "budget", "mode", "layer", "error"];
pub const RECONSTRUCT_SUMMARY_COLUMNS: &[&str] = &["tree_size", "method", "budget", "mode", "trees", "mean_error", "std_error"];

pub fn cmd_reconstruct(cfg: &ExperimentConfig) -> Result<Outcome> {
    let exp = Experiment::build(cfg)?;
    let modes = cfg.error_modes()?;
    let mut jobs = Vec::new();
    for &m in &cfg.tree_sizes {
        for s in sorted_seeds(&cfg.seeds) {
            for (i, p) in random_prompts(s, cfg.prompts, cfg.prompt_len, exp.target.vocab()).into_iter().enumerate() {
                jobs.push((m, s, i, p));
            }
        }
    }
    let results: Vec<Result<Vec<crate::analysis::ReconstructionRow>>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|(m, _, i, p)| {
                let spec = ReconstructionSpec {
                    target: &exp.target,
                    draft: &exp.draft,
                    calibration: Some(&exp.calibration),
                    prompts: &[],
                    tree_size: *m,
                    budgets: &cfg.budgets,
                    methods: &cfg.methods,
                    modes: &modes,
                    uses_raw_g: cfg.uses_raw_g,
                };
                reconstruction_for_prompt(&spec, &TreeShape::for_size(*m)?, *i, p)
            })
            .collect()
    });
    let mut out = Out::new(cfg)?;
    let mut w = out.csv("reconstruct.csv", RECONSTRUCT_COLUMNS)?;
    let mut wl = out.csv("reconstruct_layers.csv", RECONSTRUCT_LAYER_COLUMNS)?;
    let mut all = Vec::new();
    for ((m, s, _, _), r) in jobs.iter().zip(results) {
        for row in r? {
            w.write_record([
                m.to_string(),
                s.to_string(),
                row.tree.to_string(),
                row.method.to_string(),
                row.budget.to_string(),
                row.mode.to_string(),
                row.error.to_string(),
            ])?;
            for (l, e) in row.per_layer.iter().enumerate() {
                wl.write_record([
                    m.to_string(),
                    s.to_string(),
                    row.tree.to_string(),
                    row.method.to_string(),
                    row.budget.to_string(),
                    row.mode.to_string(),
                    l.to_string(),
                    e.to_string(),
                ])?;
            }
            all.push((*m, row));
        }
    }
    w.flush()?;
    wl.flush()?;
    drop(w);
    drop(wl);
    let mut w = out.csv("reconstruct_summary.csv", RECONSTRUCT_SUMMARY_COLUMNS)?;
    for &m in &cfg.tree_sizes {
        let rows: Vec<_> = all.iter().filter(|x| x.0 == m).map(|x| x.1.clone()).collect();
        for (method, budget, mode, mean, count) in mean_errors(&rows) {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.budget == budget && r.mode == mode)
                .map(|r| r.error)
                .collect();
            w.write_record([
                m.to_string(),
                method.to_string(),
                budget.to_string(),
                mode.to_string(),
                count.to_string(),
                mean.to_string(),
                std_dev(&errs).to_string(),
            ])?;
        }
    }
    w.flush()?;
    drop(w);
    Ok(Outcome {
        files: out.files,
        failures: Vec::new(),
    })
}

pub fn cmd_calibrate_static(cfg: &ExperimentConfig) -> Result<Outcome> {
    if cfg.static_ranking.is_some() {
        return Err(Error::config("static_ranking", "calibrate-static computes the ranking; do not load one"));
    }
    let exp = Experiment::build(cfg)?;
    let mut out = Out::new(cfg)?;
    out.json("static_ranking.json", &StaticRanking::new(exp.calibration)?)?;
    Ok(Outcome {
        files: out.files,
        failures: Vec::new(),
    })
}

pub fn cmd_export_model(cfg: &ExperimentConfig) -> Result<Outcome> {
    let exp = Experiment::build(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let target = cfg.out_dir.join("target.json");
    let draft = cfg.out_dir.join("draft.json");
    ModelFile::new(&exp.target, None).save(&target)?;
    ModelFile::new(&exp.draft, Some(cfg.draft)).save(&draft)?;
    Ok(Outcome {
        files: vec![target, draft],
        failures: Vec::new(),
    })
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Simulate { dump_steps } => cmd_simulate(&cfg, *dump_steps),
        Command::Ablate { dump_steps } => cmd_ablate(&cfg, *dump_steps),
        Command::Coverage { trace } => cmd_coverage(&cfg, trace.as_deref()),
        Command::Coactivation { trace } => cmd_coactivation(&cfg, trace.as_deref()),
        Command::Reconstruct => cmd_reconstruct(&cfg),
        Command::CalibrateStatic => cmd_calibrate_static(&cfg),
        Command::ExportModel => cmd_export_model(&cfg),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(outcome) if outcome.failures.is_empty() => {
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Ok(outcome) => {
            eprintln!("{} cell(s) failed:", outcome.failures.len());
            for f in &outcome.failures {
                eprintln!("  {f}");
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
