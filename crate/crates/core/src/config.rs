//! Experiment configuration (TOML) and the models it resolves to.
//!
//! Every field is optional in the file; missing fields take the defaults
//! below. Command-line flags override the file.
//!
//! ```toml
//! preset = "olmoe-toy"          # or give a full [model] table instead
//! seed = 0                      # master seed: weights, draft noise, calibration
//! seeds = [1, 2]                # evaluation seeds (prompt sets)
//! prompts = 2                   # prompts per evaluation seed
//! prompt_len = 16
//! gen_len = 32
//! tree_sizes = [63]
//! budgets = [32]
//! methods = ["static", "router", "oracle"]
//! policies = ["truncation", "substitution"]
//! error_modes = ["substitution", "truncation", "raw"]
//! uses_raw_g = true
//! calibration_tokens = 2048
//! analysis_tokens = 2048
//! # static_ranking = "static_ranking.json"
//! workers = 1
//! out_dir = "results"
//!
//! [draft]
//! noise_std = 0.05
//!
//! [cost]
//! bytes_expert = 1.0
//! bytes_shared = 64.0
//! draft_step_cost = 14.5
//! selection_overhead_frac = 0.025
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ErrorMode;
use crate::budget::{calibrate_static, calibration_streams, CalibrationCounts, Method};
use crate::coverage::CoveragePolicy;
use crate::error::{Error, Result};
use crate::model::{build_target, derive_draft, DraftSpec, MoEModel, ModelConfig};
use crate::numerics::Rng;
use crate::sim::{CostModelParams, RunContext};

/// Substream of the master seed used for draft perturbation.
pub const DRAFT_STREAM: u64 = 1;
/// Substream of the master seed used for the static calibration stream.
pub const CALIBRATION_STREAM: u64 = 2;
/// Substream of the master seed used for co-activation token streams.
pub const ANALYSIS_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub draft: DraftSpec,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub tree_sizes: Vec<usize>,
    pub budgets: Vec<usize>,
    pub methods: Vec<Method>,
    pub policies: Vec<CoveragePolicy>,
    pub error_modes: Vec<String>,
    pub uses_raw_g: bool,
    pub calibration_tokens: usize,
    pub analysis_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_ranking: Option<PathBuf>,
    pub cost: CostModelParams,
    /// Not echoed into outputs: results never depend on it.
    #[serde(skip_serializing)]
    pub workers: usize,
    /// Not echoed into outputs.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            model: None,
            draft: DraftSpec::default(),
            seed: 0,
            seeds: vec![1, 2],
            prompts: 2,
            prompt_len: 16,
            gen_len: 32,
            tree_sizes: vec![63],
            budgets: vec![32],
            methods: Method::ALL.to_vec(),
            policies: CoveragePolicy::ALL.to_vec(),
            error_modes: vec!["substitution".into(), "truncation".into(), "raw".into()],
            uses_raw_g: true,
            calibration_tokens: 2048,
            analysis_tokens: 2048,
            static_ranking: None,
            cost: CostModelParams::default(),
            workers: 1,
            out_dir: PathBuf::from("results"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub preset: Option<String>,
    pub budgets: Option<Vec<usize>>,
    pub methods: Option<Vec<Method>>,
    pub policies: Option<Vec<CoveragePolicy>>,
    pub tree_sizes: Option<Vec<usize>>,
    pub gen_len: Option<usize>,
}

fn non_empty<T>(field: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    Ok(())
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(p) = &o.preset {
            self.preset = Some(p.clone());
            self.model = None;
        }
        if let Some(b) = &o.budgets {
            self.budgets = b.clone();
        }
        if let Some(m) = &o.methods {
            self.methods = m.clone();
        }
        if let Some(p) = &o.policies {
            self.policies = p.clone();
        }
        if let Some(t) = &o.tree_sizes {
            self.tree_sizes = t.clone();
        }
        if let Some(g) = o.gen_len {
            self.gen_len = g;
        }
    }

    /// Model architecture, with weights seeded by the master seed.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match (&self.model, &self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => ModelConfig::default(),
        };
        m.seed = self.seed;
        Ok(m)
    }

    pub fn error_modes(&self) -> Result<Vec<ErrorMode>> {
        self.error_modes
            .iter()
            .map(|s| match s.as_str() {
                "raw" => Ok(ErrorMode::Raw {
                    uses_raw_g: self.uses_raw_g,
                }),
                other => other
                    .parse::<CoveragePolicy>()
                    .map(|policy| ErrorMode::Policy { policy })
                    .map_err(|_| Error::config("error_modes", format!("unknown mode `{other}`"))),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.is_some() && self.preset.is_some() {
            return Err(Error::config("preset", "give either a preset or a [model] table, not both"));
        }
        let model = self.model_config()?;
        model.validate()?;
        self.draft.validate(model.layers)?;
        self.cost.validate()?;
        non_empty("seeds", &self.seeds)?;
        non_empty("tree_sizes", &self.tree_sizes)?;
        non_empty("budgets", &self.budgets)?;
        non_empty("methods", &self.methods)?;
        non_empty("policies", &self.policies)?;
        non_empty("error_modes", &self.error_modes)?;
        self.error_modes()?;
        positive("prompts", self.prompts)?;
        positive("prompt_len", self.prompt_len)?;
        positive("gen_len", self.gen_len)?;
        positive("calibration_tokens", self.calibration_tokens)?;
        positive("analysis_tokens", self.analysis_tokens)?;
        positive("workers", self.workers)?;
        if self.budgets.contains(&0) {
            return Err(Error::config("budgets", "every budget must be at least 1"));
        }
        if self.tree_sizes.contains(&0) {
            return Err(Error::config("tree_sizes", "every tree size must be at least 1"));
        }
        Ok(())
    }

    /// The config as echoed into output headers.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Static ranking file: calibration counts plus the per-layer order they
/// imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticRanking {
    pub counts: CalibrationCounts,
    pub order: Vec<Vec<usize>>,
}

impl StaticRanking {
    pub fn new(counts: CalibrationCounts) -> Result<Self> {
        let order = (0..counts.counts.len())
            .map(|l| crate::numerics::top_k_indices(&counts.layer_scores(l), counts.counts[l].len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(StaticRanking { counts, order })
    }
}

/// Target, draft and calibration counts built from a validated config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub target: MoEModel,
    pub draft: MoEModel,
    pub calibration: CalibrationCounts,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let target = build_target(&config.model_config()?)?;
        let draft = derive_draft(&target, &config.draft, &mut Rng::with_stream(config.seed, DRAFT_STREAM))?;
        let calibration = match &config.static_ranking {
            Some(path) => load_static_ranking(path, &target)?,
            None => calibrate_static(
                &target,
                &calibration_streams(
                    &Rng::with_stream(config.seed, CALIBRATION_STREAM),
                    config.calibration_tokens,
                    config.prompt_len,
                    target.vocab(),
                ),
            )?,
        };
        Ok(Experiment {
            config: config.clone(),
            target,
            draft,
            calibration,
        })
    }

    pub fn context(&self) -> RunContext<'_> {
        RunContext {
            target: &self.target,
            draft: &self.draft,
            calibration: Some(&self.calibration),
            cost: self.config.cost,
            uses_raw_g: self.config.uses_raw_g,
        }
    }
}

#[derive(Deserialize)]
struct RankingEnvelope {
    data: StaticRanking,
}

fn load_static_ranking(path: &Path, target: &MoEModel) -> Result<CalibrationCounts> {
    let text = fs::read_to_string(path)?;
    let env: RankingEnvelope = serde_json::from_str(&text)?;
    let c = env.data.counts;
    if c.counts.len() != target.num_layers() || c.counts.iter().any(|l| l.len() != target.num_experts()) {
        return Err(Error::config("static_ranking", "ranking does not match the model's layers and experts"));
    }
    Ok(c)
}
