//! Toy causal MoE transformer used as target and draft model.
//!
//! Blocks are pre-norm: `h += attn(norm(h)); h += moe(norm(h))`, with a
//! single attention head and scale-only RMS normalization. There is no
//! positional encoding; position information reaches the model only through
//! the attention mask.
//!
//! All forward paths (dense masked forward, prefix cache extension and tree
//! sessions) go through [`run_batch`], which processes a batch of positions
//! layer by layer. Each position's arithmetic depends only on the keys it can
//! see, in ascending position order, so a root-to-node path of a tree gives
//! bit-identical results to the same tokens run as a flat causal sequence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{mix_experts_batch, mixing_weights, route, Expert, MoELayerWeights, RouterWeights, RoutingRecord};
use crate::numerics::{axpy, dot, softmax, Mat, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub layers: usize,
    pub vocab: usize,
    pub renormalize: bool,
    /// Router-bias concentration; 0 makes experts exchangeable.
    pub skew: f64,
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["olmoe-toy", "qwen3-toy", "mixtral-toy"];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_ff: 64,
            num_experts: 64,
            top_k: 8,
            layers: 4,
            vocab: 256,
            renormalize: true,
            skew: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Named presets with the expert counts of OLMoE (64, k=8, renormalized),
    /// Qwen3 (128, k=8, raw weights) and Mixtral (8, k=2, renormalized).
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig::default();
        match name {
            "olmoe-toy" => Ok(base),
            "qwen3-toy" => Ok(ModelConfig {
                num_experts: 128,
                renormalize: false,
                ..base
            }),
            "mixtral-toy" => Ok(ModelConfig {
                num_experts: 8,
                top_k: 2,
                ..base
            }),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.d_ff", self.d_ff),
            ("model.num_experts", self.num_experts),
            ("model.top_k", self.top_k),
            ("model.layers", self.layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config("model.top_k", "must not exceed num_experts"));
        }
        if self.vocab < 2 {
            return Err(Error::config("model.vocab", "must be at least 2"));
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return Err(Error::config("model.skew", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub moe: MoELayerWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub embedding: Mat,
    pub blocks: Vec<Block>,
    pub head: Mat,
}

impl MoEModel {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.config.top_k
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(t) => Err(Error::usage(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            ))),
            None => Ok(()),
        }
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.head.matvec(&rms_norm(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DraftSpec {
    /// Gaussian weight noise relative to each matrix's own standard deviation.
    pub noise_std: f64,
    /// Leading blocks kept; `None` keeps all of them.
    pub layers_kept: Option<usize>,
}

impl Default for DraftSpec {
    fn default() -> Self {
        DraftSpec {
            noise_std: 0.05,
            layers_kept: None,
        }
    }
}

impl DraftSpec {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("draft.noise_std", "must be finite and >= 0"));
        }
        if let Some(n) = self.layers_kept {
            if n == 0 || n > layers {
                return Err(Error::config(
                    "draft.layers_kept",
                    format!("must be in 1..={layers}"),
                ));
            }
        }
        Ok(())
    }
}

const RMS_EPS: f64 = 1e-6;

/// Scale-only RMS normalization.
pub fn rms_norm(h: &[f64]) -> Vec<f64> {
    let ms = h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    h.iter().map(|v| v * inv).collect()
}

fn router_bias(n: usize, skew: f64, rng: &mut Rng) -> Vec<f64> {
    // expert perm[r] gets rank r
    let perm = rng.permutation(n);
    let mut bias = vec![0.0; n];
    for (rank, &expert) in perm.iter().enumerate() {
        bias[expert] = skew * (1.0 / (rank as f64 + 1.0)).ln();
    }
    bias
}

/// Randomly initialized MoE layer, as used by [`build_target`].
pub fn random_moe_layer(config: &ModelConfig, rng: &mut Rng) -> Result<MoELayerWeights> {
    let d = config.d;
    let scale = 1.0 / (d as f64).sqrt();
    let w = Mat::gaussian(config.num_experts, d, scale, rng);
    let bias = router_bias(config.num_experts, config.skew, rng);
    let experts = (0..config.num_experts)
        .map(|_| Expert::random(d, config.d_ff, rng))
        .collect();
    MoELayerWeights::new(
        RouterWeights { w, bias },
        experts,
        config.top_k,
        config.renormalize,
    )
}

/// Target model with i.i.d. Gaussian weights scaled by `1/sqrt(fan_in)`.
pub fn build_target(config: &ModelConfig) -> Result<MoEModel> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let d = config.d;
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = Mat::gaussian(config.vocab, d, 1.0, &mut root.split(0));
    let head = Mat::gaussian(config.vocab, d, scale, &mut root.split(1));
    let blocks = (0..config.layers)
        .map(|l| {
            let mut rng = root.split(100 + l as u64);
            Ok(Block {
                wq: Mat::gaussian(d, d, scale, &mut rng),
                wk: Mat::gaussian(d, d, scale, &mut rng),
                wv: Mat::gaussian(d, d, scale, &mut rng),
                wo: Mat::gaussian(d, d, scale, &mut rng),
                moe: random_moe_layer(config, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MoEModel {
        config: config.clone(),
        embedding,
        blocks,
        head,
    })
}

fn perturb(m: &Mat, noise_std: f64, rng: &mut Rng) -> Mat {
    let sigma = noise_std * m.std();
    let mut out = m.clone();
    if sigma > 0.0 {
        for v in &mut out.data {
            *v += sigma * rng.normal();
        }
    }
    out
}

fn perturb_vec(v: &[f64], noise_std: f64, rng: &mut Rng) -> Vec<f64> {
    let m = Mat {
        rows: 1,
        cols: v.len(),
        data: v.to_vec(),
    };
    perturb(&m, noise_std, rng).data
}

/// Draft model: the target's first `layers_kept` blocks with every weight
/// matrix perturbed by relative Gaussian noise.
pub fn derive_draft(target: &MoEModel, spec: &DraftSpec, rng: &mut Rng) -> Result<MoEModel> {
    spec.validate(target.num_layers())?;
    let kept = spec.layers_kept.unwrap_or(target.num_layers());
    let noise = spec.noise_std;
    let embedding = perturb(&target.embedding, noise, rng);
    let blocks = target.blocks[..kept]
        .iter()
        .map(|b| {
            let moe = &b.moe;
            let router = RouterWeights {
                w: perturb(&moe.router.w, noise, rng),
                bias: perturb_vec(&moe.router.bias, noise, rng),
            };
            let experts = moe
                .experts
                .iter()
                .map(|e| Expert {
                    w_in: perturb(&e.w_in, noise, rng),
                    w_out: perturb(&e.w_out, noise, rng),
                })
                .collect();
            Ok(Block {
                wq: perturb(&b.wq, noise, rng),
                wk: perturb(&b.wk, noise, rng),
                wv: perturb(&b.wv, noise, rng),
                wo: perturb(&b.wo, noise, rng),
                moe: MoELayerWeights::new(router, experts, moe.top_k, moe.renormalize)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = perturb(&target.head, noise, rng);
    let mut config = target.config.clone();
    config.layers = kept;
    Ok(MoEModel {
        config,
        embedding,
        blocks,
        head,
    })
}

/// Executes the MoE sublayer for a batch of routed tokens.
pub trait MoeExecutor {
    fn execute(
        &mut self,
        layer: usize,
        weights: &MoELayerWeights,
        inputs: &[Vec<f64>],
        records: &[RoutingRecord],
    ) -> Result<Vec<Vec<f64>>>;
}

/// The unbudgeted MoE: each token mixes its natural top-k experts.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullMoe;

impl MoeExecutor for FullMoe {
    fn execute(
        &mut self,
        _layer: usize,
        weights: &MoELayerWeights,
        inputs: &[Vec<f64>],
        records: &[RoutingRecord],
    ) -> Result<Vec<Vec<f64>>> {
        let w = records
            .iter()
            .map(|r| mixing_weights(r, &r.selected, weights.renormalize))
            .collect::<Result<Vec<_>>>()?;
        Ok(mix_experts_batch(weights, inputs, &w))
    }
}

/// Keys and values of one layer, one entry per position.
#[derive(Clone, Debug, Default)]
pub struct LayerKv {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-layer key/value storage.
#[derive(Clone, Debug, Default)]
pub struct KvStore {
    layers: Vec<LayerKv>,
}

impl KvStore {
    pub fn new(layers: usize) -> Self {
        KvStore {
            layers: vec![LayerKv::default(); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, other: KvStore) {
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            mine.keys.extend(theirs.keys);
            mine.values.extend(theirs.values);
        }
    }
}

/// A new position: it sees the first `base_visible` positions of the base
/// store, then the listed local positions (ascending, including itself).
#[derive(Clone, Debug)]
pub struct NewPosition {
    pub token: usize,
    pub base_visible: usize,
    pub local_visible: Vec<usize>,
}

/// Everything computed for a batch of positions.
#[derive(Clone, Debug, Default)]
pub struct BatchOutput {
    /// Residual stream `[layer + 1][position]`; index 0 is the embedding.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// Normalized MoE inputs `[layer][position]`.
    pub moe_inputs: Vec<Vec<Vec<f64>>>,
    /// Natural routing `[layer][position]`.
    pub routing: Vec<Vec<RoutingRecord>>,
    pub logits: Vec<Vec<f64>>,
}

fn attend(
    q: &[f64],
    base: &LayerKv,
    base_visible: usize,
    local: &LayerKv,
    local_visible: &[usize],
) -> Result<Vec<f64>> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut scores = Vec::with_capacity(base_visible + local_visible.len());
    for k in &base.keys[..base_visible] {
        scores.push(dot(q, k) * scale);
    }
    for &j in local_visible {
        scores.push(dot(q, &local.keys[j]) * scale);
    }
    let w = softmax(&scores)?;
    let mut ctx = vec![0.0; q.len()];
    for (p, v) in base.values[..base_visible].iter().enumerate() {
        axpy(&mut ctx, w[p], v);
    }
    for (n, &j) in local_visible.iter().enumerate() {
        axpy(&mut ctx, w[base_visible + n], &local.values[j]);
    }
    Ok(ctx)
}

/// Layer-major forward of a batch of new positions. Their keys and values are
/// appended to `local` (which must already hold any earlier local positions
/// they reference).
pub fn run_batch(
    model: &MoEModel,
    base: &KvStore,
    local: &mut KvStore,
    batch: &[NewPosition],
    exec: &mut dyn MoeExecutor,
) -> Result<BatchOutput> {
    let tokens: Vec<usize> = batch.iter().map(|p| p.token).collect();
    model.check_tokens(&tokens)?;
    let first_local = local.len();
    for p in batch {
        if p.base_visible > base.len() {
            return Err(Error::usage("position sees past the end of the base store"));
        }
        if p.local_visible.iter().any(|&j| j >= first_local + batch.len()) {
            return Err(Error::usage("position references an unknown local position"));
        }
        if p.base_visible + p.local_visible.len() == 0 {
            return Err(Error::usage("position attends to nothing"));
        }
    }
    let mut hs: Vec<Vec<f64>> = tokens.iter().map(|&t| model.embedding.row(t).to_vec()).collect();
    let mut out = BatchOutput {
        hidden: vec![hs.clone()],
        ..Default::default()
    };
    for (l, block) in model.blocks.iter().enumerate() {
        let mut queries = Vec::with_capacity(hs.len());
        {
            let kv = &mut local.layers[l];
            for h in &hs {
                let x = rms_norm(h);
                queries.push(block.wq.matvec(&x));
                kv.keys.push(block.wk.matvec(&x));
                kv.values.push(block.wv.matvec(&x));
            }
        }
        for (i, h) in hs.iter_mut().enumerate() {
            let p = &batch[i];
            let ctx = attend(&queries[i], &base.layers[l], p.base_visible, &local.layers[l], &p.local_visible)?;
            let o = block.wo.matvec(&ctx);
            axpy(h, 1.0, &o);
        }
        let inputs: Vec<Vec<f64>> = hs.iter().map(|h| rms_norm(h)).collect();
        let records = inputs
            .iter()
            .map(|x| route(&block.moe, x))
            .collect::<Result<Vec<_>>>()?;
        let moe_out = exec.execute(l, &block.moe, &inputs, &records)?;
        for (h, o) in hs.iter_mut().zip(&moe_out) {
            axpy(h, 1.0, o);
        }
        out.hidden.push(hs.clone());
        out.moe_inputs.push(inputs);
        out.routing.push(records);
    }
    out.logits = hs.iter().map(|h| model.logits(h)).collect();
    Ok(out)
}

/// Visibility lists, one per query position, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    visible: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        AttentionMask {
            visible: (0..n).map(|p| (0..=p).collect()).collect(),
        }
    }

    /// Context of `context_len` causal positions followed by tree nodes, each
    /// seeing the whole context, its ancestors and itself.
    pub fn tree(context_len: usize, parents: &[Option<usize>]) -> Result<Self> {
        let mut visible = AttentionMask::causal(context_len).visible;
        let mut node_lists: Vec<Vec<usize>> = Vec::with_capacity(parents.len());
        for (i, parent) in parents.iter().enumerate() {
            let mut list: Vec<usize> = (0..context_len).collect();
            if let Some(p) = *parent {
                if p >= i {
                    return Err(Error::usage("tree parents must precede children"));
                }
                list = node_lists[p].clone();
            }
            list.push(context_len + i);
            node_lists.push(list);
        }
        visible.extend(node_lists);
        Ok(AttentionMask { visible })
    }

    pub fn from_lists(visible: Vec<Vec<usize>>) -> Result<Self> {
        let n = visible.len();
        for list in &visible {
            if list.is_empty() || list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|&j| j >= n) {
                return Err(Error::usage("mask rows must be non-empty, ascending and in range"));
            }
        }
        Ok(AttentionMask { visible })
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn visible(&self, pos: usize) -> &[usize] {
        &self.visible[pos]
    }
}

/// Dense forward over `tokens` under an arbitrary mask.
pub fn forward(model: &MoEModel, tokens: &[usize], mask: &AttentionMask) -> Result<BatchOutput> {
    if mask.len() != tokens.len() {
        return Err(Error::usage("mask size differs from token count"));
    }
    let batch: Vec<NewPosition> = tokens
        .iter()
        .enumerate()
        .map(|(p, &token)| NewPosition {
            token,
            base_visible: 0,
            local_visible: mask.visible(p).to_vec(),
        })
        .collect();
    let empty = KvStore::new(model.num_layers());
    let mut local = KvStore::new(model.num_layers());
    run_batch(model, &empty, &mut local, &batch, &mut FullMoe)
}

pub fn forward_causal(model: &MoEModel, tokens: &[usize]) -> Result<BatchOutput> {
    forward(model, tokens, &AttentionMask::causal(tokens.len()))
}

/// Keys/values of an already processed causal context, plus the logits at
/// its last position.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    store: KvStore,
    tokens: Vec<usize>,
    last_logits: Vec<f64>,
}

impl PrefixCache {
    pub fn new(model: &MoEModel, context: &[usize]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::usage("context must be non-empty"));
        }
        let mut cache = PrefixCache {
            store: KvStore::new(model.num_layers()),
            tokens: Vec::new(),
            last_logits: Vec::new(),
        };
        cache.extend(model, context)?;
        Ok(cache)
    }

    pub fn extend(&mut self, model: &MoEModel, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let start = self.store.len();
        let batch: Vec<NewPosition> = tokens
            .iter()
            .enumerate()
            .map(|(i, &token)| NewPosition {
                token,
                base_visible: start,
                local_visible: (0..=i).collect(),
            })
            .collect();
        let mut local = KvStore::new(model.num_layers());
        let out = run_batch(model, &self.store, &mut local, &batch, &mut FullMoe)?;
        self.store.append(local);
        self.tokens.extend_from_slice(tokens);
        self.last_logits = out.logits.last().cloned().unwrap_or_default();
        Ok(())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }
}

/// Incremental tree forward on top of a prefix cache. Nodes are added in
/// topological order; each attends to the full context, its ancestors and
/// itself.
pub struct TreeSession<'a> {
    model: &'a MoEModel,
    prefix: &'a PrefixCache,
    local: KvStore,
    parents: Vec<Option<usize>>,
    paths: Vec<Vec<usize>>,
    logits: Vec<Vec<f64>>,
}

impl<'a> TreeSession<'a> {
    pub fn new(model: &'a MoEModel, prefix: &'a PrefixCache) -> Self {
        TreeSession {
            model,
            prefix,
            local: KvStore::new(model.num_layers()),
            parents: Vec::new(),
            paths: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Adds `(parent, token)` nodes as one layer-major batch.
    pub fn push(
        &mut self,
        nodes: &[(Option<usize>, usize)],
        exec: &mut dyn MoeExecutor,
    ) -> Result<BatchOutput> {
        let start = self.parents.len();
        let mut batch = Vec::with_capacity(nodes.len());
        for (i, &(parent, token)) in nodes.iter().enumerate() {
            let own = start + i;
            let mut path = match parent {
                Some(p) if p < own => self.paths[p].clone(),
                Some(_) => return Err(Error::usage("tree parents must precede children")),
                None => Vec::new(),
            };
            path.push(own);
            batch.push(NewPosition {
                token,
                base_visible: self.prefix.len(),
                local_visible: path.clone(),
            });
            self.parents.push(parent);
            self.paths.push(path);
        }
        let out = run_batch(self.model, self.prefix.store(), &mut self.local, &batch, exec)?;
        self.logits.extend(out.logits.iter().cloned());
        Ok(out)
    }

    pub fn logits(&self, node: usize) -> &[f64] {
        &self.logits[node]
    }
}

pub const MODEL_FORMAT: &str = "moe-budget-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model: a JSON document with a format tag, version and the
/// config, followed by all weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub draft: Option<DraftSpec>,
    pub weights: MoEModel,
}

impl ModelFile {
    pub fn new(model: &MoEModel, draft: Option<DraftSpec>) -> Self {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config: model.config.clone(),
            draft,
            weights: model.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file: format `{}`", file.format)));
        }
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", file.version)));
        }
        if file.config != file.weights.config {
            return Err(Error::Format("header config disagrees with weights".into()));
        }
        check_shapes(&file.weights)?;
        Ok(file)
    }
}

fn check_shapes(m: &MoEModel) -> Result<()> {
    let c = &m.config;
    let bad = |what: &str| Err(Error::Format(format!("shape mismatch in {what}")));
    if (m.embedding.rows, m.embedding.cols) != (c.vocab, c.d) {
        return bad("embedding");
    }
    if (m.head.rows, m.head.cols) != (c.vocab, c.d) {
        return bad("head");
    }
    if m.blocks.len() != c.layers {
        return bad("layer count");
    }
    for b in &m.blocks {
        for w in [&b.wq, &b.wk, &b.wv, &b.wo] {
            if (w.rows, w.cols) != (c.d, c.d) {
                return bad("attention");
            }
        }
        if b.moe.num_experts() != c.num_experts || b.moe.top_k != c.top_k || b.moe.dim() != c.d {
            return bad("moe layer");
        }
        for e in &b.moe.experts {
            if (e.w_in.rows, e.w_in.cols, e.w_out.rows, e.w_out.cols) != (c.d, c.d_ff, c.d_ff, c.d) {
                return bad("expert");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_ff: 16,
            num_experts: 8,
            top_k: 2,
            layers: 2,
            vocab: 32,
            renormalize: true,
            skew: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn presets_have_expected_shapes() {
        let m = ModelConfig::preset("mixtral-toy").unwrap();
        assert_eq!((m.num_experts, m.top_k), (8, 2));
        let q = ModelConfig::preset("qwen3-toy").unwrap();
        assert_eq!((q.num_experts, q.top_k, q.renormalize), (128, 8, false));
        assert!(ModelConfig::preset("gpt").is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_target(&small_config()).unwrap();
        let b = build_target(&small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_full_draft_is_target() {
        let t = build_target(&small_config()).unwrap();
        let spec = DraftSpec {
            noise_std: 0.0,
            layers_kept: None,
        };
        let d = derive_draft(&t, &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(d, t);
    }

    #[test]
    fn draft_keeps_leading_layers() {
        let t = build_target(&small_config()).unwrap();
        let spec = DraftSpec {
            noise_std: 0.1,
            layers_kept: Some(1),
        };
        let d = derive_draft(&t, &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(d.num_layers(), 1);
        assert_ne!(d.blocks[0].wq, t.blocks[0].wq);
        let bad = DraftSpec {
            noise_std: 0.1,
            layers_kept: Some(3),
        };
        assert!(derive_draft(&t, &bad, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn token_out_of_range_rejected() {
        let t = build_target(&small_config()).unwrap();
        assert!(matches!(forward_causal(&t, &[1, 40]), Err(Error::Usage(_))));
    }

    #[test]
    fn single_token_tree_equals_causal() {
        let t = build_target(&small_config()).unwrap();
        let causal = forward_causal(&t, &[5]).unwrap();
        let tree = forward(&t, &[5], &AttentionMask::tree(0, &[None]).unwrap()).unwrap();
        assert_eq!(causal.logits, tree.logits);
    }

    #[test]
    fn zero_attention_reduces_to_embedding_path() {
        let mut t = build_target(&small_config()).unwrap();
        for b in &mut t.blocks {
            b.wq = Mat::zeros(8, 8);
            b.wk = Mat::zeros(8, 8);
            b.wv = Mat::zeros(8, 8);
            b.wo = Mat::zeros(8, 8);
        }
        let out = forward_causal(&t, &[7]).unwrap();
        let mut h = t.embedding.row(7).to_vec();
        for b in &t.blocks {
            let o = crate::moe::moe_forward_full(&b.moe, &rms_norm(&h)).unwrap();
            axpy(&mut h, 1.0, &o);
        }
        assert_eq!(out.logits[0], t.logits(&h));
    }

    #[test]
    fn prefix_cache_matches_dense_causal() {
        let t = build_target(&small_config()).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let dense = forward_causal(&t, &tokens).unwrap();
        let mut cache = PrefixCache::new(&t, &tokens[..3]).unwrap();
        cache.extend(&t, &tokens[3..5]).unwrap();
        cache.extend(&t, &tokens[5..]).unwrap();
        assert_eq!(cache.last_logits(), dense.logits.last().unwrap().as_slice());
    }

    #[test]
    fn model_file_round_trip() {
        let t = build_target(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ModelFile::new(&t, None).save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back.weights, t);
    }

    #[test]
    fn model_file_rejects_wrong_format() {
        let t = build_target(&small_config()).unwrap();
        let mut f = ModelFile::new(&t, None);
        f.format = "something-else".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        f.save(&path).unwrap();
        assert!(matches!(ModelFile::load(&path), Err(Error::Format(_))));
    }
}
