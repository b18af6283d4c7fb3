//! Draft trees and the expert-union statistics they induce.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchOutput, FullMoe, MoEModel, PrefixCache, TreeSession};
use crate::moe::RoutingRecord;
use crate::numerics::{argmax, mean, top_k_indices, Rng};

/// Static tree topology: every node at level `i` gets `branching[i]` children
/// (ranked by draft logits), expanded breadth-first and cut off after
/// `max_nodes` nodes. Level 0 is the single root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeShape {
    pub branching: Vec<usize>,
    pub max_nodes: Option<usize>,
}

/// Branching pattern used for sized trees: 4, 4, then 2 per level.
const SIZED_PATTERN_HEAD: [usize; 2] = [4, 4];
const SIZED_PATTERN_TAIL: usize = 2;

impl TreeShape {
    pub fn chain(depth: usize) -> Self {
        TreeShape {
            branching: vec![1; depth.saturating_sub(1)],
            max_nodes: None,
        }
    }

    /// Tree of exactly `m` nodes using the (4, 4, 2, 2, ...) pattern. Trees of
    /// different sizes are breadth-first prefixes of one another.
    pub fn for_size(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::usage("tree size must be at least 1"));
        }
        let mut branching = Vec::new();
        let (mut total, mut level) = (1usize, 1usize);
        while total < m {
            let b = SIZED_PATTERN_HEAD
                .get(branching.len())
                .copied()
                .unwrap_or(SIZED_PATTERN_TAIL);
            branching.push(b);
            level *= b;
            total += level;
        }
        Ok(TreeShape {
            branching,
            max_nodes: Some(m),
        })
    }

    /// Node count of the realized tree.
    pub fn size(&self) -> usize {
        let (mut total, mut level) = (1usize, 1usize);
        for &b in &self.branching {
            level = level.saturating_mul(b);
            total = total.saturating_add(level);
        }
        self.max_nodes.map_or(total, |m| m.min(total))
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.branching.contains(&0) {
            return Err(Error::usage("branching factors must be positive"));
        }
        if let Some(&b) = self.branching.iter().find(|&&b| b > vocab) {
            return Err(Error::usage(format!(
                "branching factor {b} exceeds vocabulary of {vocab}"
            )));
        }
        if self.max_nodes == Some(0) {
            return Err(Error::usage("max_nodes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub token: usize,
    pub depth: usize,
}

/// Nodes in topological (breadth-first) order with a single root at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftTree {
    nodes: Vec<TreeNode>,
}

#[derive(Serialize, Deserialize)]
struct NodeLine {
    index: usize,
    parent: Option<usize>,
    token: usize,
    depth: usize,
}

impl DraftTree {
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::usage("a tree needs at least one node"));
        }
        for (i, n) in nodes.iter().enumerate() {
            match n.parent {
                None if i == 0 && n.depth == 0 => {}
                None => return Err(Error::usage("exactly one root, at index 0, depth 0")),
                Some(p) if p < i && nodes[p].depth + 1 == n.depth => {}
                Some(_) => {
                    return Err(Error::usage(format!(
                        "node {i}: parent must precede it and sit one level up"
                    )))
                }
            }
        }
        Ok(DraftTree { nodes })
    }

    /// A chain: each token the child of the previous.
    pub fn chain(tokens: &[usize]) -> Result<Self> {
        DraftTree::from_nodes(
            tokens
                .iter()
                .enumerate()
                .map(|(i, &token)| TreeNode {
                    parent: i.checked_sub(1),
                    token,
                    depth: i,
                })
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of levels (a lone root has depth 1).
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().map_or(0, |d| d + 1)
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    /// Node indices from the root down to `node`, inclusive.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (index, n) in self.nodes.iter().enumerate() {
            let line = NodeLine {
                index,
                parent: n.parent,
                token: n.token,
                depth: n.depth,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut nodes = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let n: NodeLine = serde_json::from_str(&line)?;
            if n.index != nodes.len() {
                return Err(Error::Format(format!(
                    "node lines out of order: expected index {}, got {}",
                    nodes.len(),
                    n.index
                )));
            }
            nodes.push(TreeNode {
                parent: n.parent,
                token: n.token,
                depth: n.depth,
            });
        }
        DraftTree::from_nodes(nodes)
    }
}

/// Breadth-first draft expansion. The root is the draft's greedy token after
/// the context; each node's children are its top-b draft tokens.
pub fn build_tree(draft: &MoEModel, prefix: &PrefixCache, shape: &TreeShape) -> Result<DraftTree> {
    shape.validate(draft.vocab())?;
    let max_nodes = shape.size();
    let mut session = TreeSession::new(draft, prefix);
    let root = TreeNode {
        parent: None,
        token: argmax(prefix.last_logits()),
        depth: 0,
    };
    let mut nodes = vec![root];
    session.push(&[(None, root.token)], &mut FullMoe)?;
    let mut frontier = vec![0usize];
    for (level, &b) in shape.branching.iter().enumerate() {
        if nodes.len() >= max_nodes {
            break;
        }
        let mut next = Vec::new();
        'expand: for &p in &frontier {
            for token in top_k_indices(session.logits(p), b)? {
                if nodes.len() + next.len() >= max_nodes {
                    break 'expand;
                }
                next.push(TreeNode {
                    parent: Some(p),
                    token,
                    depth: level + 1,
                });
            }
        }
        if next.is_empty() {
            break;
        }
        let last = level + 1 == shape.branching.len() || nodes.len() + next.len() >= max_nodes;
        if !last {
            let batch: Vec<(Option<usize>, usize)> = next.iter().map(|n| (n.parent, n.token)).collect();
            session.push(&batch, &mut FullMoe)?;
        }
        let start = nodes.len();
        nodes.extend(next);
        frontier = (start..nodes.len()).collect();
    }
    DraftTree::from_nodes(nodes)
}

/// Same as [`build_tree`] but starting from raw context tokens.
pub fn build_tree_from_context(
    draft: &MoEModel,
    context: &[usize],
    shape: &TreeShape,
) -> Result<DraftTree> {
    let prefix = PrefixCache::new(draft, context)?;
    build_tree(draft, &prefix, shape)
}

/// Natural routing of every tree node at every MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeRouting {
    pub layers: Vec<Vec<RoutingRecord>>,
}

impl TreeRouting {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &[RoutingRecord] {
        &self.layers[layer]
    }
}

/// Full target forward over `tree` on top of the target's context cache.
pub fn target_tree_forward(
    target: &MoEModel,
    prefix: &PrefixCache,
    tree: &DraftTree,
) -> Result<(TreeRouting, BatchOutput)> {
    let mut session = TreeSession::new(target, prefix);
    let nodes: Vec<(Option<usize>, usize)> = tree.nodes().iter().map(|n| (n.parent, n.token)).collect();
    let out = session.push(&nodes, &mut FullMoe)?;
    let routing = TreeRouting {
        layers: out.routing.clone(),
    };
    Ok((routing, out))
}

/// Union of natural top-k selections over all tokens of one layer.
pub fn expert_union(routing: &TreeRouting, layer: usize) -> BTreeSet<usize> {
    union_of(routing.layer(layer))
}

pub fn union_of(records: &[RoutingRecord]) -> BTreeSet<usize> {
    records.iter().flat_map(|r| r.selected.iter().copied()).collect()
}

/// Seeded uniformly random context.
pub fn random_prompt(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

pub fn random_prompts(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| random_prompt(&mut root.split(i as u64), len, vocab))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionPoint {
    pub tree_size: usize,
    pub mean_per_layer: Vec<f64>,
    pub mean: f64,
}

/// Mean expert-union size per layer as a function of tree size, one tree per
/// prompt and size.
pub fn union_growth_curve(
    target: &MoEModel,
    draft: &MoEModel,
    prompts: &[Vec<usize>],
    sizes: &[usize],
) -> Result<Vec<UnionPoint>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::usage("tree sizes must be ascending"));
    }
    if prompts.is_empty() {
        return Err(Error::usage("need at least one prompt"));
    }
    let layers = target.num_layers();
    let mut sums = vec![vec![0.0; layers]; sizes.len()];
    for prompt in prompts {
        let dprefix = PrefixCache::new(draft, prompt)?;
        let tprefix = PrefixCache::new(target, prompt)?;
        for (si, &m) in sizes.iter().enumerate() {
            let tree = build_tree(draft, &dprefix, &TreeShape::for_size(m)?)?;
            let (routing, _) = target_tree_forward(target, &tprefix, &tree)?;
            for (l, s) in sums[si].iter_mut().enumerate() {
                *s += expert_union(&routing, l).len() as f64;
            }
        }
    }
    let n = prompts.len() as f64;
    Ok(sizes
        .iter()
        .zip(sums)
        .map(|(&tree_size, s)| {
            let mean_per_layer: Vec<f64> = s.into_iter().map(|v| v / n).collect();
            UnionPoint {
                tree_size,
                mean: mean(&mean_per_layer),
                mean_per_layer,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_target, forward_causal, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_ff: 16,
            num_experts: 16,
            top_k: 4,
            layers: 2,
            vocab: 32,
            renormalize: true,
            skew: 1.0,
            seed: 5,
        }
    }

    #[test]
    fn sized_shapes() {
        assert_eq!(TreeShape::for_size(63).unwrap().branching, vec![4, 4, 2, 2]);
        for m in [1, 3, 7, 15, 31, 63, 127, 255] {
            assert_eq!(TreeShape::for_size(m).unwrap().size(), m);
        }
        assert_eq!(TreeShape::for_size(1).unwrap().branching, Vec::<usize>::new());
    }

    #[test]
    fn chain_tree_is_greedy_rollout() {
        let m = build_target(&cfg()).unwrap();
        let ctx = [1, 2, 3];
        let tree = build_tree_from_context(&m, &ctx, &TreeShape::chain(5)).unwrap();
        assert_eq!(tree.len(), 5);
        let mut seq = ctx.to_vec();
        for _ in 0..5 {
            let out = forward_causal(&m, &seq).unwrap();
            seq.push(argmax(out.logits.last().unwrap()));
        }
        assert_eq!(tree.tokens(), seq[3..].to_vec());
    }

    #[test]
    fn root_only_tree() {
        let m = build_target(&cfg()).unwrap();
        let shape = TreeShape {
            branching: vec![],
            max_nodes: None,
        };
        let tree = build_tree_from_context(&m, &[4], &shape).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn default_tree_has_63_nodes() {
        let m = build_target(&cfg()).unwrap();
        let tree = build_tree_from_context(&m, &[4, 9], &TreeShape::for_size(63).unwrap()).unwrap();
        assert_eq!(tree.len(), 63);
        assert_eq!(tree.depth(), 5);
    }

    #[test]
    fn branching_wider_than_vocab_rejected() {
        let m = build_target(&cfg()).unwrap();
        let shape = TreeShape {
            branching: vec![40],
            max_nodes: None,
        };
        assert!(matches!(
            build_tree_from_context(&m, &[1], &shape),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn single_node_union_is_top_k() {
        let m = build_target(&cfg()).unwrap();
        let prefix = PrefixCache::new(&m, &[3, 3]).unwrap();
        let tree = DraftTree::chain(&[7]).unwrap();
        let (routing, _) = target_tree_forward(&m, &prefix, &tree).unwrap();
        assert_eq!(expert_union(&routing, 0).len(), 4);
    }

    #[test]
    fn union_of_identical_records_is_k() {
        let r = RoutingRecord::from_probs(vec![0.1, 0.2, 0.3, 0.4], 2).unwrap();
        let routing = TreeRouting {
            layers: vec![vec![r.clone(), r.clone(), r]],
        };
        assert_eq!(expert_union(&routing, 0), BTreeSet::from([2, 3]));
    }

    #[test]
    fn invalid_trees_rejected() {
        let root = TreeNode {
            parent: None,
            token: 0,
            depth: 0,
        };
        assert!(DraftTree::from_nodes(vec![root, root]).is_err());
        let bad_child = TreeNode {
            parent: Some(0),
            token: 1,
            depth: 2,
        };
        assert!(DraftTree::from_nodes(vec![root, bad_child]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let m = build_target(&cfg()).unwrap();
        let tree = build_tree_from_context(&m, &[2, 5], &TreeShape::for_size(15).unwrap()).unwrap();
        let mut buf = Vec::new();
        tree.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"index\":0,\"parent\":null,"));
        let back = DraftTree::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, tree);
    }
}
