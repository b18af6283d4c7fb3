//! A single mixture-of-experts layer: router, expert MLPs and mixing weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax, top_k_indices, Mat, Rng};

/// One routing vector per expert (`w`, N x d) plus an additive per-expert
/// logit bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights {
    pub w: Mat,
    pub bias: Vec<f64>,
}

impl RouterWeights {
    pub fn num_experts(&self) -> usize {
        self.w.rows
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.w.rows)
            .map(|i| dot(self.w.row(i), h) + self.bias[i])
            .collect()
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Two-layer MLP expert: `silu(h W_in) W_out`. `w_in` is `d x d_ff` and
/// `w_out` is `d_ff x d`, so both products are sums of scaled rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub w_in: Mat,
    pub w_out: Mat,
}

impl Expert {
    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut inner = Vec::new();
        let mut out = vec![0.0; self.w_out.cols];
        self.forward_into(h, &mut inner, &mut out);
        out
    }

    /// [`Expert::forward`] writing into `out`, with `inner` as scratch.
    pub fn forward_into(&self, h: &[f64], inner: &mut Vec<f64>, out: &mut [f64]) {
        debug_assert_eq!(h.len(), self.w_in.rows);
        inner.clear();
        inner.resize(self.w_in.cols, 0.0);
        for (j, &x) in h.iter().enumerate() {
            axpy(inner, x, self.w_in.row(j));
        }
        for v in inner.iter_mut() {
            *v = silu(*v);
        }
        out.fill(0.0);
        for (j, &x) in inner.iter().enumerate() {
            axpy(out, x, self.w_out.row(j));
        }
    }

    /// [`Expert::forward`] on every input, bit-identical to calling it per
    /// input.
    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Vec<Vec<f64>> {
        let mut inner = vec![Vec::new(); inputs.len()];
        self.w_in.left_mul_rows(inputs, &mut inner);
        for v in inner.iter_mut().flatten() {
            *v = silu(*v);
        }
        let inner: Vec<&[f64]> = inner.iter().map(Vec::as_slice).collect();
        let mut out = vec![Vec::new(); inputs.len()];
        self.w_out.left_mul_rows(&inner, &mut out);
        out
    }

    pub fn random(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        let w_in = Mat::gaussian(d_ff, d, 1.0 / (d as f64).sqrt(), rng);
        let w_out = Mat::gaussian(d, d_ff, 1.0 / (d_ff as f64).sqrt(), rng);
        Expert {
            w_in: w_in.transpose(),
            w_out: w_out.transpose(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayerWeights {
    pub router: RouterWeights,
    pub experts: Vec<Expert>,
    pub top_k: usize,
    pub renormalize: bool,
}

impl MoELayerWeights {
    pub fn new(
        router: RouterWeights,
        experts: Vec<Expert>,
        top_k: usize,
        renormalize: bool,
    ) -> Result<Self> {
        let n = router.num_experts();
        if experts.len() != n {
            return Err(Error::usage(format!(
                "router has {n} rows but {} experts were given",
                experts.len()
            )));
        }
        if router.bias.len() != n {
            return Err(Error::usage("router bias length must equal expert count"));
        }
        if top_k == 0 || top_k > n {
            return Err(Error::usage(format!("need 1 <= k <= N, got k={top_k}, N={n}")));
        }
        Ok(MoELayerWeights {
            router,
            experts,
            top_k,
            renormalize,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.w.cols
    }
}

/// Router probabilities for one token and its natural top-k selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
}

impl RoutingRecord {
    pub fn from_probs(probs: Vec<f64>, k: usize) -> Result<Self> {
        let selected = top_k_indices(&probs, k)?;
        Ok(RoutingRecord { probs, selected })
    }

    pub fn num_experts(&self) -> usize {
        self.probs.len()
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// Probability mass of the natural top-k set.
    pub fn selected_mass(&self) -> f64 {
        self.selected.iter().map(|&i| self.probs[i]).sum()
    }
}

pub fn route(layer: &MoELayerWeights, h: &[f64]) -> Result<RoutingRecord> {
    if h.len() != layer.dim() {
        return Err(Error::usage(format!(
            "hidden state has length {}, layer expects {}",
            h.len(),
            layer.dim()
        )));
    }
    let probs = softmax(&layer.router.logits(h))?;
    RoutingRecord::from_probs(probs, layer.top_k)
}

/// Mixing weights over `over`, in the same order. With `renormalize` the raw
/// probabilities are divided by their sum over `over`.
pub fn mixing_weights(
    record: &RoutingRecord,
    over: &[usize],
    renormalize: bool,
) -> Result<Vec<(usize, f64)>> {
    if over.is_empty() {
        return Err(Error::usage("mixing weights over an empty expert set"));
    }
    if let Some(&bad) = over.iter().find(|&&i| i >= record.probs.len()) {
        return Err(Error::usage(format!("expert index {bad} out of range")));
    }
    let raw = over.iter().map(|&i| (i, record.probs[i]));
    if !renormalize {
        return Ok(raw.collect());
    }
    let total: f64 = over.iter().map(|&i| record.probs[i]).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "routing mass over the mixing set is zero".into(),
        ));
    }
    Ok(raw.map(|(i, g)| (i, g / total)).collect())
}

/// `sum_i weight_i * E_i(h)`, accumulated in the order given.
pub fn mix_experts(layer: &MoELayerWeights, h: &[f64], weights: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for &(i, w) in weights {
        axpy(&mut out, w, &layer.experts[i].forward(h));
    }
    out
}

/// [`mix_experts`] over many tokens at once, evaluating each expert on all
/// the tokens that use it in one batch. Matches per-token mixing bit for bit.
pub fn mix_experts_batch(layer: &MoELayerWeights, inputs: &[Vec<f64>], weights: &[Vec<(usize, f64)>]) -> Vec<Vec<f64>> {
    debug_assert_eq!(inputs.len(), weights.len());
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); layer.num_experts()];
    let slots: Vec<Vec<usize>> = weights
        .iter()
        .enumerate()
        .map(|(t, w)| {
            w.iter()
                .map(|&(i, _)| {
                    let u = &mut users[i];
                    if u.last() != Some(&t) {
                        u.push(t);
                    }
                    u.len() - 1
                })
                .collect()
        })
        .collect();
    let outputs: Vec<Vec<Vec<f64>>> = users
        .iter()
        .zip(&layer.experts)
        .map(|(u, e)| {
            if u.is_empty() {
                return Vec::new();
            }
            let rows: Vec<&[f64]> = u.iter().map(|&t| inputs[t].as_slice()).collect();
            e.forward_batch(&rows)
        })
        .collect();
    inputs
        .iter()
        .zip(weights.iter().zip(&slots))
        .map(|(h, (w, slot))| {
            let mut out = vec![0.0; h.len()];
            for (&(i, g), &s) in w.iter().zip(slot) {
                axpy(&mut out, g, &outputs[i][s]);
            }
            out
        })
        .collect()
}

/// Unbudgeted layer output for an already-routed token.
pub fn moe_output(layer: &MoELayerWeights, h: &[f64], record: &RoutingRecord) -> Result<Vec<f64>> {
    let w = mixing_weights(record, &record.selected, layer.renormalize)?;
    Ok(mix_experts(layer, h, &w))
}

/// Full (unbudgeted) MoE layer: route, then mix the natural top-k experts.
pub fn moe_forward_full(layer: &MoELayerWeights, h: &[f64]) -> Result<Vec<f64>> {
    let record = route(layer, h)?;
    moe_output(layer, h, &record)
}
