//! Routing traces as JSON lines.
//!
//! Each line describes one token at one layer, either densely
//! (`{"layer": 0, "probs": [...]}`, optionally with `"selected"`) or sparsely
//! (`{"layer": 0, "topk": [[index, prob], ...]}`). Experts missing from a
//! sparse record have probability 0.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingRecord;
use crate::numerics::top_k_indices;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selected: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topk: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_experts: Option<usize>,
}

/// Records grouped by layer, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub layers: BTreeMap<usize, Vec<RoutingRecord>>,
}

impl Trace {
    pub fn push(&mut self, layer: usize, record: RoutingRecord) {
        self.layers.entry(layer).or_default().push(record);
    }

    pub fn len(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Parsed {
    Dense { layer: usize, probs: Vec<f64>, selected: Option<Vec<usize>> },
    Sparse { layer: usize, topk: Vec<(usize, f64)>, num_experts: Option<usize> },
}

/// Reads a trace. `default_k` sizes the selection of dense records that carry
/// no `selected` field.
pub fn read_trace<R: BufRead>(reader: R, default_k: Option<usize>) -> Result<Trace> {
    let mut parsed = Vec::new();
    let mut width = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Format(format!("trace line {}: {msg}", lineno + 1));
        let t: TraceLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        match (t.probs, t.topk) {
            (Some(probs), None) => {
                if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(at("probs must be non-empty, finite and non-negative".into()));
                }
                width = width.max(probs.len());
                parsed.push(Parsed::Dense {
                    layer: t.layer,
                    probs,
                    selected: t.selected,
                });
            }
            (None, Some(topk)) => {
                if topk.is_empty() || topk.iter().any(|(_, p)| !p.is_finite() || *p < 0.0) {
                    return Err(at("topk must be non-empty with finite, non-negative probabilities".into()));
                }
                if let Some(max) = topk.iter().map(|x| x.0).max() {
                    width = width.max(max + 1);
                }
                if let Some(n) = t.num_experts {
                    width = width.max(n);
                }
                parsed.push(Parsed::Sparse {
                    layer: t.layer,
                    topk,
                    num_experts: t.num_experts,
                });
            }
            _ => return Err(at("exactly one of `probs` or `topk` is required".into())),
        }
    }
    let mut trace = Trace::default();
    for p in parsed {
        match p {
            Parsed::Dense { layer, probs, selected } => {
                if probs.len() != width {
                    return Err(Error::Format("dense records disagree on the number of experts".into()));
                }
                let selected = match selected {
                    Some(s) => {
                        if s.iter().any(|&i| i >= width) {
                            return Err(Error::Format("selected index out of range".into()));
                        }
                        s
                    }
                    None => {
                        let k = default_k
                            .ok_or_else(|| Error::Format("dense record without `selected` and no k given".into()))?;
                        top_k_indices(&probs, k)?
                    }
                };
                trace.push(layer, RoutingRecord { probs, selected });
            }
            Parsed::Sparse { layer, topk, num_experts } => {
                let n = num_experts.unwrap_or(width);
                let mut probs = vec![0.0; n];
                for &(i, p) in &topk {
                    if i >= n {
                        return Err(Error::Format(format!("topk index {i} out of range")));
                    }
                    probs[i] = p;
                }
                let mut selected: Vec<usize> = topk.iter().map(|x| x.0).collect();
                selected.sort_by(|&a, &b| crate::numerics::rank_order(&probs, a, b));
                selected.dedup();
                trace.push(layer, RoutingRecord { probs, selected });
            }
        }
    }
    Ok(trace)
}

/// Writes dense records, one line per (layer, token).
pub fn write_trace<W: Write>(mut w: W, layers: &[(usize, &[RoutingRecord])]) -> Result<()> {
    for &(layer, records) in layers {
        for r in records {
            let line = TraceLine {
                layer,
                probs: Some(r.probs.clone()),
                selected: Some(r.selected.clone()),
                topk: None,
                num_experts: None,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip() {
        let r = RoutingRecord::from_probs(vec![0.1, 0.6, 0.3], 2).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &[(2, std::slice::from_ref(&r))]).unwrap();
        let t = read_trace(buf.as_slice(), None).unwrap();
        assert_eq!(t.layers[&2], vec![r]);
    }

    #[test]
    fn sparse_records_fill_zeros() {
        let text = "{\"layer\":0,\"topk\":[[3,0.5],[1,0.25]]}\n{\"layer\":0,\"topk\":[[0,0.7],[1,0.2]]}\n";
        let t = read_trace(text.as_bytes(), None).unwrap();
        let recs = &t.layers[&0];
        assert_eq!(recs[0].probs, vec![0.0, 0.25, 0.0, 0.5]);
        assert_eq!(recs[0].selected, vec![3, 1]);
        assert_eq!(recs[1].probs.len(), 4);
    }

    #[test]
    fn dense_without_selection_uses_k() {
        let text = "{\"layer\":1,\"probs\":[0.2,0.5,0.3]}\n";
        assert!(read_trace(text.as_bytes(), None).is_err());
        let t = read_trace(text.as_bytes(), Some(1)).unwrap();
        assert_eq!(t.layers[&1][0].selected, vec![1]);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(read_trace("{\"layer\":0}\n".as_bytes(), Some(1)).is_err());
        assert!(read_trace("not json\n".as_bytes(), Some(1)).is_err());
        assert!(read_trace("{\"layer\":0,\"probs\":[-1.0]}\n".as_bytes(), Some(1)).is_err());
    }
}
