//! Slow reference implementations used by the test suites.
//!
//! Everything here favors straight-line clarity over speed and stays
//! independent of the tape, the attention code, and the metric
//! implementations it cross-checks. Production code must not call into
//! this module.

use crate::graph::{relation_between, Modality, Relation};
use crate::aggregation::MetaPath;
use std::collections::{BTreeMap, BTreeSet};

/// Exhaustive DFS over simple attribute paths of 1..=max_hops hops whose
/// every step is a cross-modal relation in `active`.
pub fn enumerate_meta_paths(active: &BTreeSet<Relation>, max_hops: usize) -> Vec<MetaPath> {
    let mut out = BTreeSet::new();
    fn extend(
        path: &mut Vec<Modality>,
        rels: &mut Vec<Relation>,
        active: &BTreeSet<Relation>,
        max_hops: usize,
        out: &mut BTreeSet<MetaPath>,
    ) {
        if path.len() > 1 {
            out.insert(MetaPath { attrs: path.clone(), rels: rels.clone() });
        }
        if path.len() > max_hops {
            return;
        }
        for next in Modality::ALL {
            if path.contains(&next) {
                continue;
            }
            match relation_between(*path.last().unwrap(), next) {
                Some(r) if r != Relation::IntraModal && active.contains(&r) => {
                    path.push(next);
                    rels.push(r);
                    extend(path, rels, active, max_hops, out);
                    rels.pop();
                    path.pop();
                }
                _ => {}
            }
        }
    }
    for start in Modality::ALL {
        let mut path = vec![start];
        let mut rels = Vec::new();
        extend(&mut path, &mut rels, active, max_hops, &mut out);
    }
    out.into_iter().collect()
}

/// Literal walk-and-collect neighbor search: walk every meta-path starting
/// at the node's attribute for up to `hops` hops, collect every visited
/// attribute, then gather all nodes of a collected or same attribute.
pub fn reach_neighbors(
    modalities: &[Modality],
    v: usize,
    paths: &[MetaPath],
    hops: usize,
) -> Vec<usize> {
    let attr = modalities[v];
    let mut reached = BTreeSet::new();
    reached.insert(attr); // intra-modal floor
    for p in paths {
        if p.attrs.first() != Some(&attr) {
            continue;
        }
        for h in 1..=hops.min(p.attrs.len() - 1) {
            reached.insert(p.attrs[h]);
        }
    }
    (0..modalities.len())
        .filter(|&u| u != v && reached.contains(&modalities[u]))
        .collect()
}

/// Plain-tensor attention parameters for the reference layer.
pub struct RefAttention {
    pub dim: usize,
    pub heads: usize,
    /// Per attribute, row-major `[d, d]`.
    pub key: BTreeMap<Modality, Vec<f64>>,
    pub query: BTreeMap<Modality, Vec<f64>>,
    pub value: BTreeMap<Modality, Vec<f64>>,
    /// Per relation: column `[d]` and bias `[d]` mapping the scalar edge
    /// feature to a per-head key.
    pub edge_w: BTreeMap<Relation, Vec<f64>>,
    pub edge_b: BTreeMap<Relation, Vec<f64>>,
}

fn matvec(m: &[f64], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    (0..d_out)
        .map(|i| (0..d_in).map(|j| m[i * d_in + j] * x[j]).collect::<Vec<f64>>().iter().sum())
        .collect()
}

/// Nested-loop evaluation of one multi-head multi-relation attention
/// layer: per-attribute K/Q/V projections, per-relation scalar-to-vector
/// edge keys, per-head scaled triple-product scores softmaxed over each
/// target's neighbor set, heads concatenated. Targets with no neighbors
/// keep their features.
///
/// Returns (new features, per-target per-head weights).
#[allow(clippy::type_complexity)]
pub fn attention_reference(
    modalities: &[Modality],
    features: &[Vec<f64>],
    edges: &[(usize, usize, Relation, f64)],
    neighbors: &[Vec<usize>],
    params: &RefAttention,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let d = params.dim;
    let h = params.heads;
    let dh = d / h;
    let n = modalities.len();

    let edge_map: BTreeMap<(usize, usize), (Relation, f64)> = edges
        .iter()
        .map(|&(s, t, r, w)| ((s, t), (r, w)))
        .collect();

    let keys: Vec<Vec<f64>> = (0..n)
        .map(|i| matvec(&params.key[&modalities[i]], &features[i], d, d))
        .collect();
    let queries: Vec<Vec<f64>> = (0..n)
        .map(|i| matvec(&params.query[&modalities[i]], &features[i], d, d))
        .collect();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|i| matvec(&params.value[&modalities[i]], &features[i], d, d))
        .collect();

    let mut new_feats = Vec::with_capacity(n);
    let mut all_weights = Vec::with_capacity(n);
    for t in 0..n {
        let nbrs = &neighbors[t];
        if nbrs.is_empty() {
            new_feats.push(features[t].clone());
            all_weights.push(Vec::new());
            continue;
        }
        let mut head_weights = Vec::with_capacity(h);
        let mut out = vec![0.0; d];
        for j in 0..h {
            let lo = j * dh;
            // SHA scores over the neighbor set
            let mut scores = Vec::with_capacity(nbrs.len());
            for &s in nbrs {
                let (rel, w) = edge_map[&(s, t)];
                let mut score = 0.0;
                for k in lo..lo + dh {
                    let e_k = params.edge_w[&rel][k] * w + params.edge_b[&rel][k];
                    score += keys[s][k] * e_k * queries[t][k];
                }
                scores.push(score / (d as f64).sqrt());
            }
            // per-head softmax over the neighbor set
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for (wi, &s) in weights.iter().zip(nbrs) {
                for k in 0..dh {
                    out[lo + k] += wi * values[s][lo + k];
                }
            }
            head_weights.push(weights);
        }
        new_feats.push(out);
        all_weights.push(head_weights);
    }
    (new_feats, all_weights)
}

/// One-vs-rest AUC by exhaustive pair counting (ties count half).
/// Returns `None` when a class has no positives or no negatives.
pub fn auc_binary_pairs(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positives).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positives).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for p in &pos {
        for q in &neg {
            total += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

/// Concordance index by exhaustive pair counting. Pairs (i, j) are
/// comparable when i is uncensored and `t_i < t_j`; concordant when
/// `risk_i > risk_j`, ties in risk count half. `None` without comparable
/// pairs.
pub fn cindex_pairs(risks: &[f64], times: &[f64], censored: &[bool]) -> Option<f64> {
    let n = risks.len();
    let mut num = 0.0;
    let mut den = 0usize;
    for i in 0..n {
        if censored[i] {
            continue;
        }
        for j in 0..n {
            if i == j || times[i] >= times[j] {
                continue;
            }
            den += 1;
            num += if risks[i] > risks[j] {
                1.0
            } else if risks[i] == risks[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    if den == 0 {
        None
    } else {
        Some(num / den as f64)
    }
}
