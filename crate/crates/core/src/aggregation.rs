//! Knowledge-guided hierarchical aggregation: meta-path derivation by
//! random walk, attribute-reach neighbor search, and L layers of
//! multi-head multi-relation attention followed by modality pooling and a
//! mean readout.

use crate::graph::{relation_between, GraphVars, HetGraph, Modality, Relation};
use crate::tensor::{dropout, Tape, Var};
use crate::{CoreError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// An attribute sequence linked by cross-modal relations, at most two hops.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetaPath {
    pub attrs: Vec<Modality>,
    pub rels: Vec<Relation>,
}

impl MetaPath {
    pub fn hops(&self) -> usize {
        self.rels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attrs.len() != self.rels.len() + 1 || self.rels.is_empty() {
            return Err(CoreError::InvalidValue("malformed meta-path".into()));
        }
        for (pair, rel) in self.attrs.windows(2).zip(&self.rels) {
            match relation_between(pair[0], pair[1]) {
                Some(r) if r == *rel && r != Relation::IntraModal => {}
                _ => {
                    return Err(CoreError::InvalidValue(format!(
                        "step {}->{} is not a {} relation",
                        pair[0], pair[1], rel
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = self.attrs[0].to_string();
        for (a, r) in self.attrs[1..].iter().zip(&self.rels) {
            s.push_str(&format!(" -{r}-> {a}"));
        }
        s
    }
}

/// Random-walk meta-path derivation over the cross-modal relations in
/// `active`. Walks start at each attribute in turn, step only along valid
/// relations to unvisited attributes, and every prefix up to `max_hops`
/// is recorded. With enough walks this is the closure of valid simple
/// paths.
pub fn derive_meta_paths(
    active: &BTreeSet<Relation>,
    rng: &mut impl Rng,
    max_hops: usize,
    n_walks: usize,
) -> Vec<MetaPath> {
    let mut found = BTreeSet::new();
    for walk in 0..n_walks {
        let start = Modality::ALL[walk % Modality::ALL.len()];
        let mut attrs = vec![start];
        let mut rels = Vec::new();
        for _ in 0..max_hops {
            let here = *attrs.last().unwrap();
            let candidates: Vec<(Modality, Relation)> = Modality::ALL
                .iter()
                .filter(|m| !attrs.contains(m))
                .filter_map(|&m| match relation_between(here, m) {
                    Some(r) if r != Relation::IntraModal && active.contains(&r) => Some((m, r)),
                    _ => None,
                })
                .collect();
            if candidates.is_empty() {
                break;
            }
            let (next, rel) = candidates[rng.gen_range(0..candidates.len())];
            attrs.push(next);
            rels.push(rel);
            found.insert(MetaPath { attrs: attrs.clone(), rels: rels.clone() });
        }
    }
    found.into_iter().collect()
}

/// The knowledge-derived path set used by the model: every relation
/// active, two hops, walks fixed at 1000.
pub fn knowledge_meta_paths(rng: &mut impl Rng) -> Vec<MetaPath> {
    let active: BTreeSet<Relation> = Relation::ALL.into_iter().collect();
    derive_meta_paths(&active, rng, 2, 1000)
}

/// A seeded random subset of the valid path closure, for the ablation
/// that strips knowledge guidance. Each path is kept with probability
/// one half, at least one survives.
pub fn random_meta_paths(rng: &mut impl Rng) -> Vec<MetaPath> {
    let all = knowledge_meta_paths(rng);
    let mut subset: Vec<MetaPath> = all.iter().filter(|_| rng.gen::<f64>() < 0.5).cloned().collect();
    if subset.is_empty() {
        subset.push(all[rng.gen_range(0..all.len())].clone());
    }
    subset
}

/// Attribute-reach neighbor search: walk every path in `paths` that starts
/// at the node's attribute for up to `hops` hops, collect all visited
/// attributes, and return every other node whose attribute was collected
/// or equals the node's own (the intra-modal floor).
pub fn meta_path_neighbors(
    g: &HetGraph,
    v: usize,
    paths: &[MetaPath],
    hops: usize,
) -> Result<Vec<usize>> {
    if v >= g.nodes.len() {
        return Err(CoreError::InvalidGraph(format!(
            "node {v} not in graph of {} nodes",
            g.nodes.len()
        )));
    }
    let modalities: Vec<Modality> = g.nodes.iter().map(|n| n.modality).collect();
    Ok(reach_set(&modalities, v, paths, hops))
}

fn reach_set(modalities: &[Modality], v: usize, paths: &[MetaPath], hops: usize) -> Vec<usize> {
    let attr = modalities[v];
    let mut reached: BTreeSet<Modality> = BTreeSet::new();
    reached.insert(attr);
    for p in paths {
        if p.attrs.first() != Some(&attr) {
            continue;
        }
        for h in 1..=hops.min(p.hops()) {
            reached.insert(p.attrs[h]);
        }
    }
    (0..modalities.len())
        .filter(|&u| u != v && reached.contains(&modalities[u]))
        .collect()
}

/// How each target's neighbor set is chosen.
#[derive(Debug, Clone)]
pub enum NeighborRule {
    /// Attribute reach along meta-paths with the given hop budget.
    MetaPaths { paths: Vec<MetaPath>, hops: usize },
    /// Every other node (homogeneous ablations).
    All,
}

/// Per-target neighbor lists used by the aggregation layers. Built from
/// the rule's attribute reach intersected with actual incoming edges, so
/// augmented graphs with dropped edges stay consistent.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    pub neighbors: Vec<Vec<usize>>,
}

pub fn build_neighbor_index(
    modalities: &[Modality],
    edges: &[(usize, usize, Relation)],
    rule: &NeighborRule,
) -> NeighborIndex {
    let n = modalities.len();
    let mut incoming: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(src, dst, _) in edges {
        incoming[dst].insert(src);
    }
    let neighbors = (0..n)
        .map(|v| {
            let base: Vec<usize> = match rule {
                NeighborRule::MetaPaths { paths, hops } => reach_set(modalities, v, paths, *hops),
                NeighborRule::All => (0..n).filter(|&u| u != v).collect(),
            };
            base.into_iter().filter(|u| incoming[v].contains(u)).collect()
        })
        .collect();
    NeighborIndex { neighbors }
}

/// Bound projection vars for one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionLayerVars {
    /// Per attribute `[d, d]` projections.
    pub key: BTreeMap<Modality, Var>,
    pub query: BTreeMap<Modality, Var>,
    pub value: BTreeMap<Modality, Var>,
    /// Per relation `[d]` column and bias turning the scalar edge feature
    /// into a per-head key.
    pub edge_w: BTreeMap<Relation, Var>,
    pub edge_b: BTreeMap<Relation, Var>,
}

/// Shape knobs for the attention stack.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual: bool,
    pub layer_norm: bool,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn head_slices(tape: &mut Tape, v: Var, heads: usize, dh: usize) -> Result<Vec<Var>> {
    (0..heads).map(|j| tape.slice(v, j * dh, dh)).collect()
}

/// Per-head normalized attention weights for one target: scores are the
/// head-sliced triple products key * edge-key * query summed over the head
/// dim, scaled by 1/sqrt(d), then softmaxed over the neighbor set.
fn sra_from_slices(
    tape: &mut Tape,
    k_rows_by_head: &[Vec<Var>],
    e_rows_by_head: &[Vec<Var>],
    q_by_head: &[Var],
    dim: usize,
) -> Result<Vec<Var>> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(q_by_head.len());
    for j in 0..q_by_head.len() {
        let k = tape.stack_rows(&k_rows_by_head[j])?;
        let e = tape.stack_rows(&e_rows_by_head[j])?;
        let scores = tape.rows_triple_dot(k, e, q_by_head[j])?;
        let scores = tape.scale(scores, scale);
        out.push(tape.softmax_vec(scores)?);
    }
    Ok(out)
}

/// Edge-key var: `w_rel * edge_feature + b_rel`, a `[d]` vector.
fn edge_key(tape: &mut Tape, layer: &AttentionLayerVars, rel: Relation, feat: Var) -> Result<Var> {
    let scaled = tape.mul_scalar_var(layer.edge_w[&rel], feat)?;
    tape.add(scaled, layer.edge_b[&rel])
}

/// Standalone attention scores for one target node: one weight vector per
/// head over `neighbors`, each summing to one. Every neighbor must have an
/// edge into the target.
pub fn attention_scores(
    tape: &mut Tape,
    graph: &GraphVars,
    target: usize,
    neighbors: &[usize],
    layer: &AttentionLayerVars,
    cfg: &AttentionConfig,
) -> Result<Vec<Var>> {
    if neighbors.is_empty() {
        return Err(CoreError::InvalidValue("attention over empty neighbor set".into()));
    }
    let lookup = graph.edge_lookup();
    let dh = cfg.head_dim();

    let q_full = tape.matvec(layer.query[&graph.modalities[target]], graph.node_feats[target])?;
    let q_by_head = head_slices(tape, q_full, cfg.heads, dh)?;

    let mut k_rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.heads];
    let mut e_rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.heads];
    for &s in neighbors {
        let edge_idx = *lookup
            .get(&(s, target))
            .ok_or(CoreError::NeighborWithoutRelation { src: s, dst: target })?;
        let k_full = tape.matvec(layer.key[&graph.modalities[s]], graph.node_feats[s])?;
        let ek_full = edge_key(tape, layer, graph.edges[edge_idx].2, graph.edge_feats[edge_idx])?;
        let ks = head_slices(tape, k_full, cfg.heads, dh)?;
        let es = head_slices(tape, ek_full, cfg.heads, dh)?;
        for j in 0..cfg.heads {
            k_rows[j].push(ks[j]);
            e_rows[j].push(es[j]);
        }
    }
    sra_from_slices(tape, &k_rows, &e_rows, &q_by_head, cfg.dim)
}

/// One aggregation layer over the whole graph: per-head attention-weighted
/// sums of value projections, heads concatenated back to `d`. Targets with
/// empty neighbor sets keep their features. Dropout hits updated features
/// in training mode.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_layer(
    tape: &mut Tape,
    graph: &GraphVars,
    index: &NeighborIndex,
    layer: &AttentionLayerVars,
    cfg: &AttentionConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    let n = graph.modalities.len();
    let dh = cfg.head_dim();
    let lookup = graph.edge_lookup();

    // Project and head-slice each node once per layer.
    let mut k_slices: Vec<Option<Vec<Var>>> = vec![None; n];
    let mut v_slices: Vec<Option<Vec<Var>>> = vec![None; n];
    let mut q_slices: Vec<Option<Vec<Var>>> = vec![None; n];
    let ensure = |tape: &mut Tape,
                      slices: &mut Vec<Option<Vec<Var>>>,
                      proj: &BTreeMap<Modality, Var>,
                      node: usize|
     -> Result<()> {
        if slices[node].is_none() {
            let full = tape.matvec(proj[&graph.modalities[node]], graph.node_feats[node])?;
            slices[node] = Some(head_slices(tape, full, cfg.heads, dh)?);
        }
        Ok(())
    };

    // Edge keys are shared by every (target, neighbor) pair that uses the
    // edge; memoize per edge index.
    let mut ek_slices: Vec<Option<Vec<Var>>> = vec![None; graph.edges.len()];

    let mut new_feats = Vec::with_capacity(n);
    for t in 0..n {
        let nbrs = &index.neighbors[t];
        if nbrs.is_empty() {
            new_feats.push(graph.node_feats[t]);
            continue;
        }
        ensure(tape, &mut q_slices, &layer.query, t)?;
        let q_by_head = q_slices[t].clone().unwrap();

        let mut k_rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.heads];
        let mut e_rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.heads];
        let mut v_rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.heads];
        for &s in nbrs {
            let edge_idx = *lookup
                .get(&(s, t))
                .ok_or(CoreError::NeighborWithoutRelation { src: s, dst: t })?;
            ensure(tape, &mut k_slices, &layer.key, s)?;
            ensure(tape, &mut v_slices, &layer.value, s)?;
            if ek_slices[edge_idx].is_none() {
                let full = edge_key(tape, layer, graph.edges[edge_idx].2, graph.edge_feats[edge_idx])?;
                ek_slices[edge_idx] = Some(head_slices(tape, full, cfg.heads, dh)?);
            }
            for j in 0..cfg.heads {
                k_rows[j].push(k_slices[s].as_ref().unwrap()[j]);
                e_rows[j].push(ek_slices[edge_idx].as_ref().unwrap()[j]);
                v_rows[j].push(v_slices[s].as_ref().unwrap()[j]);
            }
        }

        let weights = sra_from_slices(tape, &k_rows, &e_rows, &q_by_head, cfg.dim)?;
        let mut heads_out = Vec::with_capacity(cfg.heads);
        for j in 0..cfg.heads {
            let vals = tape.stack_rows(&v_rows[j])?;
            heads_out.push(tape.weighted_sum_rows(vals, weights[j])?);
        }
        let mut out = tape.concat_vec(&heads_out)?;
        if cfg.residual {
            out = tape.add(out, graph.node_feats[t])?;
        }
        if cfg.layer_norm {
            out = tape.layer_norm_vec(out, 1e-5)?;
        }
        out = dropout(tape, out, cfg.dropout, training, rng)?;
        new_feats.push(out);
    }
    Ok(new_feats)
}

/// Modality-specific pooling then mean readout: prototype per present
/// modality is the mean of its nodes' final features; the graph feature is
/// the mean over present prototypes.
pub fn pool_and_readout(
    tape: &mut Tape,
    modalities: &[Modality],
    feats: &[Var],
) -> Result<(BTreeMap<Modality, Var>, Var)> {
    if modalities.is_empty() {
        return Err(CoreError::InvalidGraph("pooling an empty graph".into()));
    }
    let mut prototypes = BTreeMap::new();
    for m in Modality::ALL {
        let rows: Vec<Var> = modalities
            .iter()
            .zip(feats)
            .filter(|(&mm, _)| mm == m)
            .map(|(_, &v)| v)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let stacked = tape.stack_rows(&rows)?;
        prototypes.insert(m, tape.mean_rows(stacked)?);
    }
    let protos: Vec<Var> = prototypes.values().copied().collect();
    let stacked = tape.stack_rows(&protos)?;
    let readout = tape.mean_rows(stacked)?;
    Ok((prototypes, readout))
}
