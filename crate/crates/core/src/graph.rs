//! Typed heterogeneous graph model and the feature-to-graph transform.
//!
//! Nodes carry one of four modality attributes (genomics, image, cell
//! graph, text); directed edges carry a relation attribute determined by
//! the endpoint modalities. Edge features are the cosine similarity of the
//! endpoint feature vectors at construction time.

use crate::data::SubjectRecord;
use crate::tensor::{cosine_slices, Tape, Tensor, Var};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Node attribute: the clinical modality of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Genomics,
    Image,
    Cell,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Genomics, Modality::Image, Modality::Cell, Modality::Text];

    pub fn letter(self) -> char {
        match self {
            Modality::Genomics => 'G',
            Modality::Image => 'I',
            Modality::Cell => 'C',
            Modality::Text => 'T',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'G' => Some(Modality::Genomics),
            'I' => Some(Modality::Image),
            'C' => Some(Modality::Cell),
            'T' => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Genomics => 0,
            Modality::Image => 1,
            Modality::Cell => 2,
            Modality::Text => 3,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Edge attribute: the semantic relation implied by the endpoint modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    Express,
    Depict,
    Atomize,
    IntraModal,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Express, Relation::Depict, Relation::Atomize, Relation::IntraModal];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Express => "express",
            Relation::Depict => "depict",
            Relation::Atomize => "atomize",
            Relation::IntraModal => "intra_modal",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Relation::Express => 0,
            Relation::Depict => 1,
            Relation::Atomize => 2,
            Relation::IntraModal => 3,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// The unique relation implied by an (unordered) modality pair, if any.
/// Genomics-cell, genomics-text, and cell-text pairs have no relation.
pub fn relation_between(a: Modality, b: Modality) -> Option<Relation> {
    use Modality::*;
    if a == b {
        return Some(Relation::IntraModal);
    }
    match (a, b) {
        (Genomics, Image) | (Image, Genomics) => Some(Relation::Express),
        (Image, Text) | (Text, Image) => Some(Relation::Depict),
        (Image, Cell) | (Cell, Image) => Some(Relation::Atomize),
        _ => None,
    }
}

/// Raw cell graph: per-cell features plus undirected adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGraph {
    pub features: Vec<Vec<f64>>,
    pub adjacency: Vec<(usize, usize)>,
}

impl CellGraph {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(CoreError::EmptyCellGraph);
        }
        let d = self.features[0].len();
        if self.features.iter().any(|f| f.len() != d) {
            return Err(CoreError::Shape("ragged cell features".into()));
        }
        let n = self.features.len();
        if self.adjacency.iter().any(|&(a, b)| a >= n || b >= n) {
            return Err(CoreError::InvalidGraph("cell adjacency index out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetNode {
    pub modality: Modality,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
    pub weight: f64,
}

/// Typed graph for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetGraph {
    pub subject_id: String,
    pub nodes: Vec<HetNode>,
    pub edges: Vec<HetEdge>,
}

impl HetGraph {
    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn modality_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for n in &self.nodes {
            counts[n.modality.index()] += 1;
        }
        counts
    }

    pub fn nodes_of(&self, m: Modality) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.modality == m)
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural validation: attribute-consistent relations, no self
    /// loops, no forbidden modality pairs, uniform finite features.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CoreError::InvalidGraph("graph has no nodes".into()));
        }
        let d = self.feature_dim();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.features.len() != d {
                return Err(CoreError::InvalidGraph(format!(
                    "node {i} has dim {} but graph dim is {d}",
                    n.features.len()
                )));
            }
            if n.features.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::InvalidGraph(format!("node {i} has non-finite features")));
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(CoreError::InvalidGraph(format!("edge {k} endpoint out of range")));
            }
            if e.src == e.dst {
                return Err(CoreError::InvalidGraph(format!("edge {k} is a self-loop")));
            }
            let expected = relation_between(self.nodes[e.src].modality, self.nodes[e.dst].modality);
            match expected {
                Some(r) if r == e.relation => {}
                Some(r) => {
                    return Err(CoreError::InvalidGraph(format!(
                        "edge {k} labelled {} but endpoints imply {}",
                        e.relation, r
                    )))
                }
                None => {
                    return Err(CoreError::InvalidGraph(format!(
                        "edge {k} connects {}-{} which have no relation",
                        self.nodes[e.src].modality, self.nodes[e.dst].modality
                    )))
                }
            }
            if !e.weight.is_finite() {
                return Err(CoreError::InvalidGraph(format!("edge {k} has non-finite weight")));
            }
        }
        Ok(())
    }

    /// Full validation for freshly built or completed graphs: structure
    /// plus the complete-topology edge-count formula with every
    /// relation-valid ordered pair present exactly once.
    pub fn validate_complete(&self) -> Result<()> {
        self.validate()?;
        let expected = expected_edge_count(self.modality_counts());
        if self.edges.len() != expected {
            return Err(CoreError::InvalidGraph(format!(
                "edge count {} but formula gives {expected}",
                self.edges.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edges {
            if !seen.insert((e.src, e.dst)) {
                return Err(CoreError::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        for i in 0..self.nodes.len() {
            for j in 0..self.nodes.len() {
                if i == j {
                    continue;
                }
                let related = relation_between(self.nodes[i].modality, self.nodes[j].modality).is_some();
                if related != seen.contains(&(i, j)) {
                    return Err(CoreError::InvalidGraph(format!(
                        "pair ({i}, {j}) presence does not match relation table"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Line-oriented debug dump, stable across runs for golden-file tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let d = self.feature_dim();
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("node {i} {} dim={d}\n", n.modality));
        }
        for e in &self.edges {
            out.push_str(&format!("edge {} {} {} {:.6}\n", e.src, e.dst, e.relation, e.weight));
        }
        out
    }

    /// Lookup map from (src, dst) to edge index.
    pub fn edge_index(&self) -> BTreeMap<(usize, usize), usize> {
        self.edges
            .iter()
            .enumerate()
            .map(|(k, e)| ((e.src, e.dst), k))
            .collect()
    }
}

/// Edge count of the complete typed topology:
/// `2*n_G*n_I + 2*n_I*n_T + 2*n_I*n_C + sum_m n_m*(n_m - 1)`.
pub fn expected_edge_count(counts: [usize; 4]) -> usize {
    let [g, i, c, t] = counts;
    2 * g * i + 2 * i * t + 2 * i * c + counts.iter().map(|n| n * n.saturating_sub(1)).sum::<usize>()
}

/// Cosine similarity of two equal-length vectors. Returns 0 when either
/// norm is 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(CoreError::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_slices(u, v))
}

/// How intra-modal instances are wired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntraModalTopology {
    /// Complete directed digraph without self loops.
    Complete,
    /// Each node receives edges from its k most cosine-similar
    /// same-modality nodes.
    Knn(usize),
}

/// Whether edges follow the typed relation table or connect every pair
/// (used by the homogeneous-graph ablation; labels are inert there because
/// the ablation also shares one edge projection).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TopologyMode {
    Typed,
    AllPairs,
}

/// Directed edge list over node modalities, in (src, dst) lexicographic
/// order. `features` are only consulted by the knn intra-modal mode.
pub fn topology_edges(
    modalities: &[Modality],
    features: &[Vec<f64>],
    intra: IntraModalTopology,
    mode: TopologyMode,
) -> Vec<(usize, usize, Relation)> {
    let n = modalities.len();
    // For knn: per node, the set of allowed same-modality sources.
    let knn_sources: Option<Vec<Vec<usize>>> = match intra {
        IntraModalTopology::Complete => None,
        IntraModalTopology::Knn(k) => Some(
            (0..n)
                .map(|v| {
                    let mut sims: Vec<(usize, f64)> = (0..n)
                        .filter(|&u| u != v && modalities[u] == modalities[v])
                        .map(|u| (u, cosine_slices(&features[u], &features[v])))
                        .collect();
                    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
                    sims.truncate(k);
                    sims.into_iter().map(|(u, _)| u).collect()
                })
                .collect(),
        ),
    };

    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            if src == dst {
                continue;
            }
            match mode {
                TopologyMode::AllPairs => {
                    let rel = relation_between(modalities[src], modalities[dst])
                        .unwrap_or(Relation::IntraModal);
                    edges.push((src, dst, rel));
                }
                TopologyMode::Typed => match relation_between(modalities[src], modalities[dst]) {
                    Some(Relation::IntraModal) => {
                        let keep = match &knn_sources {
                            None => true,
                            Some(srcs) => srcs[dst].contains(&src),
                        };
                        if keep {
                            edges.push((src, dst, Relation::IntraModal));
                        }
                    }
                    Some(rel) => edges.push((src, dst, rel)),
                    None => {}
                },
            }
        }
    }
    edges
}

/// One linear-plus-ELU projection of a raw instance onto the graph space.
pub fn project_instance(tape: &mut Tape, weight: Var, bias: Var, x: &[f64]) -> Result<Var> {
    let xin = tape.constant(Tensor::vector(x.to_vec()));
    let h = tape.matvec(weight, xin)?;
    let h = tape.add(h, bias)?;
    Ok(tape.elu(h))
}

/// One round of symmetric-normalized neighbor averaging with self loops,
/// linear projection, ELU, then mean pooling over cells.
pub fn cell_graph_gcn_tape(tape: &mut Tape, g: &CellGraph, weight: Var, bias: Var) -> Result<Var> {
    g.validate()?;
    let n = g.features.len();
    let d_raw = g.features[0].len();
    if tape.value(weight).cols() != d_raw {
        return Err(CoreError::Shape(format!(
            "gcn weight expects dim {}, cell features have {d_raw}",
            tape.value(weight).cols()
        )));
    }

    // Dense normalized adjacency with self loops: D^{-1/2} (A + I) D^{-1/2}.
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        adj[i * n + i] = 1.0;
    }
    for &(a, b) in &g.adjacency {
        if a != b {
            adj[a * n + b] = 1.0;
            adj[b * n + a] = 1.0;
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| (0..n).map(|j| adj[i * n + j]).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if adj[i * n + j] != 0.0 {
                adj[i * n + j] /= (degrees[i] * degrees[j]).sqrt();
            }
        }
    }

    let adj = tape.constant(Tensor::new(vec![n, n], adj)?);
    let x = tape.constant(Tensor::new(vec![n, d_raw], g.features.iter().flatten().copied().collect())?);
    let mixed = tape.matmul(adj, x)?;
    // weight is [d_out, d_raw]; project rows via (mixed x weight^T) done as
    // per-row matvec to reuse the vector kernels.
    let d_out = tape.value(weight).rows();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.gather_rows(mixed, &[i])?;
        let row = tape.mean_rows(row)?; // [1,d] -> [d]
        let h = tape.matvec(weight, row)?;
        let h = tape.add(h, bias)?;
        rows.push(tape.elu(h));
    }
    let stacked = tape.stack_rows(&rows)?;
    let pooled = tape.mean_rows(stacked)?;
    debug_assert_eq!(tape.value(pooled).numel(), d_out);
    Ok(pooled)
}

/// Concrete wrapper around [`cell_graph_gcn_tape`].
pub fn cell_graph_gcn(g: &CellGraph, weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let out = cell_graph_gcn_tape(&mut tape, g, w, b)?;
    Ok(tape.value(out).data().to_vec())
}

/// Per-modality input projection parameters for the concrete build path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityProjection {
    /// `[d, d_in]`
    pub weight: Tensor,
    /// `[d]`
    pub bias: Tensor,
}

/// Graph under construction on a tape: topology plus feature vars.
pub struct GraphVars {
    pub subject_id: String,
    pub modalities: Vec<Modality>,
    pub node_feats: Vec<Var>,
    pub edges: Vec<(usize, usize, Relation)>,
    pub edge_feats: Vec<Var>,
}

impl GraphVars {
    /// Materialize current tape values into a concrete [`HetGraph`].
    pub fn to_het_graph(&self, tape: &Tape) -> HetGraph {
        HetGraph {
            subject_id: self.subject_id.clone(),
            nodes: self
                .modalities
                .iter()
                .zip(&self.node_feats)
                .map(|(&m, &v)| HetNode { modality: m, features: tape.value(v).data().to_vec() })
                .collect(),
            edges: self
                .edges
                .iter()
                .zip(&self.edge_feats)
                .map(|(&(src, dst, relation), &w)| HetEdge {
                    src,
                    dst,
                    relation,
                    weight: tape.value(w).item(),
                })
                .collect(),
        }
    }

    pub fn edge_lookup(&self) -> BTreeMap<(usize, usize), usize> {
        self.edges
            .iter()
            .enumerate()
            .map(|(k, &(s, d, _))| ((s, d), k))
            .collect()
    }
}

/// Compute cosine edge features on the tape for a fixed topology.
pub fn edge_features_on_tape(
    tape: &mut Tape,
    node_feats: &[Var],
    edges: &[(usize, usize, Relation)],
) -> Result<Vec<Var>> {
    edges
        .iter()
        .map(|&(src, dst, _)| tape.cosine_pair(node_feats[src], node_feats[dst]))
        .collect()
}

/// Build a subject's typed graph on the tape: one node per present
/// instance, features projected through the per-modality projections,
/// edges for every relation-valid ordered pair with cosine features.
pub fn build_graph_on_tape(
    tape: &mut Tape,
    subject: &SubjectRecord,
    projections: &BTreeMap<Modality, (Var, Var)>,
    gcn: Option<(Var, Var)>,
    intra: IntraModalTopology,
    mode: TopologyMode,
) -> Result<GraphVars> {
    let mut modalities = Vec::new();
    let mut node_feats: Vec<Var> = Vec::new();

    for m in Modality::ALL {
        if !subject.is_present(m) {
            continue;
        }
        let (w, b) = *projections.get(&m).ok_or_else(|| {
            CoreError::Config(format!("no input projection for modality {m}"))
        })?;
        let expect = tape.value(w).cols();
        let instances = subject.instance_features(m, |cg| {
            let (gw, gb) = gcn.ok_or(CoreError::Config("raw cell graphs need gcn parameters".into()))?;
            let v = cell_graph_gcn_tape(tape, cg, gw, gb)?;
            Ok(tape.value(v).data().to_vec())
        })?;
        for (k, inst) in instances.iter().enumerate() {
            if inst.len() != expect {
                return Err(CoreError::Shape(format!(
                    "modality {m} instance {k} has dim {}, projection expects {expect}",
                    inst.len()
                )));
            }
            modalities.push(m);
            node_feats.push(project_instance(tape, w, b, inst)?);
        }
    }

    if modalities.is_empty() {
        return Err(CoreError::InvalidGraph(format!(
            "subject {} has no present modalities",
            subject.subject_id
        )));
    }

    let snapshot: Vec<Vec<f64>> = node_feats.iter().map(|&v| tape.value(v).data().to_vec()).collect();
    let edges = topology_edges(&modalities, &snapshot, intra, mode);
    let edge_feats = edge_features_on_tape(tape, &node_feats, &edges)?;

    Ok(GraphVars {
        subject_id: subject.subject_id.clone(),
        modalities,
        node_feats,
        edges,
        edge_feats,
    })
}

/// Concrete feature-to-graph transform over plain tensors.
pub fn build_het_graph(
    subject: &SubjectRecord,
    projections: &BTreeMap<Modality, ModalityProjection>,
    gcn: Option<&ModalityProjection>,
) -> Result<HetGraph> {
    let mut tape = Tape::new();
    let mut proj_vars = BTreeMap::new();
    for (m, p) in projections {
        let w = tape.constant(p.weight.clone());
        let b = tape.constant(p.bias.clone());
        proj_vars.insert(*m, (w, b));
    }
    let gcn_vars = gcn.map(|p| {
        let w = tape.constant(p.weight.clone());
        let b = tape.constant(p.bias.clone());
        (w, b)
    });
    let vars = build_graph_on_tape(
        &mut tape,
        subject,
        &proj_vars,
        gcn_vars,
        IntraModalTopology::Complete,
        TopologyMode::Typed,
    )?;
    Ok(vars.to_het_graph(&tape))
}
