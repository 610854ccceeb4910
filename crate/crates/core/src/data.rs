//! Subject ingestion, synthetic dataset generation, missing-modality
//! simulation, cross-validation folds, and graph augmentation.
//!
//! Subjects are stored with presence flags separate from the raw data so
//! missing simulation can clear a flag without destroying the underlying
//! features (the similarity report needs both views).

use crate::graph::{CellGraph, HetEdge, HetGraph, HetNode, Modality, Relation};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub grade: usize,
    pub time: f64,
    pub censored: bool,
}

/// Instances of one modality: plain feature rows or raw cell graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InstanceData {
    Features(Vec<Vec<f64>>),
    CellGraphs(Vec<CellGraph>),
}

impl InstanceData {
    pub fn count(&self) -> usize {
        match self {
            InstanceData::Features(rows) => rows.len(),
            InstanceData::CellGraphs(gs) => gs.len(),
        }
    }
}

/// One patient's multimodal record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    data: [Option<InstanceData>; 4],
    present: [bool; 4],
    pub labels: Labels,
}

impl SubjectRecord {
    pub fn empty(id: impl Into<String>, labels: Labels) -> Self {
        Self {
            subject_id: id.into(),
            data: [None, None, None, None],
            present: [false; 4],
            labels,
        }
    }

    pub fn set_features(&mut self, m: Modality, rows: Vec<Vec<f64>>) {
        self.present[m.index()] = !rows.is_empty();
        self.data[m.index()] = Some(InstanceData::Features(rows));
    }

    pub fn set_cell_graphs(&mut self, graphs: Vec<CellGraph>) {
        self.present[Modality::Cell.index()] = !graphs.is_empty();
        self.data[Modality::Cell.index()] = Some(InstanceData::CellGraphs(graphs));
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.present[m.index()] && self.data[m.index()].is_some()
    }

    /// Clear or restore the presence flag without touching stored data.
    pub fn set_present(&mut self, m: Modality, present: bool) {
        self.present[m.index()] = present && self.data[m.index()].is_some();
    }

    pub fn data_of(&self, m: Modality) -> Option<&InstanceData> {
        self.data[m.index()].as_ref()
    }

    pub fn instance_count(&self, m: Modality) -> usize {
        if !self.is_present(m) {
            return 0;
        }
        self.data[m.index()].as_ref().map_or(0, |d| d.count())
    }

    /// Instance feature rows for a present modality; raw cell graphs are
    /// embedded through the supplied closure.
    pub fn instance_features<F>(&self, m: Modality, mut embed_cell_graph: F) -> Result<Vec<Vec<f64>>>
    where
        F: FnMut(&CellGraph) -> Result<Vec<f64>>,
    {
        match self.data[m.index()].as_ref() {
            Some(InstanceData::Features(rows)) => Ok(rows.clone()),
            Some(InstanceData::CellGraphs(gs)) => gs.iter().map(&mut embed_cell_graph).collect(),
            None => Ok(Vec::new()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.labels.time > 0.0) {
            return Err(CoreError::Data(format!(
                "subject {}: survival time must be positive, got {}",
                self.subject_id, self.labels.time
            )));
        }
        for m in Modality::ALL {
            if let Some(d) = &self.data[m.index()] {
                if self.present[m.index()] && d.count() == 0 {
                    return Err(CoreError::Data(format!(
                        "subject {}: modality {m} present with zero instances",
                        self.subject_id
                    )));
                }
                if let InstanceData::Features(rows) = d {
                    if let Some(first) = rows.first() {
                        if rows.iter().any(|r| r.len() != first.len()) {
                            return Err(CoreError::Data(format!(
                                "subject {}: inconsistent dims in modality {m}",
                                self.subject_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Synthetic benchmark knobs. Every modality is individually informative
/// about the class; a shared latent adds cross-modal correlation so joint
/// models out-learn single-modality ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub classes: usize,
    pub seed: u64,
    /// Inclusive instance-count range per modality.
    pub instances: (usize, usize),
    pub dims: [usize; 4],
    /// Emit raw cell graphs for the cell modality instead of feature rows.
    pub raw_cell_graphs: bool,
    /// Class-signal multiplier per modality.
    pub signal: [f64; 4],
    /// Probability that an instance carries the subject's class signal.
    /// The rest are distractors drawn with one consistent wrong class per
    /// subject and a fresh latent per instance, so plain averaging mixes
    /// in a coherent wrong-class pull while only the true instances
    /// cohere cross-modally. The first instance of each modality is
    /// always informative.
    pub informative_fraction: f64,
    /// Strength of the class-dependent feature amplitude: grade g scales
    /// the latent contribution by `1 + amplitude*(g/(C-1) - 0.5)`.
    pub class_amplitude: f64,
    pub censor_rate: f64,
}

impl SynthConfig {
    pub fn new(n_subjects: usize, classes: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            classes,
            seed,
            instances: (2, 3),
            dims: [20, 20, 20, 20],
            raw_cell_graphs: false,
            signal: [1.8, 1.0, 0.9, 0.8],
            informative_fraction: 1.0,
            class_amplitude: 0.0,
            censor_rate: 0.2,
        }
    }
}

const SHARED_LATENT: usize = 6;

/// Deterministic synthetic multimodal dataset with class- and
/// risk-dependent structure and exponential survival times.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SubjectRecord>> {
    if cfg.n_subjects < 10 {
        return Err(CoreError::Data(format!(
            "need at least 10 subjects, got {}",
            cfg.n_subjects
        )));
    }
    if cfg.classes < 2 {
        return Err(CoreError::Data("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent_dim = cfg.classes + 1 + SHARED_LATENT;

    // Fixed per-dataset loading matrices. Class and risk columns are
    // modality-specific; the shared-latent columns reuse one common block
    // so cross-modal cosine reflects latent alignment.
    let max_dim = *cfg.dims.iter().max().unwrap();
    let shared_block: Vec<f64> =
        (0..max_dim * SHARED_LATENT).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loadings: Vec<Vec<f64>> = cfg
        .dims
        .iter()
        .map(|&d| {
            let mut m = vec![0.0; d * latent_dim];
            for j in 0..d {
                for k in 0..=cfg.classes {
                    m[j * latent_dim + k] = rng.gen_range(-1.0..1.0);
                }
                for k in 0..SHARED_LATENT {
                    m[j * latent_dim + cfg.classes + 1 + k] = shared_block[j * SHARED_LATENT + k];
                }
            }
            m
        })
        .collect();
    // fixed per-modality baseline (measurements are not zero-centered);
    // the population prior anchors on it
    let offsets: Vec<Vec<f64>> = cfg
        .dims
        .iter()
        .map(|&d| (0..d).map(|_| rng.gen_range(-1.2..1.2)).collect())
        .collect();

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let class = rng.gen_range(0..cfg.classes);
        let risk_base = class as f64 / (cfg.classes - 1).max(1) as f64;
        let risk = risk_base + rng.gen_range(-0.45..0.45);
        let shared: Vec<f64> = (0..SHARED_LATENT).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut latent = vec![0.0; latent_dim];
        latent[class] = 1.0;
        latent[cfg.classes] = risk;
        latent[cfg.classes + 1..].copy_from_slice(&shared);
        let wrong_class = (class + 1 + rng.gen_range(0..cfg.classes.saturating_sub(1).max(1))) % cfg.classes;
        let wrong_risk = wrong_class as f64 / (cfg.classes - 1).max(1) as f64 + rng.gen_range(-0.45..0.45);

        let mut subject = SubjectRecord::empty(
            format!("subj-{s:04}"),
            Labels { grade: class, time: 1.0, censored: false },
        );

        for m in Modality::ALL {
            let mi = m.index();
            let d = cfg.dims[mi];
            let count = rng.gen_range(cfg.instances.0..=cfg.instances.1);
            let mut scaled = latent.clone();
            for c in 0..cfg.classes {
                scaled[c] *= cfg.signal[mi];
            }
            // the risk channel carries class information too; weak
            // modalities stay weak in both
            scaled[cfg.classes] *= cfg.signal[mi];
            let classes = cfg.classes;
            let signal = cfg.signal[mi];
            let amp_of = |c: usize| {
                1.0 + cfg.class_amplitude * (c as f64 / (classes - 1).max(1) as f64 - 0.5)
            };
            let make_row = |rng: &mut ChaCha8Rng, inst: usize| -> Vec<f64> {
                let informative = inst == 0
                    || cfg.informative_fraction >= 1.0
                    || rng.gen::<f64>() < cfg.informative_fraction;
                let (source, amp): (Vec<f64>, f64) = if informative {
                    (scaled.clone(), amp_of(class))
                } else {
                    let mut s = vec![0.0; scaled.len()];
                    s[wrong_class] = signal;
                    s[classes] = wrong_risk * signal;
                    for slot in s.iter_mut().skip(classes + 1) {
                        *slot = rng.gen_range(-1.0..1.0);
                    }
                    (s, amp_of(wrong_class))
                };
                (0..d)
                    .map(|j| {
                        let mut v = 0.0;
                        for (k, l) in source.iter().enumerate() {
                            v += loadings[mi][j * latent_dim + k] * l;
                        }
                        offsets[mi][j] + amp * v + rng.gen_range(-0.5..0.5)
                    })
                    .collect()
            };

            if m == Modality::Cell && cfg.raw_cell_graphs {
                let graphs: Vec<CellGraph> = (0..count)
                    .map(|g| {
                        let cells = rng.gen_range(3..=6);
                        let features: Vec<Vec<f64>> =
                            (0..cells).map(|_| make_row(&mut rng, g)).collect();
                        let adjacency: Vec<(usize, usize)> =
                            (0..cells - 1).map(|i| (i, i + 1)).collect();
                        CellGraph { features, adjacency }
                    })
                    .collect();
                subject.set_cell_graphs(graphs);
            } else {
                let rows: Vec<Vec<f64>> = (0..count).map(|i| make_row(&mut rng, i)).collect();
                subject.set_features(m, rows);
            }
        }

        // Exponential survival with risk-dependent rate; higher risk dies
        // sooner. ~censor_rate of subjects observed censored early.
        let rate = (1.4 * (risk - 0.5)).exp();
        let u: f64 = rng.gen_range(1e-9..1.0);
        let t_true = -u.ln() / rate;
        let censored = rng.gen::<f64>() < cfg.censor_rate;
        let time = if censored { t_true * rng.gen_range(0.1..1.0) } else { t_true };
        subject.labels.time = time.max(1e-6);
        subject.labels.censored = censored;

        subjects.push(subject);
    }
    Ok(subjects)
}

// ---------------------------------------------------------------------------
// NDJSON import / export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SubjectJson {
    subject_id: String,
    modalities: BTreeMap<String, Vec<Vec<f64>>>,
    labels: LabelsJson,
}

#[derive(Serialize, Deserialize)]
struct LabelsJson {
    grade: usize,
    time: f64,
    censored: bool,
}

/// Parse line-delimited JSON, one subject per line. Absent modality keys
/// mean the modality is absent for that subject.
pub fn import_subjects(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut subjects = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SubjectJson = serde_json::from_str(&line).map_err(|e| {
            CoreError::Data(format!("line {}: malformed subject: {e}", lineno + 1))
        })?;
        let mut subject = SubjectRecord::empty(
            parsed.subject_id,
            Labels {
                grade: parsed.labels.grade,
                time: parsed.labels.time,
                censored: parsed.labels.censored,
            },
        );
        for (key, rows) in parsed.modalities {
            let m = key
                .chars()
                .next()
                .filter(|_| key.len() == 1)
                .and_then(Modality::from_letter)
                .ok_or_else(|| {
                    CoreError::Data(format!("line {}: unknown modality key {key:?}", lineno + 1))
                })?;
            subject.set_features(m, rows);
        }
        subject.validate().map_err(|e| {
            CoreError::Data(format!("line {}: {e}", lineno + 1))
        })?;
        subjects.push(subject);
    }
    Ok(subjects)
}

/// Write subjects as line-delimited JSON. Raw cell-graph datasets are not
/// representable in the row-based schema and are rejected.
pub fn export_subjects(path: impl AsRef<Path>, subjects: &[SubjectRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for s in subjects {
        let mut modalities = BTreeMap::new();
        for m in Modality::ALL {
            if !s.is_present(m) {
                continue;
            }
            match s.data_of(m) {
                Some(InstanceData::Features(rows)) => {
                    modalities.insert(m.letter().to_string(), rows.clone());
                }
                Some(InstanceData::CellGraphs(_)) => {
                    return Err(CoreError::Data(format!(
                        "subject {}: raw cell graphs cannot be exported in the row schema",
                        s.subject_id
                    )));
                }
                None => {}
            }
        }
        let json = SubjectJson {
            subject_id: s.subject_id.clone(),
            modalities,
            labels: LabelsJson {
                grade: s.labels.grade,
                time: s.labels.time,
                censored: s.labels.censored,
            },
        };
        serde_json::to_writer(&mut file, &json)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Folds and missing simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// K disjoint covering test partitions plus, once missing simulation has
/// run, the per-modality per-fold missing-subject sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_subjects: usize,
    pub partitions: Vec<Vec<usize>>,
    /// Modality letter -> per-fold missing subject indices.
    pub missing: BTreeMap<char, Vec<Vec<usize>>>,
}

impl FoldPlan {
    pub fn new(n_subjects: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || n_subjects < k {
            return Err(CoreError::Data(format!(
                "cannot make {k} folds from {n_subjects} subjects"
            )));
        }
        let mut order: Vec<usize> = (0..n_subjects).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut partitions = vec![Vec::new(); k];
        for (i, idx) in order.into_iter().enumerate() {
            partitions[i % k].push(idx);
        }
        for p in &mut partitions {
            p.sort_unstable();
        }
        Ok(Self { n_subjects, partitions, missing: BTreeMap::new() })
    }

    /// Re-clear presence flags from the recorded missing sets.
    pub fn replay_missing(&self, subjects: &mut [SubjectRecord]) {
        for (letter, by_fold) in &self.missing {
            if let Some(m) = Modality::from_letter(*letter) {
                for &idx in by_fold.iter().flatten() {
                    subjects[idx].set_present(m, false);
                }
            }
        }
    }

    pub fn fold_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn fold(&self, k: usize) -> Fold {
        let test = self.partitions[k].clone();
        let train = self
            .partitions
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, p)| p.iter().copied())
            .collect::<Vec<_>>();
        let mut train = train;
        train.sort_unstable();
        Fold { train, test }
    }

    pub fn folds(&self) -> Vec<Fold> {
        (0..self.fold_count()).map(|k| self.fold(k)).collect()
    }
}

/// Clear the presence flag for `modality` on exactly `round(eta * n)`
/// subjects, spread across fold partitions so each fold's incomplete
/// proportion matches within one subject.
pub fn apply_missing(
    subjects: &mut [SubjectRecord],
    modality: Modality,
    eta: f64,
    seed: u64,
    plan: &mut FoldPlan,
) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoreError::Data(format!("missing ratio {eta} outside [0, 1]")));
    }
    let n = subjects.len();
    if plan.n_subjects != n {
        return Err(CoreError::Data(format!(
            "fold plan covers {} subjects, dataset has {n}",
            plan.n_subjects
        )));
    }
    // Restore flags first so the op is idempotent for a given (m, eta, seed).
    for s in subjects.iter_mut() {
        s.set_present(modality, true);
    }

    let target_total = (eta * n as f64).round() as usize;
    let k = plan.fold_count();

    // Base share per partition, remainders to the largest fractions.
    let ideals: Vec<f64> = plan.partitions.iter().map(|p| eta * p.len() as f64).collect();
    let mut counts: Vec<usize> = ideals.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = target_total.saturating_sub(counts.iter().sum::<usize>());
    let mut by_frac: Vec<usize> = (0..k).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = ideals[a] - ideals[a].floor();
        let fb = ideals[b] - ideals[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &p in by_frac.iter().cycle().take(k * 2) {
        if leftover == 0 {
            break;
        }
        if counts[p] < plan.partitions[p].len() {
            counts[p] += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f01_du64 ^ (modality.index() as u64) << 32);
    let mut by_fold = vec![Vec::new(); k];
    for (p, partition) in plan.partitions.iter().enumerate() {
        let mut pool = partition.clone();
        pool.shuffle(&mut rng);
        pool.truncate(counts[p]);
        pool.sort_unstable();
        for &idx in &pool {
            subjects[idx].set_present(modality, false);
        }
        by_fold[p] = pool;
    }
    plan.missing.insert(modality.letter(), by_fold);

    // Prior fitting needs at least one complete subject in every train split.
    for f in 0..k {
        let fold = plan.fold(f);
        let complete = fold.train.iter().any(|&i| subjects[i].is_present(modality));
        if !complete {
            return Err(CoreError::Data(format!(
                "missing ratio {eta} leaves fold {f} without a complete subject for prior fitting of {modality}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub edge_drop: f64,
    pub node_drop: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { edge_drop: 0.1, node_drop: 0.05, noise_std: 0.01 }
    }
}

/// A sampled augmentation: which nodes/edges survive and what noise is
/// added. Shared between the concrete path and the on-tape training path.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    /// Old node indices kept, ascending; position gives the new index.
    pub kept_nodes: Vec<usize>,
    /// Indices into the original edge list that survive.
    pub kept_edges: Vec<usize>,
    pub node_noise: Vec<Vec<f64>>,
    pub edge_noise: Vec<f64>,
}

impl AugmentPlan {
    pub fn remap(&self) -> BTreeMap<usize, usize> {
        self.kept_nodes.iter().enumerate().map(|(new, &old)| (old, new)).collect()
    }
}

/// Sample one augmentation attempt; `None` when every node would drop.
pub fn sample_augment_plan(
    n_nodes: usize,
    edges: &[(usize, usize, Relation)],
    feature_dim: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Option<AugmentPlan>> {
    for p in [cfg.edge_drop, cfg.node_drop] {
        if p < 0.0 || !p.is_finite() {
            return Err(CoreError::Data(format!("drop probability {p} is negative")));
        }
    }
    if cfg.noise_std < 0.0 {
        return Err(CoreError::Data("negative noise std".into()));
    }
    let p_node = cfg.node_drop.min(1.0);
    let p_edge = cfg.edge_drop.min(1.0);

    let kept_nodes: Vec<usize> = (0..n_nodes).filter(|_| rng.gen::<f64>() >= p_node).collect();
    if kept_nodes.is_empty() {
        // consume the edge stream anyway to keep the rng schedule stable
        for _ in edges {
            let _ = rng.gen::<f64>();
        }
        return Ok(None);
    }
    let node_set: std::collections::BTreeSet<usize> = kept_nodes.iter().copied().collect();
    let kept_edges: Vec<usize> = edges
        .iter()
        .enumerate()
        .filter(|(_, (s, d, _))| {
            let endpoint_ok = node_set.contains(s) && node_set.contains(d);
            let roll = rng.gen::<f64>() >= p_edge;
            endpoint_ok && roll
        })
        .map(|(i, _)| i)
        .collect();

    let node_noise = kept_nodes
        .iter()
        .map(|_| (0..feature_dim).map(|_| sample_gauss(rng, cfg.noise_std)).collect())
        .collect();
    let edge_noise = kept_edges.iter().map(|_| sample_gauss(rng, cfg.noise_std)).collect();

    Ok(Some(AugmentPlan { kept_nodes, kept_edges, node_noise, edge_noise }))
}

fn sample_gauss(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let dist = rand_distr::Normal::new(0.0, std).expect("valid normal");
    rng.sample(dist)
}

/// Randomly drop edges and nodes and add Gaussian feature noise. Retries
/// up to 5 times if a sample would empty the graph, then returns the graph
/// unaugmented.
pub fn augment_graph(g: &HetGraph, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<HetGraph> {
    let edges: Vec<(usize, usize, Relation)> =
        g.edges.iter().map(|e| (e.src, e.dst, e.relation)).collect();
    for _ in 0..5 {
        let plan = sample_augment_plan(g.nodes.len(), &edges, g.feature_dim(), cfg, rng)?;
        if let Some(plan) = plan {
            let remap = plan.remap();
            let nodes: Vec<HetNode> = plan
                .kept_nodes
                .iter()
                .zip(&plan.node_noise)
                .map(|(&old, noise)| HetNode {
                    modality: g.nodes[old].modality,
                    features: g.nodes[old]
                        .features
                        .iter()
                        .zip(noise)
                        .map(|(x, n)| x + n)
                        .collect(),
                })
                .collect();
            let edges: Vec<HetEdge> = plan
                .kept_edges
                .iter()
                .zip(&plan.edge_noise)
                .map(|(&old, noise)| HetEdge {
                    src: remap[&g.edges[old].src],
                    dst: remap[&g.edges[old].dst],
                    relation: g.edges[old].relation,
                    weight: g.edges[old].weight + noise,
                })
                .collect();
            let out = HetGraph { subject_id: g.subject_id.clone(), nodes, edges };
            out.validate()?;
            return Ok(out);
        }
    }
    Ok(g.clone())
}
