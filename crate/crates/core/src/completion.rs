//! Modality-prompted completion: fit a per-modality Gaussian prior from
//! complete subjects, inject prompt nodes for a missing modality, refine
//! them with an entity-dependent prompt bank, and rewire edges for every
//! relation-valid pair touching the new nodes.

use crate::data::SubjectRecord;
use crate::graph::{
    project_instance, relation_between, GraphVars, HetGraph, Modality, ModalityProjection,
    Relation, TopologyMode,
};
use crate::optim::{ParamGroup, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};
use crate::{CoreError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Diagonal Gaussian prior of one modality's projected features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityPrior {
    pub modality: Modality,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Learnable completion state for one modality: prompt node features, the
/// prompt bank, and the bank weighting projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// `[N_P, d]`
    pub prompt_nodes: Tensor,
    /// `[N_B, d]`
    pub bank: Tensor,
    /// `[N_B, d]`, maps a prompt node to bank weights.
    pub weight: Tensor,
    /// `[N_B]`
    pub bias: Tensor,
}

impl PromptState {
    pub fn n_prompts(&self) -> usize {
        self.prompt_nodes.rows()
    }

    pub fn register(self, params: &mut ParamSet, m: Modality) -> PromptIds {
        PromptIds {
            nodes: params.register(format!("prompt.{m}.nodes"), ParamGroup::Prompt, self.prompt_nodes),
            bank: params.register(format!("prompt.{m}.bank"), ParamGroup::Prompt, self.bank),
            weight: params.register(format!("prompt.{m}.weight"), ParamGroup::Prompt, self.weight),
            bias: params.register(format!("prompt.{m}.bias"), ParamGroup::Prompt, self.bias),
        }
    }
}

/// Parameter-set handles for one modality's prompt state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptIds {
    pub nodes: ParamId,
    pub bank: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Bound tape vars for one modality's prompt state.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub nodes: Var,
    pub bank: Var,
    pub weight: Var,
    pub bias: Var,
}

/// Per-dimension mean and population std of the projected instance
/// features of `m`, over subjects where `m` is present. Std is floored at
/// 1e-6.
pub fn fit_modality_prior(
    subjects: &[SubjectRecord],
    m: Modality,
    projections: &BTreeMap<Modality, ModalityProjection>,
    gcn: Option<&ModalityProjection>,
) -> Result<ModalityPrior> {
    let proj = projections
        .get(&m)
        .ok_or_else(|| CoreError::Config(format!("no input projection for modality {m}")))?;
    let d = proj.weight.rows();

    let mut count = 0usize;
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    for s in subjects {
        if !s.is_present(m) {
            continue;
        }
        let mut tape = Tape::new();
        let w = tape.constant(proj.weight.clone());
        let b = tape.constant(proj.bias.clone());
        let instances = s.instance_features(m, |cg| {
            let p = gcn.ok_or(CoreError::Config("raw cell graphs need gcn parameters".into()))?;
            let gw = tape.constant(p.weight.clone());
            let gb = tape.constant(p.bias.clone());
            let v = crate::graph::cell_graph_gcn_tape(&mut tape, cg, gw, gb)?;
            Ok(tape.value(v).data().to_vec())
        })?;
        for inst in &instances {
            let v = project_instance(&mut tape, w, b, inst)?;
            for (j, x) in tape.value(v).data().iter().enumerate() {
                sum[j] += x;
                sumsq[j] += x * x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::NoPrior(m.to_string()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| ((sq / n - mu * mu).max(0.0)).sqrt().max(1e-6))
        .collect();
    Ok(ModalityPrior { modality: m, mean, std })
}

/// Draw `n_p` prompt node rows from the prior's diagonal Gaussian.
pub fn init_prompt_nodes(prior: &ModalityPrior, n_p: usize, rng: &mut impl Rng) -> Tensor {
    let d = prior.mean.len();
    let mut data = Vec::with_capacity(n_p * d);
    for _ in 0..n_p {
        for j in 0..d {
            let dist = rand_distr::Normal::new(prior.mean[j], prior.std[j]).expect("valid normal");
            data.push(rng.sample(dist));
        }
    }
    Tensor::new(vec![n_p, d], data).expect("consistent shape")
}

/// Full prompt state for one modality: prior-sampled nodes, a small-normal
/// bank (near-identity start), and a small-normal weighting projection.
pub fn init_prompt_state(
    prior: &ModalityPrior,
    n_p: usize,
    n_b: usize,
    rng: &mut impl Rng,
) -> PromptState {
    let d = prior.mean.len();
    PromptState {
        prompt_nodes: init_prompt_nodes(prior, n_p, rng),
        bank: Tensor::randn(vec![n_b, d], 0.0, 0.02, rng),
        weight: Tensor::randn(vec![n_b, d], 0.0, 0.02, rng),
        bias: Tensor::zeros(vec![n_b]),
    }
}

/// Entity-dependent prompting: `w = softmax(W v_p + b)` over the bank
/// components, then `v_p + sum_i w_i * bank_i`. Differentiable through all
/// four inputs.
pub fn entity_dependent_prompt(tape: &mut Tape, v_p: Var, prompt: &PromptVars) -> Result<Var> {
    let logits = tape.matvec(prompt.weight, v_p)?;
    let logits = tape.add(logits, prompt.bias)?;
    let w = tape.softmax_vec(logits)?;
    let mix = tape.weighted_sum_rows(prompt.bank, w)?;
    tape.add(v_p, mix)
}

/// Bank weights alone (exposed for normalization checks).
pub fn prompt_bank_weights(tape: &mut Tape, v_p: Var, prompt: &PromptVars) -> Result<Var> {
    let logits = tape.matvec(prompt.weight, v_p)?;
    let logits = tape.add(logits, prompt.bias)?;
    tape.softmax_vec(logits)
}

/// How missing-modality node features are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptingMode {
    /// Prompt nodes refined through the bank (the full mechanism).
    Banked,
    /// Prompt nodes used directly, bank bypassed.
    Unbanked,
    /// Zero vectors, no learnable completion at all.
    ZeroInit,
}

fn row_of(tape: &mut Tape, matrix: Var, i: usize) -> Result<Var> {
    let r = tape.gather_rows(matrix, &[i])?;
    tape.mean_rows(r) // [1, d] -> [d]
}

/// Insert `n_p` nodes of the missing modality into the graph and add every
/// relation-valid edge touching them (both directions, plus the complete
/// intra-modal digraph among the new nodes). Existing nodes and edges are
/// left untouched; new edge features are cosine similarities.
pub fn complete_graph_on_tape(
    tape: &mut Tape,
    graph: &mut GraphVars,
    missing: Modality,
    prompt: Option<&PromptVars>,
    n_p: usize,
    feature_dim: usize,
    mode: PromptingMode,
    topology: TopologyMode,
) -> Result<()> {
    if graph.modalities.iter().any(|&m| m == missing) {
        return Err(CoreError::NothingToComplete(missing.to_string()));
    }

    let first_new = graph.modalities.len();
    for i in 0..n_p {
        let feat = match mode {
            PromptingMode::ZeroInit => tape.constant(Tensor::zeros(vec![feature_dim])),
            PromptingMode::Unbanked => {
                let p = prompt.ok_or(CoreError::Config("prompt vars required".into()))?;
                row_of(tape, p.nodes, i)?
            }
            PromptingMode::Banked => {
                let p = prompt.ok_or(CoreError::Config("prompt vars required".into()))?;
                let v_p = row_of(tape, p.nodes, i)?;
                entity_dependent_prompt(tape, v_p, p)?
            }
        };
        graph.modalities.push(missing);
        graph.node_feats.push(feat);
    }

    let total = graph.modalities.len();
    for src in 0..total {
        for dst in 0..total {
            if src == dst || (src < first_new && dst < first_new) {
                continue;
            }
            let rel = match topology {
                TopologyMode::Typed => {
                    match relation_between(graph.modalities[src], graph.modalities[dst]) {
                        Some(r) => r,
                        None => continue,
                    }
                }
                TopologyMode::AllPairs => relation_between(graph.modalities[src], graph.modalities[dst])
                    .unwrap_or(Relation::IntraModal),
            };
            let w = tape.cosine_pair(graph.node_feats[src], graph.node_feats[dst])?;
            graph.edges.push((src, dst, rel));
            graph.edge_feats.push(w);
        }
    }
    Ok(())
}

/// Concrete completion over a plain graph with a given prompt state.
pub fn complete_graph(g: &HetGraph, missing: Modality, state: &PromptState) -> Result<HetGraph> {
    let mut tape = Tape::new();
    let mut vars = graph_vars_from_het(&mut tape, g);
    let prompt = PromptVars {
        nodes: tape.constant(state.prompt_nodes.clone()),
        bank: tape.constant(state.bank.clone()),
        weight: tape.constant(state.weight.clone()),
        bias: tape.constant(state.bias.clone()),
    };
    complete_graph_on_tape(
        &mut tape,
        &mut vars,
        missing,
        Some(&prompt),
        state.n_prompts(),
        g.feature_dim(),
        PromptingMode::Banked,
        TopologyMode::Typed,
    )?;
    let mut out = vars.to_het_graph(&tape);
    // Preserve the original weights verbatim; only new edges get fresh
    // cosines (graph_vars_from_het re-derives weights as constants).
    for (k, e) in g.edges.iter().enumerate() {
        out.edges[k].weight = e.weight;
    }
    Ok(out)
}

/// Lift a concrete graph onto a tape as constants.
pub fn graph_vars_from_het(tape: &mut Tape, g: &HetGraph) -> GraphVars {
    GraphVars {
        subject_id: g.subject_id.clone(),
        modalities: g.nodes.iter().map(|n| n.modality).collect(),
        node_feats: g
            .nodes
            .iter()
            .map(|n| tape.constant(Tensor::vector(n.features.clone())))
            .collect(),
        edges: g.edges.iter().map(|e| (e.src, e.dst, e.relation)).collect(),
        edge_feats: g
            .edges
            .iter()
            .map(|e| tape.constant(Tensor::scalar(e.weight)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;
    use crate::graph::build_het_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_projections(d: usize) -> BTreeMap<Modality, ModalityProjection> {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        Modality::ALL
            .iter()
            .map(|&m| {
                (m, ModalityProjection {
                    weight: Tensor::new(vec![d, d], eye.clone()).unwrap(),
                    bias: Tensor::zeros(vec![d]),
                })
            })
            .collect()
    }

    fn subject_with_g(id: &str, rows: Vec<Vec<f64>>) -> SubjectRecord {
        let mut s = SubjectRecord::empty(id, Labels { grade: 0, time: 1.0, censored: false });
        s.set_features(Modality::Genomics, rows);
        s
    }

    #[test]
    fn prior_mean_and_population_std() {
        let subjects = vec![
            subject_with_g("a", vec![vec![1.0, 1.0]]),
            subject_with_g("b", vec![vec![3.0, 3.0]]),
        ];
        let prior =
            fit_modality_prior(&subjects, Modality::Genomics, &identity_projections(2), None).unwrap();
        assert_eq!(prior.mean, vec![2.0, 2.0]);
        assert!((prior.std[0] - 1.0).abs() < 1e-12);
        assert!((prior.std[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_degenerate_std_floored() {
        let subjects = vec![subject_with_g("a", vec![vec![0.5, 2.0]])];
        let prior =
            fit_modality_prior(&subjects, Modality::Genomics, &identity_projections(2), None).unwrap();
        assert_eq!(prior.std, vec![1e-6, 1e-6]);
    }

    #[test]
    fn prior_excludes_missing_subjects() {
        let mut subjects = vec![
            subject_with_g("a", vec![vec![1.0, 1.0]]),
            subject_with_g("b", vec![vec![3.0, 3.0]]),
        ];
        let before =
            fit_modality_prior(&subjects, Modality::Genomics, &identity_projections(2), None).unwrap();
        let mut extra = subject_with_g("c", vec![vec![100.0, 100.0]]);
        extra.set_present(Modality::Genomics, false);
        subjects.push(extra);
        let after =
            fit_modality_prior(&subjects, Modality::Genomics, &identity_projections(2), None).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn prior_errors_when_no_subject_has_modality() {
        let subjects = vec![subject_with_g("a", vec![vec![1.0, 1.0]])];
        let err = fit_modality_prior(&subjects, Modality::Text, &identity_projections(2), None)
            .unwrap_err();
        assert!(err.to_string().contains("no prior available"));
    }

    #[test]
    fn init_prompt_nodes_near_degenerate_prior() {
        let prior = ModalityPrior {
            modality: Modality::Text,
            mean: vec![2.0, -1.0, 0.5],
            std: vec![1e-6, 1e-6, 1e-6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes = init_prompt_nodes(&prior, 4, &mut rng);
        let norm_mean = (2.0f64 * 2.0 + 1.0 + 0.25).sqrt();
        for i in 0..4 {
            for j in 0..3 {
                let v = nodes.data()[i * 3 + j];
                assert!((v - prior.mean[j]).abs() < 1e-5 * norm_mean);
            }
        }
    }

    #[test]
    fn init_prompt_nodes_seeded_and_unbiased() {
        let prior = ModalityPrior {
            modality: Modality::Image,
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            init_prompt_nodes(&prior, 3, &mut r1),
            init_prompt_nodes(&prior, 3, &mut r2)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let big = init_prompt_nodes(&prior, 2500, &mut rng); // 10k samples
        let mean = big.data().iter().sum::<f64>() / big.numel() as f64;
        assert!(mean.abs() < 0.05, "empirical mean {mean}");
    }

    fn prompt_vars_from_state(tape: &mut Tape, s: &PromptState) -> PromptVars {
        PromptVars {
            nodes: tape.constant(s.prompt_nodes.clone()),
            bank: tape.constant(s.bank.clone()),
            weight: tape.constant(s.weight.clone()),
            bias: tape.constant(s.bias.clone()),
        }
    }

    #[test]
    fn prompt_zero_bank_is_identity() {
        let state = PromptState {
            prompt_nodes: Tensor::zeros(vec![1, 4]),
            bank: Tensor::zeros(vec![3, 4]),
            weight: Tensor::randn(vec![3, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)),
            bias: Tensor::zeros(vec![3]),
        };
        let mut tape = Tape::new();
        let p = prompt_vars_from_state(&mut tape, &state);
        let v = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]));
        let out = entity_dependent_prompt(&mut tape, v, &p).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_constant_bank_rows_add_that_row() {
        // all bank rows equal b: softmax weights sum to 1, so output is v + b
        let b_row = vec![0.5, -1.0, 2.0];
        let state = PromptState {
            prompt_nodes: Tensor::zeros(vec![1, 3]),
            bank: Tensor::matrix(&[b_row.clone(), b_row.clone(), b_row.clone(), b_row.clone()]).unwrap(),
            weight: Tensor::randn(vec![4, 3], 0.0, 2.0, &mut ChaCha8Rng::seed_from_u64(2)),
            bias: Tensor::randn(vec![4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)),
        };
        let mut tape = Tape::new();
        let p = prompt_vars_from_state(&mut tape, &state);
        let input = vec![1.0, 2.0, 3.0];
        let v = tape.constant(Tensor::vector(input.clone()));
        let prompted = entity_dependent_prompt(&mut tape, v, &p).unwrap();
        let out = tape.value(prompted).data();
        for j in 0..3 {
            assert!((out[j] - (input[j] + b_row[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_matches_straight_line_oracle() {
        // Direct evaluation with explicit loops, independent of tape ops.
        let d = 8;
        let n_b = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let state = PromptState {
            prompt_nodes: Tensor::zeros(vec![1, d]),
            bank: Tensor::randn(vec![n_b, d], 0.0, 1.0, &mut rng),
            weight: Tensor::randn(vec![n_b, d], 0.0, 1.0, &mut rng),
            bias: Tensor::randn(vec![n_b], 0.0, 1.0, &mut rng),
        };
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut logits = vec![0.0; n_b];
        for i in 0..n_b {
            logits[i] = state.bias.data()[i];
            for j in 0..d {
                logits[i] += state.weight.data()[i * d + j] * v[j];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expected = v.clone();
        for i in 0..n_b {
            let w = exps[i] / z;
            for j in 0..d {
                expected[j] += w * state.bank.data()[i * d + j];
            }
        }

        let mut tape = Tape::new();
        let p = prompt_vars_from_state(&mut tape, &state);
        let vv = tape.constant(Tensor::vector(v));
        let out = entity_dependent_prompt(&mut tape, vv, &p).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_bank_weights_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let state = init_prompt_state(
            &ModalityPrior { modality: Modality::Genomics, mean: vec![0.0; 6], std: vec![1.0; 6] },
            5,
            5,
            &mut rng,
        );
        let mut tape = Tape::new();
        let p = prompt_vars_from_state(&mut tape, &state);
        for i in 0..5 {
            let v_p = row_of(&mut tape, p.nodes, i).unwrap();
            let w = prompt_bank_weights(&mut tape, v_p, &p).unwrap();
            let s: f64 = tape.value(w).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn i_only_graph(n_i: usize, d: usize) -> HetGraph {
        let mut s = SubjectRecord::empty("s", Labels { grade: 0, time: 1.0, censored: false });
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        s.set_features(
            Modality::Image,
            (0..n_i).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        );
        build_het_graph(&s, &identity_projections(d), None).unwrap()
    }

    fn default_state(d: usize, seed: u64) -> PromptState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_prompt_state(
            &ModalityPrior { modality: Modality::Genomics, mean: vec![0.1; d], std: vec![0.5; d] },
            5,
            5,
            &mut rng,
        )
    }

    #[test]
    fn complete_adds_expected_nodes_and_edges() {
        let g = i_only_graph(3, 4);
        let before_edges = g.edges.len(); // 3*2 intra-I
        let out = complete_graph(&g, Modality::Genomics, &default_state(4, 1)).unwrap();
        assert_eq!(out.nodes.len(), 3 + 5);
        // +2*5*3 express + 5*4 intra-G = 50 new edges
        assert_eq!(out.edges.len(), before_edges + 50);
        out.validate_complete().unwrap();
    }

    #[test]
    fn complete_missing_text_uses_only_depict_and_intra() {
        let g = i_only_graph(2, 4);
        let out = complete_graph(&g, Modality::Text, &default_state(4, 2)).unwrap();
        let new_edges: Vec<_> = out.edges.iter().skip(g.edges.len()).collect();
        assert!(!new_edges.is_empty());
        for e in new_edges {
            assert!(matches!(e.relation, Relation::Depict | Relation::IntraModal));
        }
    }

    #[test]
    fn complete_leaves_existing_parts_untouched() {
        let g = i_only_graph(3, 4);
        let out = complete_graph(&g, Modality::Genomics, &default_state(4, 3)).unwrap();
        for (a, b) in g.nodes.iter().zip(&out.nodes) {
            assert_eq!(a, b);
        }
        for (a, b) in g.edges.iter().zip(&out.edges) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn complete_rejects_present_modality() {
        let g = i_only_graph(2, 4);
        let err = complete_graph(&g, Modality::Image, &default_state(4, 4)).unwrap_err();
        assert!(err.to_string().contains("nothing to complete"));
    }

    #[test]
    fn completed_graph_passes_full_validation_as_if_native() {
        for seed in 0..10 {
            let g = i_only_graph(2 + (seed as usize % 3), 4);
            let out = complete_graph(&g, Modality::Genomics, &default_state(4, seed)).unwrap();
            out.validate_complete().unwrap();
            let counts = out.modality_counts();
            assert_eq!(counts[Modality::Genomics.index()], 5);
        }
    }

    #[test]
    fn gradients_reach_prompt_parameters() {
        // Tiny objective: pull completed-node features toward a target;
        // bank and prompt nodes must both receive gradient.
        let g = i_only_graph(2, 4);
        let state = default_state(4, 9);
        let mut params = ParamSet::new();
        let ids = state.register(&mut params, Modality::Genomics);

        let mut tape = Tape::new();
        let mut binding = crate::optim::ParamBinding::new(&params);
        let prompt = PromptVars {
            nodes: binding.bind(&mut tape, &params, ids.nodes),
            bank: binding.bind(&mut tape, &params, ids.bank),
            weight: binding.bind(&mut tape, &params, ids.weight),
            bias: binding.bind(&mut tape, &params, ids.bias),
        };
        let mut vars = graph_vars_from_het(&mut tape, &g);
        complete_graph_on_tape(
            &mut tape,
            &mut vars,
            Modality::Genomics,
            Some(&prompt),
            5,
            4,
            PromptingMode::Banked,
            TopologyMode::Typed,
        )
        .unwrap();

        let new_feats: Vec<Var> = vars.node_feats[2..].to_vec();
        let stacked = tape.stack_rows(&new_feats).unwrap();
        let sq = tape.mul(stacked, stacked).unwrap();
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        let collected = binding.collect(&grads);

        let nz = |id: ParamId| {
            collected[id.0]
                .as_ref()
                .map(|g| g.iter().any(|x| x.abs() > 1e-12))
                .unwrap_or(false)
        };
        assert!(nz(ids.nodes), "no gradient reached prompt nodes");
        assert!(nz(ids.bank), "no gradient reached prompt bank");
        assert!(nz(ids.weight), "no gradient reached bank projection");
    }
}
