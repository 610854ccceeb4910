//! Task heads, losses, and evaluation metrics: grading classification
//! (AUC / accuracy) and discrete-time survival prediction (concordance
//! index), plus the selectable ablation variants of the full pipeline.

use crate::tensor::{sigmoid_scalar, Tape, Var};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// What the head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Grading { classes: usize },
    Survival { bins: usize },
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            TaskKind::Grading { classes } => classes,
            TaskKind::Survival { bins } => bins,
        }
    }
}

/// Bound head projection for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `[out, d]`
    pub weight: Var,
    /// `[out]`
    pub bias: Var,
}

/// Head logits from the graph readout.
pub fn head_logits(tape: &mut Tape, readout: Var, head: &HeadVars) -> Result<Var> {
    let h = tape.matvec(head.weight, readout)?;
    tape.add(h, head.bias)
}

/// NLL of the log-softmaxed head output at the true class.
pub fn grading_loss(tape: &mut Tape, readout: Var, head: &HeadVars, label: usize) -> Result<Var> {
    let logits = head_logits(tape, readout, head)?;
    let classes = tape.value(logits).numel();
    if label >= classes {
        return Err(CoreError::LabelOutOfRange { label, classes });
    }
    let row = tape.stack_rows(&[logits])?;
    let lp = tape.log_softmax_rows(row)?;
    tape.nll_pick(lp, &[label])
}

/// Discrete-time hazard NLL. Hazards are sigmoids of the head outputs;
/// an uncensored subject at bin k contributes `-ln h_k - sum_{b<k} ln(1-h_b)`,
/// a censored one `-sum_{b<=k} ln(1-h_b)`. Computed through softplus for
/// stability: `-ln sigmoid(x) = softplus(-x)`, `-ln(1-sigmoid(x)) = softplus(x)`.
pub fn survival_loss(
    tape: &mut Tape,
    readout: Var,
    head: &HeadVars,
    time_bin: usize,
    censored: bool,
) -> Result<Var> {
    let logits = head_logits(tape, readout, head)?;
    let bins = tape.value(logits).numel();
    if time_bin >= bins {
        return Err(CoreError::LabelOutOfRange { label: time_bin, classes: bins });
    }
    let mut terms = Vec::new();
    let survive_upto = if censored { time_bin + 1 } else { time_bin };
    for b in 0..survive_upto {
        let x = tape.slice(logits, b, 1)?;
        terms.push(tape.softplus(x));
    }
    if !censored {
        let x = tape.slice(logits, time_bin, 1)?;
        let neg = tape.scale(x, -1.0);
        terms.push(tape.softplus(neg));
    }
    let all = tape.concat_vec(&terms)?;
    Ok(tape.sum(all))
}

/// Risk summary for concordance: the summed cumulative hazard
/// `sum_b (B - b) * h_b`, strictly monotone in every hazard.
pub fn survival_risk(logits: &[f64]) -> f64 {
    let bins = logits.len();
    logits
        .iter()
        .enumerate()
        .map(|(b, &x)| (bins - b) as f64 * sigmoid_scalar(x))
        .sum()
}

/// Quartile-style cut points over training times; bin k covers times in
/// `(cuts[k-1], cuts[k]]`.
pub fn time_bins(times: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..bins)
        .map(|k| {
            let q = k as f64 / bins as f64;
            let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
            sorted[idx]
        })
        .collect()
}

pub fn assign_bin(time: f64, cuts: &[f64]) -> usize {
    cuts.iter().take_while(|&&c| time > c).count()
}

/// Per-report metric bundle; fields stay unset when the task does not
/// produce them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub c_index: Option<f64>,
}

/// Macro-averaged one-vs-rest AUC via the rank statistic with midranks
/// for ties. Classes without both a positive and a negative are skipped
/// with a warning; if every class is degenerate this is an error.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(CoreError::InvalidValue("auc needs aligned nonempty scores and labels".into()));
    }
    let classes = scores[0].len();
    let mut per_class = Vec::new();
    for c in 0..classes {
        let n_pos = labels.iter().filter(|&&l| l == c).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            log::warn!("auc: class {c} degenerate ({n_pos} positives), skipped");
            continue;
        }
        // midrank assignment over the class-c scores
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| scores[a][c].partial_cmp(&scores[b][c]).unwrap());
        let mut ranks = vec![0.0; labels.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && scores[order[j + 1]][c] == scores[order[i]][c] {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| ranks[i]).sum();
        let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
        per_class.push(auc);
    }
    if per_class.is_empty() {
        return Err(CoreError::InvalidValue("auc: every class degenerate".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Argmax accuracy; ties resolve to the lowest class index.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0.0; n + 1] }
    }

    fn add(&mut self, mut i: usize, x: f64) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += x;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum of entries at indices `0..=i`.
    fn prefix(&self, i: usize) -> f64 {
        let mut i = i + 1;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Concordance index over comparable pairs (i uncensored, `t_i < t_j`),
/// higher risk concordant with shorter time, risk ties counting half.
/// Runs in O(N log N) by sweeping times in descending order with a
/// Fenwick tree over compressed risk ranks.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    let n = risks.len();
    if n != times.len() || n != censored.len() {
        return Err(CoreError::InvalidValue("c-index inputs must align".into()));
    }
    let mut unique: Vec<f64> = risks.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unique.dedup();
    let rank_of = |r: f64| unique.binary_search_by(|x| x.partial_cmp(&r).unwrap()).unwrap();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).unwrap());

    let mut tree = Fenwick::new(unique.len());
    let mut in_tree = 0usize;
    let mut num = 0.0;
    let mut den = 0usize;

    let mut i = 0;
    while i < n {
        // group of equal times
        let mut j = i;
        while j + 1 < n && times[order[j + 1]] == times[order[i]] {
            j += 1;
        }
        // the tree holds exactly the subjects with strictly larger time
        for &idx in &order[i..=j] {
            if censored[idx] {
                continue;
            }
            let r = rank_of(risks[idx]);
            let less = if r == 0 { 0.0 } else { tree.prefix(r - 1) };
            let equal = tree.prefix(r) - less;
            num += less + 0.5 * equal;
            den += in_tree;
        }
        for &idx in &order[i..=j] {
            tree.add(rank_of(risks[idx]), 1.0);
            in_tree += 1;
        }
        i = j + 1;
    }
    if den == 0 {
        return Err(CoreError::InvalidValue("c-index: no comparable pairs".into()));
    }
    Ok(num / den as f64)
}

// ---------------------------------------------------------------------------
// Ablation variants
// ---------------------------------------------------------------------------

/// How missing modalities are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompletionVariant {
    /// Prompt nodes refined through the entity-dependent bank.
    Prompted,
    /// Prompt nodes without the bank.
    PromptedNoBank,
    /// Zero-vector stand-ins, nothing learnable.
    ZeroInit,
    /// Drop the modality from every subject whenever any subject misses it.
    DropModality,
}

/// How node features are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationVariant {
    MetaPathAttention,
    /// Uniform mean over the k most cosine-similar nodes, no attention.
    PlainMeanKnn { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaPathSource {
    Knowledge,
    Random,
}

/// Resolved pipeline shape for one ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    /// Typed node treatment: per-attribute projections and typed edges.
    pub hetero_embedding: bool,
    /// Typed edge treatment: per-relation edge projections.
    pub hetero_relations: bool,
    pub completion: CompletionVariant,
    pub aggregation: AggregationVariant,
    pub meta_paths: MetaPathSource,
}

pub const VARIANT_NAMES: [&str; 8] = [
    "full",
    "no_hetero_embedding",
    "no_hetero_relation",
    "no_completion_zero_init",
    "no_completion_drop",
    "no_prompt_bank",
    "plain_mean_knn15",
    "random_meta_paths",
];

/// The named pipeline variant, with exactly one component replaced
/// relative to the full model.
pub fn build_variant(name: &str) -> Result<VariantConfig> {
    let mut v = VariantConfig {
        name: name.to_string(),
        hetero_embedding: true,
        hetero_relations: true,
        completion: CompletionVariant::Prompted,
        aggregation: AggregationVariant::MetaPathAttention,
        meta_paths: MetaPathSource::Knowledge,
    };
    match name {
        "full" => {}
        "no_hetero_embedding" => {
            v.hetero_embedding = false;
            v.hetero_relations = false;
        }
        "no_hetero_relation" => v.hetero_relations = false,
        "no_completion_zero_init" => v.completion = CompletionVariant::ZeroInit,
        "no_completion_drop" => v.completion = CompletionVariant::DropModality,
        "no_prompt_bank" => v.completion = CompletionVariant::PromptedNoBank,
        "plain_mean_knn15" => v.aggregation = AggregationVariant::PlainMeanKnn { k: 15 },
        "random_meta_paths" => v.meta_paths = MetaPathSource::Random,
        _ => {
            return Err(CoreError::UnknownVariant {
                name: name.to_string(),
                valid: VARIANT_NAMES.join(", "),
            })
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_on_tape(tape: &mut Tape, weight: Tensor, bias: Tensor) -> HeadVars {
        HeadVars { weight: tape.constant(weight), bias: tape.constant(bias) }
    }

    #[test]
    fn grading_loss_uniform_head_is_ln_c() {
        let mut tape = Tape::new();
        let readout = tape.constant(Tensor::vector(vec![0.3, -0.4, 0.8]));
        let head = head_on_tape(&mut tape, Tensor::zeros(vec![4, 3]), Tensor::zeros(vec![4]));
        let loss = grading_loss(&mut tape, readout, &head, 2).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grading_loss_confident_head_is_tiny() {
        let mut tape = Tape::new();
        let readout = tape.constant(Tensor::vector(vec![1.0]));
        let head = head_on_tape(
            &mut tape,
            Tensor::matrix(&[vec![20.0], vec![0.0], vec![0.0]]).unwrap(),
            Tensor::zeros(vec![3]),
        );
        let loss = grading_loss(&mut tape, readout, &head, 0).unwrap();
        assert!(tape.value(loss).item() < 0.01);
    }

    #[test]
    fn grading_loss_matches_softmax_nll_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let d = 4;
            let classes = 3;
            let w = Tensor::randn(vec![classes, d], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(vec![classes], 0.0, 1.0, &mut rng);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let label = rng.gen_range(0..classes);

            let mut logits = vec![0.0; classes];
            for c in 0..classes {
                logits[c] = b.data()[c] + (0..d).map(|j| w.data()[c * d + j] * x[j]).sum::<f64>();
            }
            let probs = crate::tensor::softmax_slice(&logits).unwrap();
            let want = -probs[label].ln();

            let mut tape = Tape::new();
            let readout = tape.constant(Tensor::vector(x));
            let head = head_on_tape(&mut tape, w, b);
            let loss = grading_loss(&mut tape, readout, &head, label).unwrap();
            assert!((tape.value(loss).item() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn grading_loss_rejects_bad_label() {
        let mut tape = Tape::new();
        let readout = tape.constant(Tensor::vector(vec![1.0]));
        let head = head_on_tape(&mut tape, Tensor::zeros(vec![2, 1]), Tensor::zeros(vec![2]));
        assert!(matches!(
            grading_loss(&mut tape, readout, &head, 2),
            Err(CoreError::LabelOutOfRange { .. })
        ));
    }

    fn survival_with_logits(logits: Vec<f64>, bin: usize, censored: bool) -> f64 {
        let bins = logits.len();
        let mut tape = Tape::new();
        let readout = tape.constant(Tensor::vector(vec![1.0]));
        let weight = Tensor::new(vec![bins, 1], logits).unwrap();
        let head = head_on_tape(&mut tape, weight, Tensor::zeros(vec![bins]));
        let loss = survival_loss(&mut tape, readout, &head, bin, censored).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn survival_limits() {
        // single bin, uncensored, hazard -> 1: loss -> 0
        assert!(survival_with_logits(vec![40.0], 0, false) < 1e-12);
        // censored at the last bin with hazards -> 0: loss -> 0
        assert!(survival_with_logits(vec![-40.0, -40.0, -40.0], 2, true) < 1e-12);
    }

    #[test]
    fn survival_half_hazards_match_scalar_oracle() {
        // logits 0 -> hazards 0.5; uncensored at bin 0 of 2: -ln 0.5
        let got = survival_with_logits(vec![0.0, 0.0], 0, false);
        assert!((got - 0.5f64.ln().abs()).abs() < 1e-12);
        // uncensored at bin 1: -ln(1-0.5) - ln 0.5 = 2 ln 2
        let got = survival_with_logits(vec![0.0, 0.0], 1, false);
        assert!((got - 2.0 * 2.0f64.ln()).abs() < 1e-12);
        // censored at bin 0: -ln(1-0.5)
        let got = survival_with_logits(vec![0.0, 0.0], 0, true);
        assert!((got - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn time_bins_cover_and_assign() {
        let times = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let cuts = time_bins(&times, 4);
        assert_eq!(cuts.len(), 3);
        for t in &times {
            assert!(assign_bin(*t, &cuts) < 4);
        }
        assert_eq!(assign_bin(0.5, &cuts), 0);
        assert_eq!(assign_bin(100.0, &cuts), 3);
    }

    #[test]
    fn auc_perfectly_separated_binary() {
        let scores = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
        ];
        let labels = vec![0, 0, 1, 1];
        assert!((auc_ovr(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4000;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let auc = auc_ovr(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.03, "auc {auc}");
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(6..20);
            // quantized scores force ties
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![(rng.gen_range(0..5) as f64) / 4.0, rng.gen::<f64>()])
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let got = auc_ovr(&scores, &labels).unwrap();
            let col0: Vec<f64> = scores.iter().map(|r| r[0]).collect();
            let col1: Vec<f64> = scores.iter().map(|r| r[1]).collect();
            let pos0: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
            let pos1: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let want = (oracle::auc_binary_pairs(&col0, &pos0).unwrap()
                + oracle::auc_binary_pairs(&col1, &pos1).unwrap())
                / 2.0;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scores: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        let a = auc_ovr(&scores, &labels).unwrap();
        let transformed: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| r.iter().map(|x| (3.0 * x + 1.0).exp()).collect())
            .collect();
        let b = auc_ovr(&transformed, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_degenerate_handling() {
        // class 2 never appears: skipped, rest still averaged
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0]];
        let labels = vec![0, 1];
        assert!(auc_ovr(&scores, &labels).is_ok());
        // single class only: every class degenerate
        let labels = vec![0, 0];
        assert!(auc_ovr(&scores, &labels).is_err());
    }

    #[test]
    fn accuracy_of_majority_predictor_equals_majority_frequency() {
        let labels = vec![0, 0, 0, 1, 1, 2];
        let scores: Vec<Vec<f64>> = labels.iter().map(|_| vec![1.0, 0.0, 0.0]).collect();
        let acc = accuracy(&scores, &labels);
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cindex_perfect_and_anti_concordant() {
        let times = vec![1.0, 2.0, 3.0, 4.0];
        let censored = vec![false; 4];
        let risks: Vec<f64> = times.iter().map(|t| -t).collect();
        assert!((c_index(&risks, &times, &censored).unwrap() - 1.0).abs() < 1e-12);
        let risks: Vec<f64> = times.clone();
        assert!(c_index(&risks, &times, &censored).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cindex_random_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3000;
        let risks: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
        let censored: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.2).collect();
        let c = c_index(&risks, &times, &censored).unwrap();
        assert!((c - 0.5).abs() < 0.05, "c-index {c}");
    }

    #[test]
    fn cindex_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.gen_range(5..25);
            // quantization forces risk ties and some time ties
            let risks: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
            let times: Vec<f64> = (0..n).map(|_| (rng.gen_range(1..8) as f64) / 2.0).collect();
            let censored: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.3).collect();
            let want = oracle::cindex_pairs(&risks, &times, &censored);
            let got = c_index(&risks, &times, &censored);
            match want {
                None => assert!(got.is_err()),
                Some(w) => {
                    let g = got.unwrap();
                    assert!((g - w).abs() < 1e-12, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn cindex_five_subject_mixed_censoring_case() {
        let risks = vec![2.0, 1.0, 3.0, 0.5, 1.0];
        let times = vec![1.0, 2.0, 2.0, 3.0, 4.0];
        let censored = vec![false, true, false, false, true];
        let want = oracle::cindex_pairs(&risks, &times, &censored).unwrap();
        let got = c_index(&risks, &times, &censored).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cindex_no_comparable_pairs_errors() {
        let risks = vec![1.0, 2.0];
        let times = vec![1.0, 2.0];
        let censored = vec![true, true];
        assert!(c_index(&risks, &times, &censored).is_err());
    }

    #[test]
    fn cindex_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 60;
        let risks: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        let censored: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.25).collect();
        let a = c_index(&risks, &times, &censored).unwrap();
        let transformed: Vec<f64> = risks.iter().map(|r| (2.0 * r).tanh()).collect();
        let b = c_index(&transformed, &times, &censored).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn variants_resolve_and_unknown_rejected() {
        for name in VARIANT_NAMES {
            let v = build_variant(name).unwrap();
            assert_eq!(v.name, name);
        }
        let full = build_variant("full").unwrap();
        assert!(full.hetero_embedding && full.hetero_relations);
        assert_eq!(full.completion, CompletionVariant::Prompted);

        let zero = build_variant("no_completion_zero_init").unwrap();
        assert_eq!(zero.completion, CompletionVariant::ZeroInit);

        let knn = build_variant("plain_mean_knn15").unwrap();
        assert_eq!(knn.aggregation, AggregationVariant::PlainMeanKnn { k: 15 });

        let err = build_variant("bogus").unwrap_err().to_string();
        for name in VARIANT_NAMES {
            assert!(err.contains(name), "error should list {name}: {err}");
        }
    }

    #[test]
    fn survival_loss_gradient_matches_finite_differences() {
        let h = 1e-5;
        let build = |tape: &mut Tape, params: &[f64]| {
            let leaf = tape.leaf(Tensor::new(vec![4, 3], params.to_vec()).unwrap().with_grad());
            let readout = tape.constant(Tensor::vector(vec![0.3, -0.7, 0.2]));
            let bias = tape.constant(Tensor::zeros(vec![4]));
            let head = HeadVars { weight: leaf, bias };
            let loss = survival_loss(tape, readout, &head, 2, false).unwrap();
            (leaf, loss)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, &base);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).unwrap().to_vec();
        for i in 0..12 {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut tp = Tape::new();
            let (_, lp) = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let (_, lm) = build(&mut tm, &minus);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            assert!((analytic[i] - fd).abs() / denom < 1e-4);
        }
    }
}
