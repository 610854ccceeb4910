//! Training loop, evaluation, ablation matrix, missing-ratio sweeps, and
//! the similarity report. Per-subject gradient computation inside a batch
//! is data-parallel; results are reduced in subject order so runs are
//! reproducible bit for bit under a fixed seed.

use crate::data::{apply_missing, AugmentConfig, Fold, FoldPlan, SubjectRecord};
use crate::graph::{IntraModalTopology, Modality};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, AdamState, GradAccum, ParamBinding, ParamGroup};
use crate::par;
use crate::tasks::{accuracy, auc_ovr, build_variant, c_index, Metrics, TaskKind};
use crate::tensor::Tape;
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Run-level configuration. Defaults carry the reference training recipe:
/// Adam at 1e-3 with weight decay 1e-5 for the aggregation and head, a
/// smaller 2e-4 rate for prompt parameters, 150 epochs with early
/// stopping, five prompt nodes and bank components, dropout 0.2, and a
/// 512-wide graph space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: String,
    pub classes: usize,
    pub survival_bins: usize,
    pub variant: String,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub lr_main: f64,
    pub lr_prompt: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub n_prompts: usize,
    pub n_bank: usize,
    pub dropout: f64,
    pub grad_accum: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub eta_g: f64,
    pub eta_i: f64,
    pub eta_c: f64,
    pub eta_t: f64,
    pub augment: bool,
    pub augment_edge_drop: f64,
    pub augment_node_drop: f64,
    pub augment_noise_std: f64,
    pub tie_kv: bool,
    pub residual: bool,
    pub layer_norm: bool,
    pub intra_modal_knn: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "grading".into(),
            classes: 3,
            survival_bins: 4,
            variant: "full".into(),
            dim: 512,
            heads: 4,
            layers: 2,
            lr_main: 1e-3,
            lr_prompt: 2e-4,
            weight_decay: 1e-5,
            epochs: 150,
            early_stop: true,
            patience: 25,
            min_delta: 1e-4,
            n_prompts: 5,
            n_bank: 5,
            dropout: 0.2,
            grad_accum: 8,
            folds: 5,
            val_fraction: 0.15,
            eta_g: 0.0,
            eta_i: 0.0,
            eta_c: 0.0,
            eta_t: 0.0,
            augment: true,
            augment_edge_drop: 0.1,
            augment_node_drop: 0.05,
            augment_noise_std: 0.01,
            tie_kv: false,
            residual: false,
            layer_norm: false,
            intra_modal_knn: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.task.as_str() {
            "grading" => Ok(TaskKind::Grading { classes: self.classes }),
            "survival" => Ok(TaskKind::Survival { bins: self.survival_bins }),
            other => Err(CoreError::Config(format!(
                "unknown task {other:?}; expected grading or survival"
            ))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            n_prompts: self.n_prompts,
            n_bank: self.n_bank,
            dropout: self.dropout,
            tie_kv: self.tie_kv,
            residual: self.residual,
            layer_norm: self.layer_norm,
            intra_modal: match self.intra_modal_knn {
                Some(k) => IntraModalTopology::Knn(k),
                None => IntraModalTopology::Complete,
            },
            task: self.task_kind()?,
            variant: build_variant(&self.variant)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_config(&self) -> Option<AugmentConfig> {
        if !self.augment {
            return None;
        }
        Some(AugmentConfig {
            edge_drop: self.augment_edge_drop,
            node_drop: self.augment_node_drop,
            noise_std: self.augment_noise_std,
        })
    }

    pub fn missing_spec(&self) -> Vec<(Modality, f64)> {
        [
            (Modality::Genomics, self.eta_g),
            (Modality::Image, self.eta_i),
            (Modality::Cell, self.eta_c),
            (Modality::Text, self.eta_t),
        ]
        .into_iter()
        .filter(|(_, eta)| *eta > 0.0)
        .collect()
    }
}

/// Extra knobs for callers that drive training programmatically.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop a fold early once training accuracy reaches this level
    /// (grading only); used by the overfit sanity check.
    pub stop_at_train_acc: Option<f64>,
    /// Train only the first N folds of the plan (the plan itself keeps
    /// its full partition count so missing simulation stays balanced).
    pub max_folds: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// One line of the metrics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub variant: String,
    pub fold: usize,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub c_index: Option<f64>,
    pub seed: u64,
    pub epoch_best: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub folds: Vec<FoldReport>,
    pub mean: Metrics,
}

impl RunReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let mean_of = |values: Vec<f64>| {
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        };
        let mean = Metrics {
            auc: mean_of(folds.iter().filter_map(|f| f.auc).collect()),
            acc: mean_of(folds.iter().filter_map(|f| f.acc).collect()),
            c_index: mean_of(folds.iter().filter_map(|f| f.c_index).collect()),
        };
        Self { folds, mean }
    }

    /// The task's headline metric: AUC for grading, C-index for survival.
    pub fn primary(&self) -> Option<f64> {
        self.mean.auc.or(self.mean.c_index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub report: RunReport,
    pub plan: FoldPlan,
    #[serde(skip)]
    pub outcomes: Vec<FoldOutcome>,
}

/// Stable seed mixing for derived rng streams.
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
    }
    h
}

struct SubjectGrad {
    grads: Vec<Option<Vec<f64>>>,
    loss: f64,
}

fn subject_gradient(
    model: &Model,
    subject: &SubjectRecord,
    augment: Option<&AugmentConfig>,
    rng_seed: u64,
) -> Result<SubjectGrad> {
    let mut tape = Tape::new();
    let mut binding = ParamBinding::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let loss = model.loss(&mut tape, &mut binding, subject, augment, &mut rng)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(CoreError::Training(format!(
            "non-finite loss {loss_value} on subject {}",
            subject.subject_id
        )));
    }
    let grads = tape.backward(loss)?;
    Ok(SubjectGrad { grads: binding.collect(&grads), loss: loss_value })
}

fn mean_eval_loss(model: &Model, subjects: &[SubjectRecord], indices: &[usize]) -> Result<f64> {
    let losses: Vec<Result<f64>> =
        par::map_collect(indices, |&i| model.eval_loss(&subjects[i]));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / indices.len().max(1) as f64)
}

fn train_accuracy(model: &Model, subjects: &[SubjectRecord], indices: &[usize]) -> Result<f64> {
    let scored: Vec<Result<(Vec<f64>, usize)>> = par::map_collect(indices, |&i| {
        let s = model.scores(&subjects[i])?;
        Ok((s.class_probs.unwrap_or_default(), subjects[i].labels.grade))
    });
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in scored {
        let (p, l) = r?;
        rows.push(p);
        labels.push(l);
    }
    Ok(accuracy(&rows, &labels))
}

/// Train one fold: fit priors and initialize on the gradient split, run
/// epochs of accumulated Adam steps with two learning-rate groups, early
/// stop on held-out validation loss, and restore the best snapshot.
pub fn train_fold(
    run: &RunConfig,
    subjects: &[SubjectRecord],
    fold: &Fold,
    fold_idx: usize,
    opts: &TrainOptions,
) -> Result<FoldOutcome> {
    let model_cfg = run.model_config()?;
    let augment = run.augment_config();

    // held-out validation split carved from the fold's training indices
    let mut order = fold.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(run.seed, &[fold_idx as u64, 0xa1]));
    order.shuffle(&mut rng);
    let n_val = if run.val_fraction <= 0.0 {
        0
    } else {
        ((order.len() as f64 * run.val_fraction).round() as usize)
            .clamp(1, order.len().saturating_sub(1).max(1))
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_subjects: Vec<SubjectRecord> = train_idx.iter().map(|&i| subjects[i].clone()).collect();

    let mut model = Model::new(model_cfg, &train_subjects, mix_seed(run.seed, &[fold_idx as u64, 1]))?;
    let mut opt_main = AdamState::new(&model.params, ParamGroup::Main, run.lr_main, run.weight_decay);
    let mut opt_prompt = AdamState::new(&model.params, ParamGroup::Prompt, run.lr_prompt, 0.0);

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut since_best = 0usize;
    let mut log = Vec::with_capacity(run.epochs);

    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = train_idx.to_vec();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(run.seed, &[fold_idx as u64, 2, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(run.grad_accum.max(1)) {
            let results: Vec<Result<SubjectGrad>> = par::map_collect(chunk, |&i| {
                subject_gradient(
                    &model,
                    &subjects[i],
                    augment.as_ref(),
                    mix_seed(run.seed, &[fold_idx as u64, 3, epoch as u64, i as u64]),
                )
            });
            let mut accum = GradAccum::new(&model.params);
            for r in results {
                let g = r?;
                epoch_loss += g.loss;
                accum.add(&g.grads);
            }
            let averaged = accum.averaged();
            adam_step(&mut model.params, &averaged, &mut opt_main)?;
            adam_step(&mut model.params, &averaged, &mut opt_prompt)?;
        }
        let train_loss = epoch_loss / train_idx.len().max(1) as f64;
        let val_loss = mean_eval_loss(&model, subjects, val_idx)?;

        let train_acc = match (opts.stop_at_train_acc, &model.config.task) {
            (Some(_), TaskKind::Grading { .. }) => Some(train_accuracy(&model, subjects, train_idx)?),
            _ => None,
        };
        log.push(EpochLog { epoch, train_loss, val_loss, train_acc });

        if val_loss < best_val - run.min_delta {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }

        if let (Some(target), Some(acc)) = (opts.stop_at_train_acc, train_acc) {
            if acc >= target {
                best_params = model.params.clone();
                best_epoch = epoch;
                break;
            }
        }
        if run.early_stop && since_best > run.patience {
            break;
        }
    }

    model.params = best_params;
    Ok(FoldOutcome { model, log, best_epoch })
}

/// Test-split metrics for a trained model.
pub fn evaluate(model: &Model, subjects: &[SubjectRecord], indices: &[usize]) -> Result<Metrics> {
    match model.config.task {
        TaskKind::Grading { .. } => {
            let scored: Vec<Result<Vec<f64>>> = par::map_collect(indices, |&i| {
                Ok(model.scores(&subjects[i])?.class_probs.unwrap_or_default())
            });
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (r, &i) in scored.into_iter().zip(indices) {
                rows.push(r?);
                labels.push(subjects[i].labels.grade);
            }
            Ok(Metrics {
                auc: Some(auc_ovr(&rows, &labels)?),
                acc: Some(accuracy(&rows, &labels)),
                c_index: None,
            })
        }
        TaskKind::Survival { .. } => {
            let scored: Vec<Result<f64>> =
                par::map_collect(indices, |&i| Ok(model.scores(&subjects[i])?.risk.unwrap()));
            let mut risks = Vec::new();
            let mut times = Vec::new();
            let mut censored = Vec::new();
            for (r, &i) in scored.into_iter().zip(indices) {
                risks.push(r?);
                times.push(subjects[i].labels.time);
                censored.push(subjects[i].labels.censored);
            }
            Ok(Metrics {
                auc: None,
                acc: None,
                c_index: Some(c_index(&risks, &times, &censored)?),
            })
        }
    }
}

/// Cross-validated training: applies missing simulation per the config,
/// trains every fold, evaluates each test split, and optionally writes
/// checkpoints, logs, the fold plan, and the metrics report.
pub fn run_train(
    run: &RunConfig,
    subjects: &mut [SubjectRecord],
    out_dir: Option<&Path>,
    opts: &TrainOptions,
) -> Result<RunSummary> {
    run.model_config()?; // fail fast on invalid dims
    let mut plan = FoldPlan::new(subjects.len(), run.folds, run.seed)?;
    for (m, eta) in run.missing_spec() {
        apply_missing(subjects, m, eta, mix_seed(run.seed, &[m.index() as u64, 0xe7a]), &mut plan)?;
    }

    let mut folds = plan.folds();
    if let Some(n) = opts.max_folds {
        folds.truncate(n.max(1));
    }
    let mut outcomes = Vec::with_capacity(folds.len());
    let mut reports = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let outcome = train_fold(run, subjects, fold, k, opts)?;
        let metrics = evaluate(&outcome.model, subjects, &fold.test)?;
        reports.push(FoldReport {
            variant: run.variant.clone(),
            fold: k,
            auc: metrics.auc,
            acc: metrics.acc,
            c_index: metrics.c_index,
            seed: run.seed,
            epoch_best: outcome.best_epoch,
        });
        outcomes.push(outcome);
    }
    let report = RunReport::from_folds(reports);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (k, outcome) in outcomes.iter().enumerate() {
            let ckpt = std::fs::File::create(dir.join(format!("fold{k}.ckpt.json")))?;
            serde_json::to_writer(std::io::BufWriter::new(ckpt), &outcome.model)?;
            let log = std::fs::File::create(dir.join(format!("fold{k}.log.json")))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(log), &outcome.log)?;
        }
        let planf = std::fs::File::create(dir.join("foldplan.json"))?;
        serde_json::to_writer(std::io::BufWriter::new(planf), &plan)?;
        let metf = std::fs::File::create(dir.join("metrics.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(metf), &report)?;
    }

    Ok(RunSummary { report, plan, outcomes })
}

/// Re-evaluate checkpoints from a training run directory against a
/// dataset, reproducing the per-fold and mean metrics report.
pub fn run_eval(run_dir: &Path, subjects: &mut [SubjectRecord]) -> Result<RunReport> {
    let plan: FoldPlan = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(run_dir.join("foldplan.json"))?,
    ))?;
    if plan.n_subjects != subjects.len() {
        return Err(CoreError::Config(format!(
            "fold plan covers {} subjects, dataset has {}",
            plan.n_subjects,
            subjects.len()
        )));
    }
    plan.replay_missing(subjects);
    let mut reports = Vec::new();
    for (k, fold) in plan.folds().iter().enumerate() {
        let model: Model = serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(run_dir.join(format!("fold{k}.ckpt.json")))?,
        ))?;
        let metrics = evaluate(&model, subjects, &fold.test)?;
        reports.push(FoldReport {
            variant: model.config.variant.name.clone(),
            fold: k,
            auc: metrics.auc,
            acc: metrics.acc,
            c_index: metrics.c_index,
            seed: 0,
            epoch_best: 0,
        });
    }
    Ok(RunReport::from_folds(reports))
}

/// Per-variant cross-validated results with shared folds and seed.
pub fn run_ablation(
    base: &RunConfig,
    subjects: &[SubjectRecord],
    variants: &[&str],
) -> Vec<(String, Result<RunReport>)> {
    variants
        .iter()
        .map(|&name| {
            let mut run = base.clone();
            run.variant = name.to_string();
            let mut data = subjects.to_vec();
            let res = run_train(&run, &mut data, None, &TrainOptions::default())
                .map(|s| s.report);
            (name.to_string(), res)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub eta: f64,
    pub variant: String,
    pub seed_metrics: Vec<f64>,
    pub mean: f64,
}

/// Missing-ratio sweep: for each ratio and each of the two completion
/// arms, train on a fresh copy of the dataset over several seeds and
/// report the primary metric.
pub fn sweep_missing(
    base: &RunConfig,
    subjects: &[SubjectRecord],
    modality: Modality,
    ratios: &[f64],
    n_seeds: u64,
    arms: &[&str],
    opts: &TrainOptions,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &eta in ratios {
        for &arm in arms {
            let seeds: Vec<u64> = (0..n_seeds).collect();
            let results: Vec<Result<f64>> = par::map_collect(&seeds, |&seed| {
                let mut run = base.clone();
                run.variant = arm.to_string();
                run.seed = mix_seed(base.seed, &[seed, (eta * 1000.0) as u64]);
                set_eta(&mut run, modality, eta);
                let mut data = subjects.to_vec();
                let summary = run_train(&run, &mut data, None, opts)?;
                summary
                    .report
                    .primary()
                    .ok_or_else(|| CoreError::Training("run produced no primary metric".into()))
            });
            let mut seed_metrics = Vec::new();
            for r in results {
                seed_metrics.push(r?);
            }
            let mean = seed_metrics.iter().sum::<f64>() / seed_metrics.len().max(1) as f64;
            cells.push(SweepCell { eta, variant: arm.to_string(), seed_metrics, mean });
        }
    }
    Ok(cells)
}

fn set_eta(run: &mut RunConfig, modality: Modality, eta: f64) {
    match modality {
        Modality::Genomics => run.eta_g = eta,
        Modality::Image => run.eta_i = eta,
        Modality::Cell => run.eta_c = eta,
        Modality::Text => run.eta_t = eta,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationWeights {
    pub relation: String,
    pub original: Vec<f64>,
    pub completed: Vec<f64>,
    pub mean_original: f64,
    pub mean_completed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub subject_id: String,
    pub missing: Option<char>,
    pub relations: Vec<RelationWeights>,
    pub mean_abs_diff: f64,
}

/// Compare cosine edge weights between the subject's full graph and the
/// graph rebuilt with one modality removed then completed. Per-relation
/// weight lists are emitted alongside the mean absolute difference of the
/// per-relation means.
pub fn similarity_report(
    model: &Model,
    subject: &SubjectRecord,
    missing: Option<Modality>,
) -> Result<SimilarityReport> {
    let original = model.build_graph(subject)?;
    let completed = match missing {
        Some(m) => model.build_completed_graph(subject, m)?,
        None => original.clone(),
    };

    let collect = |g: &crate::graph::HetGraph| {
        let mut by_rel: std::collections::BTreeMap<crate::graph::Relation, Vec<f64>> =
            std::collections::BTreeMap::new();
        for e in &g.edges {
            by_rel.entry(e.relation).or_default().push(e.weight);
        }
        by_rel
    };
    let orig = collect(&original);
    let comp = collect(&completed);

    let mut relations = Vec::new();
    let mut diffs = Vec::new();
    for rel in crate::graph::Relation::ALL {
        let o = orig.get(&rel).cloned().unwrap_or_default();
        let c = comp.get(&rel).cloned().unwrap_or_default();
        if o.is_empty() && c.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let mo = mean(&o);
        let mc = mean(&c);
        if !o.is_empty() && !c.is_empty() {
            diffs.push((mo - mc).abs());
        }
        relations.push(RelationWeights {
            relation: rel.name().to_string(),
            original: o,
            completed: c,
            mean_original: mo,
            mean_completed: mc,
        });
    }
    let mean_abs_diff = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    Ok(SimilarityReport {
        subject_id: subject.subject_id.clone(),
        missing: missing.map(|m| m.letter()),
        relations,
        mean_abs_diff,
    })
}
