//! Parameter registry, tape binding, and the Adam optimizer.
//!
//! Parameters live in a [`ParamSet`] with stable indices so gradient
//! accumulation across per-subject tapes and optimizer state stay aligned.
//! Weight decay is applied decoupled (subtracted as `lr * wd * param` after
//! the adaptive step); this is exposed as part of [`AdamState`] config.

use crate::tensor::{Grads, Tape, Tensor, Var};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Aggregation, projections, task head.
    Main,
    /// Prompt nodes, prompt bank, and the bank weighting projection.
    Prompt,
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named, grouped learnable tensors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-tape binding of parameters to leaf vars. Binding the same parameter
/// twice returns the same var so gradients accumulate correctly.
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
}

impl ParamBinding {
    pub fn new(params: &ParamSet) -> Self {
        Self { vars: vec![None; params.len()] }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(params.get(id).clone().with_grad());
        self.vars[id.0] = Some(v);
        v
    }

    /// Pull this tape's gradients for every bound parameter, aligned with
    /// the parameter set. Unbound or unreached parameters yield `None`.
    pub fn collect(&self, grads: &Grads) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|var| grads.get(var).map(|g| g.to_vec())))
            .collect()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub sums: Vec<Option<Vec<f64>>>,
    pub count: usize,
}

impl GradAccum {
    pub fn new(params: &ParamSet) -> Self {
        Self { sums: vec![None; params.len()], count: 0 }
    }

    pub fn add(&mut self, per_param: &[Option<Vec<f64>>]) {
        self.count += 1;
        for (slot, g) in self.sums.iter_mut().zip(per_param) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// Average accumulated gradients over the number of contributions.
    pub fn averaged(&self) -> Vec<Option<Vec<f64>>> {
        let n = self.count.max(1) as f64;
        self.sums
            .iter()
            .map(|s| s.as_ref().map(|g| g.iter().map(|x| x / n).collect()))
            .collect()
    }
}

/// Adam state for one learning-rate group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ids: Vec<ParamId>,
}

impl AdamState {
    /// Moment buffers are laid out for the given group's parameters.
    pub fn new(params: &ParamSet, group: ParamGroup, lr: f64, weight_decay: f64) -> Self {
        let ids = params.ids_in_group(group);
        let m = ids.iter().map(|id| vec![0.0; params.get(*id).numel()]).collect();
        let v = ids.iter().map(|id| vec![0.0; params.get(*id).numel()]).collect();
        Self { step: 0, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, ids }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

/// One Adam update over the state's parameter group. `grads` is aligned
/// with the full parameter set; missing entries count as zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (slot, id) in state.ids.iter().enumerate() {
        let zero;
        let g: &[f64] = match &grads[id.0] {
            Some(g) => g,
            None => {
                zero = vec![0.0; params.get(*id).numel()];
                &zero
            }
        };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFiniteGradient(params.name(*id).to_string()));
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let p = params.get_mut(*id);
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            if state.weight_decay != 0.0 {
                data[i] -= state.lr * state.weight_decay * data[i];
            }
        }
    }
    Ok(())
}
