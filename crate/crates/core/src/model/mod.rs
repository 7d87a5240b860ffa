//! Expert layers, gates and towers assembled into the four model variants.
//!
//! | variant           | experts         | gates | towers     |
//! |-------------------|-----------------|-------|------------|
//! | `single_task`     | 1               | none  | main       |
//! | `fundamental_mtl` | 1 (shared)      | none  | main + aux |
//! | `m3`              | N (all shared)  | 2     | main + aux |
//! | `m3_tse`          | sh + 2·sp       | 2     | main + aux |
//!
//! In `m3_tse` experts are ordered shared, main-specific, aux-specific; each
//! task mixes only the shared experts and its own specific ones.

mod layers;
mod mix;

pub use layers::{BasicBlock, Expert, Gate, Tower};
pub use mix::{mix, mix_backward};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{join, Mode, Param, ParamRng, Parameters, Real, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("{0}")]
    Capability(String),
    #[error("state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleTask,
    FundamentalMtl,
    M3,
    M3Tse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Main,
    Aux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Expert count for `m3`.
    pub num_experts: usize,
    /// Shared experts for `m3_tse`.
    pub n_shared: usize,
    /// Task-specific experts per task for `m3_tse`.
    pub n_specific: usize,
    pub main_classes: usize,
    pub aux_classes: usize,
    pub main_gate_dim: usize,
    pub aux_gate_dim: usize,
    pub expert_channels: usize,
    /// Output channels of each residual block, two blocks per stage.
    pub tower_widths: Vec<usize>,
    pub gate_hidden: usize,
    pub pruned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::M3,
            num_experts: 3,
            n_shared: 1,
            n_specific: 1,
            main_classes: 9,
            aux_classes: 5,
            main_gate_dim: 1319,
            aux_gate_dim: 1319,
            expert_channels: 64,
            tower_widths: vec![64, 64, 128, 128, 256, 256, 512, 512],
            gate_hidden: 128,
            pruned: false,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Self::default()
        }
    }

    /// Same topology with narrow channels, for CPU-scale runs.
    pub fn desk(variant: Variant, gate_dim: usize) -> Self {
        ModelConfig {
            variant,
            main_gate_dim: gate_dim,
            aux_gate_dim: gate_dim,
            expert_channels: 16,
            tower_widths: vec![16, 16, 32, 32, 64, 64, 128, 128],
            gate_hidden: 32,
            ..Self::default()
        }
    }

    pub fn total_experts(&self) -> usize {
        match self.variant {
            Variant::SingleTask | Variant::FundamentalMtl => 1,
            Variant::M3 => self.num_experts,
            Variant::M3Tse => self.n_shared + 2 * self.n_specific,
        }
    }

    pub fn has_aux(&self) -> bool {
        self.variant != Variant::SingleTask && !self.pruned
    }

    pub fn gated(&self) -> bool {
        matches!(self.variant, Variant::M3 | Variant::M3Tse)
    }

    /// Indices of the experts a task mixes.
    pub fn accessible(&self, task: Task) -> Vec<usize> {
        match (self.variant, task) {
            (Variant::M3Tse, Task::Main) => (0..self.n_shared + self.n_specific).collect(),
            (Variant::M3Tse, Task::Aux) => (0..self.n_shared)
                .chain(self.n_shared + self.n_specific..self.n_shared + 2 * self.n_specific)
                .collect(),
            _ => (0..self.total_experts()).collect(),
        }
    }

    /// Experts that survive pruning: everything reachable from the main task.
    fn kept_experts(&self) -> usize {
        match self.variant {
            Variant::M3Tse => self.n_shared + self.n_specific,
            _ => self.total_experts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.main_classes < 2 || (self.variant != Variant::SingleTask && self.aux_classes < 2) {
            return err("each task needs at least 2 classes".into());
        }
        if self.expert_channels == 0 || self.gate_hidden == 0 {
            return err("channel widths must be positive".into());
        }
        if self.tower_widths.is_empty() || !self.tower_widths.len().is_multiple_of(2) || self.tower_widths.contains(&0)
        {
            return err(format!(
                "tower_widths must list a positive width for each of two blocks per stage, got {:?}",
                self.tower_widths
            ));
        }
        match self.variant {
            Variant::M3 if self.num_experts == 0 => return err("m3 needs num_experts >= 1".into()),
            Variant::M3Tse if self.n_shared + self.n_specific == 0 || self.n_specific == 0 => {
                return err("m3_tse needs n_specific >= 1".into())
            }
            _ => {}
        }
        if self.gated() && (self.main_gate_dim == 0 || self.aux_gate_dim == 0) {
            return err("gate input dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Logits of both heads plus the mixing weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    pub main: Tensor<T>,
    pub aux: Option<Tensor<T>>,
    pub weights_main: Option<Tensor<T>>,
    pub weights_aux: Option<Tensor<T>>,
}

struct Head<T> {
    gate: Option<Gate<T>>,
    tower: Tower<T>,
    /// Replaces the gate output with constant weights when set.
    fixed: Option<Vec<T>>,
    experts: Vec<usize>,
}

impl<T: Real> Clone for Head<T> {
    fn clone(&self) -> Self {
        Head {
            gate: self.gate.clone(),
            tower: self.tower.clone(),
            fixed: self.fixed.clone(),
            experts: self.experts.clone(),
        }
    }
}

struct Cache<T> {
    maps: Vec<Tensor<T>>,
    weights: [Option<Tensor<T>>; 2],
}

pub struct M3Model<T> {
    config: ModelConfig,
    experts: Vec<Expert<T>>,
    main: Head<T>,
    aux: Option<Head<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Real> Clone for M3Model<T> {
    fn clone(&self) -> Self {
        M3Model {
            config: self.config.clone(),
            experts: self.experts.clone(),
            main: self.main.clone(),
            aux: self.aux.clone(),
            cache: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for M3Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("M3Model")
            .field("config", &self.config)
            .field("experts", &self.experts.len())
            .finish()
    }
}

impl<T: Real> M3Model<T> {
    /// Builds a model. Every component draws its initial weights from its
    /// own seeded stream, so equally named components match across variants.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.expert_channels;
        let experts = (0..config.total_experts())
            .map(|i| Expert::new(c, &mut ParamRng::for_component(seed, &format!("expert.{i}"))))
            .collect();
        let make_head = |task: Task| {
            let (name, classes, dim) = match task {
                Task::Main => ("main", config.main_classes, config.main_gate_dim),
                Task::Aux => ("aux", config.aux_classes, config.aux_gate_dim),
            };
            let idx = config.accessible(task);
            Head {
                gate: config.gated().then(|| {
                    Gate::new(
                        dim,
                        config.gate_hidden,
                        idx.len(),
                        &mut ParamRng::for_component(seed, &format!("gate_{name}")),
                    )
                }),
                tower: Tower::new(
                    c,
                    &config.tower_widths,
                    classes,
                    &mut ParamRng::for_component(seed, &format!("tower_{name}")),
                ),
                fixed: None,
                experts: idx,
            }
        };
        let main = make_head(Task::Main);
        let aux = config.has_aux().then(|| make_head(Task::Aux));
        let mut model = M3Model {
            experts,
            main,
            aux,
            cache: None,
            config,
        };
        if model.config.pruned {
            model.experts.truncate(model.config.kept_experts());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert<T>] {
        &mut self.experts
    }

    fn head(&self, task: Task) -> Result<&Head<T>> {
        match task {
            Task::Main => Ok(&self.main),
            Task::Aux => self.aux.as_ref().ok_or_else(|| self.no_aux()),
        }
    }

    fn head_mut(&mut self, task: Task) -> Result<&mut Head<T>> {
        match task {
            Task::Main => Ok(&mut self.main),
            Task::Aux => {
                let e = self.no_aux();
                self.aux.as_mut().ok_or(e)
            }
        }
    }

    fn no_aux(&self) -> ModelError {
        if self.config.pruned {
            ModelError::Capability("size estimation is unavailable: the auxiliary head was pruned".into())
        } else {
            ModelError::Capability("this model has no auxiliary head".into())
        }
    }

    pub fn gate(&self, task: Task) -> Option<&Gate<T>> {
        self.head(task).ok()?.gate.as_ref()
    }

    pub fn gate_mut(&mut self, task: Task) -> Option<&mut Gate<T>> {
        self.head_mut(task).ok()?.gate.as_mut()
    }

    pub fn tower(&self, task: Task) -> Option<&Tower<T>> {
        self.head(task).ok().map(|h| &h.tower)
    }

    pub fn tower_mut(&mut self, task: Task) -> Option<&mut Tower<T>> {
        self.head_mut(task).ok().map(|h| &mut h.tower)
    }

    /// Freezes a task's mixing weights to `weights` (one per accessible
    /// expert), bypassing its gate; `None` restores the gate.
    pub fn set_fixed_weights(&mut self, task: Task, weights: Option<&[f64]>) -> Result<()> {
        let head = self.head_mut(task)?;
        if head.gate.is_none() {
            return Err(ModelError::Capability("this variant has no gates".into()));
        }
        if let Some(w) = weights {
            if w.len() != head.experts.len() {
                return Err(ModelError::Config(format!(
                    "{} fixed weights for {} accessible experts",
                    w.len(),
                    head.experts.len()
                )));
            }
        }
        head.fixed = weights.map(|w| w.iter().map(|&v| T::cast(v)).collect());
        Ok(())
    }

    fn gate_input<'a>(&self, task: Task, s: Option<&'a Tensor<T>>, batch: usize) -> Result<Option<&'a Tensor<T>>> {
        let head = self.head(task)?;
        match (&head.gate, &head.fixed) {
            (Some(g), None) => {
                let s = s.ok_or_else(|| ModelError::Config(format!("{task:?} gate needs a gating feature")))?;
                if s.shape() != [batch, g.in_features()] {
                    return Err(TensorError::Shape(format!(
                        "{task:?} gating feature must be [{batch}, {}], got {:?}",
                        g.in_features(),
                        s.shape()
                    ))
                    .into());
                }
                Ok(Some(s))
            }
            _ => Ok(None),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.rank() != 4 || x.dim(1) != 1 {
            return Err(TensorError::Shape(format!("model input must be [B, 1, H, W], got {:?}", x.shape())).into());
        }
        Ok(x.dim(0))
    }

    fn fixed_weights(fixed: &[T], batch: usize) -> Tensor<T> {
        let m = fixed.len();
        let mut data = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            data.extend_from_slice(fixed);
        }
        Tensor::from_vec(&[batch, m], data).expect("length matches")
    }

    /// Training-path forward; caches everything `backward` needs.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        s_main: Option<&Tensor<T>>,
        s_aux: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Output<T>> {
        let b = self.check_input(x)?;
        let s_main = self.gate_input(Task::Main, s_main, b)?;
        let s_aux = if self.aux.is_some() {
            self.gate_input(Task::Aux, s_aux, b)?
        } else {
            None
        };
        let maps = self
            .experts
            .iter_mut()
            .map(|e| e.forward(x, mode))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let run = |head: &mut Head<T>, s: Option<&Tensor<T>>| -> Result<(Tensor<T>, Option<Tensor<T>>)> {
            let w = match (&mut head.gate, &head.fixed) {
                (Some(_), Some(f)) => Some(Self::fixed_weights(f, b)),
                (Some(g), None) => Some(g.forward(s.expect("checked above"), mode)?),
                (None, _) => None,
            };
            let mixed = match &w {
                Some(w) => {
                    let refs: Vec<&Tensor<T>> = head.experts.iter().map(|&i| &maps[i]).collect();
                    mix(&refs, w)?
                }
                None => maps[head.experts[0]].clone(),
            };
            Ok((head.tower.forward(&mixed, mode)?, w))
        };
        let (main, w_main) = run(&mut self.main, s_main)?;
        let (aux, w_aux) = match &mut self.aux {
            Some(h) => {
                let (z, w) = run(h, s_aux)?;
                (Some(z), w)
            }
            None => (None, None),
        };
        self.cache = Some(Cache {
            maps,
            weights: [w_main.clone(), w_aux.clone()],
        });
        Ok(Output {
            main,
            aux,
            weights_main: w_main,
            weights_aux: w_aux,
        })
    }

    fn head_backward(
        head: &mut Head<T>,
        g: &Tensor<T>,
        w: Option<&Tensor<T>>,
        maps: &[Tensor<T>],
        d_maps: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let dmix = head.tower.backward(g)?;
        let mut bufs: Vec<Tensor<T>> = head
            .experts
            .iter()
            .map(|&i| d_maps[i].take().unwrap_or_else(|| Tensor::zeros(dmix.shape())))
            .collect();
        match w {
            Some(w) => {
                let refs: Vec<&Tensor<T>> = head.experts.iter().map(|&i| &maps[i]).collect();
                let mut buf_refs: Vec<&mut Tensor<T>> = bufs.iter_mut().collect();
                let dw = mix_backward(&refs, w, &dmix, &mut buf_refs)?;
                if let (Some(gate), None) = (&mut head.gate, &head.fixed) {
                    gate.backward(&dw)?;
                }
            }
            None => bufs[0].add_assign(&dmix)?,
        }
        for (&i, buf) in head.experts.iter().zip(bufs) {
            d_maps[i] = Some(buf);
        }
        Ok(())
    }

    /// Accumulates gradients from the given logit gradients. A task whose
    /// gradient is `None` contributes nothing, and parameters reached by no
    /// contributing task are left without a gradient.
    pub fn backward(&mut self, g_main: Option<&Tensor<T>>, g_aux: Option<&Tensor<T>>) -> Result<()> {
        if g_aux.is_some() && self.aux.is_none() {
            return Err(self.no_aux());
        }
        let cache = self.cache.take().ok_or(TensorError::NoCache)?;
        let mut d_maps: Vec<Option<Tensor<T>>> = vec![None; cache.maps.len()];
        let mut result = Ok(());
        if let Some(g) = g_main {
            result = Self::head_backward(&mut self.main, g, cache.weights[0].as_ref(), &cache.maps, &mut d_maps);
        }
        if let (Ok(()), Some(g), Some(head)) = (&result, g_aux, self.aux.as_mut()) {
            result = Self::head_backward(head, g, cache.weights[1].as_ref(), &cache.maps, &mut d_maps);
        }
        if result.is_ok() {
            for (e, d) in self.experts.iter_mut().zip(&d_maps) {
                if let Some(d) = d {
                    if let Err(err) = e.backward(d) {
                        result = Err(err.into());
                        break;
                    }
                }
            }
        }
        self.cache = Some(cache);
        result
    }

    /// Eval-mode forward through both heads, without caching.
    pub fn infer(&self, x: &Tensor<T>, s_main: Option<&Tensor<T>>, s_aux: Option<&Tensor<T>>) -> Result<Output<T>> {
        let b = self.check_input(x)?;
        let s_main = self.gate_input(Task::Main, s_main, b)?;
        let s_aux = if self.aux.is_some() {
            self.gate_input(Task::Aux, s_aux, b)?
        } else {
            None
        };
        let maps = self
            .experts
            .iter()
            .map(|e| e.infer(x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let run = |head: &Head<T>, s: Option<&Tensor<T>>| -> Result<(Tensor<T>, Option<Tensor<T>>)> {
            let w = match (&head.gate, &head.fixed) {
                (Some(_), Some(f)) => Some(Self::fixed_weights(f, b)),
                (Some(g), None) => Some(g.infer(s.expect("checked above"))?),
                (None, _) => None,
            };
            let z = match &w {
                Some(w) => {
                    let refs: Vec<&Tensor<T>> = head.experts.iter().map(|&i| &maps[i]).collect();
                    head.tower.infer(&mix(&refs, w)?)?
                }
                None => head.tower.infer(&maps[head.experts[0]])?,
            };
            Ok((z, w))
        };
        let (main, w_main) = run(&self.main, s_main)?;
        let (aux, w_aux) = match &self.aux {
            Some(h) => {
                let (z, w) = run(h, s_aux)?;
                (Some(z), w)
            }
            None => (None, None),
        };
        Ok(Output {
            main,
            aux,
            weights_main: w_main,
            weights_aux: w_aux,
        })
    }

    /// Size-estimation logits; fails on a pruned or single-task model.
    pub fn infer_aux(&self, x: &Tensor<T>, s_main: Option<&Tensor<T>>, s_aux: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.head(Task::Aux)?;
        Ok(self.infer(x, s_main, s_aux)?.aux.expect("aux head present"))
    }

    /// Drops the auxiliary gate and tower and any experts only the
    /// auxiliary task can reach. Main-task outputs are unchanged. Pruning a
    /// model without an auxiliary head returns it as is, with a warning.
    pub fn prune_for_inference(mut self) -> (Self, Option<String>) {
        if self.aux.is_none() {
            let why = if self.config.pruned {
                "already pruned"
            } else {
                "it has no auxiliary head"
            };
            return (self, Some(format!("nothing to prune: {why}")));
        }
        self.aux = None;
        self.experts.truncate(self.config.kept_experts());
        self.config.pruned = true;
        self.cache = None;
        (self, None)
    }

    /// Learnable scalars. With `include_prunable = false` only the parts
    /// that serve the main task are counted.
    pub fn parameter_count(&self, include_prunable: bool) -> usize {
        let head = |h: &Head<T>| h.tower.num_params() + h.gate.as_ref().map_or(0, Gate::num_params);
        let kept = if include_prunable {
            self.experts.len()
        } else {
            self.config.kept_experts().min(self.experts.len())
        };
        let mut n = self.experts[..kept].iter().map(Expert::num_params).sum::<usize>() + head(&self.main);
        if include_prunable {
            n += self.aux.as_ref().map_or(0, head);
        }
        n
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for e in &mut self.experts {
            e.clear_cache();
        }
        for h in std::iter::once(&mut self.main).chain(self.aux.as_mut()) {
            if let Some(g) = &mut h.gate {
                g.clear_cache();
            }
            h.tower.clear_cache();
        }
    }

    /// Parameters and running statistics by name, parameters first.
    pub fn state(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        let mut params = Vec::new();
        self.visit_params("", &mut params);
        out.extend(params.into_iter().map(|(n, p)| (n, p.value.clone())));
        let mut bufs = Vec::new();
        self.visit_buffers("", &mut bufs);
        out.extend(bufs.into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    /// Loads a state produced by [`M3Model::state`] on an identically
    /// configured model. Every name must be present with a matching shape.
    pub fn load_state(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut expected = 0;
        let mut assign = |n: &str, t: &mut Tensor<T>| -> Result<()> {
            expected += 1;
            match lookup.get(n) {
                Some(src) if src.shape() == t.shape() => {
                    *t = (*src).clone();
                    Ok(())
                }
                Some(src) => Err(ModelError::State(format!(
                    "{n}: shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                ))),
                None => Err(ModelError::State(format!("missing entry {n}"))),
            }
        };
        let mut params = Vec::new();
        self.visit_params("", &mut params);
        for (n, p) in params {
            assign(&n, &mut p.value)?;
        }
        let mut bufs = Vec::new();
        self.visit_buffers("", &mut bufs);
        for (n, t) in bufs {
            assign(&n, t)?;
        }
        if expected != entries.len() {
            return Err(ModelError::State(format!(
                "state has {} entries, model expects {expected}",
                entries.len()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Parameters<T> for M3Model<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_params(&join(prefix, &format!("experts.{i}")), out);
        }
        for (name, h) in [("main", Some(&mut self.main)), ("aux", self.aux.as_mut())] {
            if let Some(h) = h {
                if let Some(g) = &mut h.gate {
                    g.visit_params(&join(prefix, &format!("gate_{name}")), out);
                }
                h.tower.visit_params(&join(prefix, &format!("tower_{name}")), out);
            }
        }
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_buffers(&join(prefix, &format!("experts.{i}")), out);
        }
        for (name, h) in [("main", Some(&mut self.main)), ("aux", self.aux.as_mut())] {
            if let Some(h) = h {
                if let Some(g) = &mut h.gate {
                    g.visit_buffers(&join(prefix, &format!("gate_{name}")), out);
                }
                h.tower.visit_buffers(&join(prefix, &format!("tower_{name}")), out);
            }
        }
    }
}

#[cfg(test)]
mod tests;
