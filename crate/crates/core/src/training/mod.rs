//! Joint multi-task optimization: weighted cross-entropy, AdamW with a
//! warmup-cosine schedule, the training loop, evaluation and run reports.

mod data;
mod fit;
mod lmr;
mod optim;
mod report;

pub use data::{evaluate, Batch, Confusion, Evaluation, SampleSet};
pub use fit::{train, EpochMetrics, Selection, TrainOutcome};
pub use lmr::{lmr_augment, LmrConfig, Region};
pub use optim::{lr_schedule, AdamW, AdamWConfig};
pub use report::{format_mean_std, mean_std, report_runs, round_decimal, RunReport, SeedRun, Summary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::{cross_entropy, Param, Parameters, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(
        "training diverged at epoch {epoch}, batch {batch}: loss_main={loss_main}, loss_aux={loss_aux:?}, lr={lr}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss_main: f64,
        loss_aux: Option<f64>,
        lr: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Smallest and largest fixed weight on the auxiliary loss.
pub const ALPHA_RANGE: (f64, f64) = (0.1, 5.0);

/// How the two task losses are combined.
///
/// `MainOnly` and `AuxOnly` drop one task from the objective entirely; the
/// dropped task's exclusive parameters then receive no gradient at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum LossMode {
    /// `L = L_main + alpha * L_aux`
    Fixed(f64),
    /// `L = exp(-s_m) L_main + exp(-s_a) L_aux + (s_m + s_a) / 2`
    Learnable,
    MainOnly,
    AuxOnly,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Fixed(1.0)
    }
}

impl LossMode {
    pub fn validate(&self) -> Result<(), TrainError> {
        if let LossMode::Fixed(a) = *self {
            let (lo, hi) = ALPHA_RANGE;
            if !(lo..=hi).contains(&a) {
                return Err(TrainError::Config(format!(
                    "alpha = {a} is outside [{lo},{hi}]; use \"main_only\" or \"aux_only\" to drop a task"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Keyword(AlphaKeyword),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AlphaKeyword {
    Learnable,
    MainOnly,
    AuxOnly,
}

impl TryFrom<AlphaRepr> for LossMode {
    type Error = String;

    fn try_from(r: AlphaRepr) -> Result<Self, String> {
        Ok(match r {
            AlphaRepr::Number(a) if a.is_finite() => LossMode::Fixed(a),
            AlphaRepr::Number(a) => return Err(format!("alpha must be finite, got {a}")),
            AlphaRepr::Keyword(AlphaKeyword::Learnable) => LossMode::Learnable,
            AlphaRepr::Keyword(AlphaKeyword::MainOnly) => LossMode::MainOnly,
            AlphaRepr::Keyword(AlphaKeyword::AuxOnly) => LossMode::AuxOnly,
        })
    }
}

impl From<LossMode> for AlphaRepr {
    fn from(m: LossMode) -> Self {
        match m {
            LossMode::Fixed(a) => AlphaRepr::Number(a),
            LossMode::Learnable => AlphaRepr::Keyword(AlphaKeyword::Learnable),
            LossMode::MainOnly => AlphaRepr::Keyword(AlphaKeyword::MainOnly),
            LossMode::AuxOnly => AlphaRepr::Keyword(AlphaKeyword::AuxOnly),
        }
    }
}

/// Log-precision scalars of the learnable weighting, both starting at 0.
#[derive(Debug, Clone)]
pub struct LossWeights<T> {
    pub s_main: Param<T>,
    pub s_aux: Param<T>,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            s_main: Param::zeros(&[1]),
            s_aux: Param::zeros(&[1]),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn values(&self) -> (f64, f64) {
        (
            self.s_main.value.data()[0].as_f64(),
            self.s_aux.value.data()[0].as_f64(),
        )
    }

    /// `exp(s_m - s_a)`, the weight on the auxiliary loss relative to the
    /// main loss.
    pub fn alpha_eff(&self) -> f64 {
        let (m, a) = self.values();
        (m - a).exp()
    }
}

impl<T: Real> Parameters<T> for LossWeights<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((crate::tensor::join(prefix, "s_main"), &mut self.s_main));
        out.push((crate::tensor::join(prefix, "s_aux"), &mut self.s_aux));
    }
}

/// Value, decomposition and logit gradients of the joint objective.
#[derive(Debug, Clone)]
pub struct JointLoss<T> {
    pub total: f64,
    pub main: f64,
    pub aux: Option<f64>,
    /// Weight on the auxiliary loss relative to the main loss.
    pub alpha_eff: Option<f64>,
    pub g_main: Option<Tensor<T>>,
    pub g_aux: Option<Tensor<T>>,
}

/// Joint cross-entropy objective. Without auxiliary logits the result is
/// the main loss alone, whatever the mode. In learnable mode the gradients
/// w.r.t. `s_m` and `s_a` are accumulated into `weights`.
pub fn joint_loss<T: Real>(
    z_main: &Tensor<T>,
    y_main: &[usize],
    aux: Option<(&Tensor<T>, &[usize])>,
    mode: LossMode,
    weights: Option<&mut LossWeights<T>>,
) -> Result<JointLoss<T>, TrainError> {
    mode.validate()?;
    let ce_m = cross_entropy(z_main, y_main)?;
    let lm = ce_m.loss.as_f64();
    let Some((z_aux, y_aux)) = aux else {
        return Ok(JointLoss {
            total: lm,
            main: lm,
            aux: None,
            alpha_eff: None,
            g_main: Some(ce_m.grad),
            g_aux: None,
        });
    };
    let ce_a = cross_entropy(z_aux, y_aux)?;
    let la = ce_a.loss.as_f64();
    let (total, alpha_eff, g_main, g_aux) = match mode {
        LossMode::Fixed(a) => (lm + a * la, Some(a), Some(ce_m.grad), Some(ce_a.grad.scale(T::cast(a)))),
        LossMode::MainOnly => (lm, Some(0.0), Some(ce_m.grad), None),
        LossMode::AuxOnly => (la, None, None, Some(ce_a.grad)),
        LossMode::Learnable => {
            let w = weights.ok_or_else(|| TrainError::Config("learnable alpha needs loss weights".into()))?;
            let (sm, sa) = w.values();
            let (pm, pa) = ((-sm).exp(), (-sa).exp());
            w.s_main.grad_mut()[0] += T::cast(0.5 - pm * lm);
            w.s_aux.grad_mut()[0] += T::cast(0.5 - pa * la);
            (
                pm * lm + pa * la + 0.5 * (sm + sa),
                Some((sm - sa).exp()),
                Some(ce_m.grad.scale(T::cast(pm))),
                Some(ce_a.grad.scale(T::cast(pa))),
            )
        }
    };
    Ok(JointLoss {
        total,
        main: lm,
        aux: Some(la),
        alpha_eff,
        g_main,
        g_aux,
    })
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: LossMode,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub augment: bool,
    pub lmr: LmrConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: LossMode::default(),
            lr_max: 5e-4,
            weight_decay: 1e-5,
            epochs: 200,
            warmup_epochs: 5.0,
            batch_size: 16,
            seeds: vec![42, 123],
            augment: false,
            lmr: LmrConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            selection: Selection::BestVal,
        }
    }
}

impl TrainConfig {
    /// Short CPU-scale schedule.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        self.alpha.validate()?;
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return err(format!("lr_max must be finite and >= 0, got {}", self.lr_max));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return err(format!("warmup_epochs must lie in [0, {}]", self.epochs));
        }
        if self.batch_size < 2 {
            return err("batch_size must be at least 2 for batch norm".into());
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return err("betas must lie in [0,1) and eps must be positive".into());
        }
        self.lmr.validate()
    }
}
