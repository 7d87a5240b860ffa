use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::M3Model;
use crate::tensor::{Mode, Parameters, Real, Tensor};

use super::{
    evaluate, joint_loss, lmr_augment, lr_schedule, AdamW, LossMode, LossWeights, SampleSet, TrainConfig, TrainError,
};

/// Which epoch's weights the run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest validation main-task accuracy (training accuracy when there
    /// is no validation split); the earliest epoch wins ties.
    BestVal,
    Final,
}

/// One line of the metrics log. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_main: f64,
    pub loss_aux: Option<f64>,
    pub alpha_eff: Option<f64>,
    pub train_acc_main: f64,
    pub train_acc_aux: Option<f64>,
    pub val_acc_main: Option<f64>,
    pub val_acc_aux: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were loaded into the model.
    pub selected_epoch: usize,
    /// Learnable loss weights at the selected epoch.
    pub loss_weights: Option<LossWeights<T>>,
}

impl<T> TrainOutcome<T> {
    /// Ratio of the first epoch's loss to the lowest epoch loss.
    pub fn loss_drop(&self) -> f64 {
        let first = self.history.first().map_or(f64::NAN, |m| m.loss);
        let best = self.history.iter().map(|m| m.loss).fold(f64::INFINITY, f64::min);
        first / best
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains `model` in place. The run is a pure function of the model's
/// initial state, the data, `cfg` and `seed`. `on_epoch` sees each epoch's
/// metrics as soon as they are computed.
pub fn train<T: Real>(
    model: &mut M3Model<T>,
    train_set: &SampleSet,
    val_set: Option<&SampleSet>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(TrainError::Data(format!(
            "training split has {} samples; at least 2 are needed",
            train_set.len()
        )));
    }
    train_set.validate()?;
    if let Some(v) = val_set {
        if v.is_empty() {
            return Err(TrainError::Data("validation split is empty".into()));
        }
    }
    let has_aux = model.config().has_aux();
    let mut weights = (cfg.alpha == LossMode::Learnable && has_aux).then(LossWeights::<T>::default);
    let mut opt = AdamW::<T>::new(cfg.adamw());
    let mut shuffle_rng = stream(seed, 1);
    let mut lmr_rng = stream(seed, 2);
    let (h, w) = (train_set.height, train_set.width);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<(String, Tensor<T>)>, Option<LossWeights<T>>)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let nb = batches.len();
        let (mut sum, mut sum_main, mut sum_aux, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            lr = lr_schedule(
                epoch as f64 + (bi + 1) as f64 / nb as f64,
                cfg.lr_max,
                cfg.warmup_epochs,
                cfg.epochs as f64,
            );
            let mut batch = train_set.batch::<T>(idx);
            if cfg.augment {
                for x in batch.x.data_mut().chunks_mut(h * w) {
                    lmr_augment(x, h, w, &mut lmr_rng, &cfg.lmr)?;
                }
            }
            model.zero_grad();
            if let Some(lw) = weights.as_mut() {
                lw.zero_grad();
            }
            let out = model.forward(&batch.x, batch.s_main.as_ref(), batch.s_aux.as_ref(), Mode::Train)?;
            let aux = out.aux.as_ref().map(|z| (z, &batch.y_aux[..]));
            let jl = joint_loss(&out.main, &batch.y_main, aux, cfg.alpha, weights.as_mut())?;
            if !jl.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                    loss_main: jl.main,
                    loss_aux: jl.aux,
                    lr,
                });
            }
            model.backward(jl.g_main.as_ref(), jl.g_aux.as_ref())?;
            let mut params = Vec::new();
            model.visit_params("", &mut params);
            if let Some(lw) = weights.as_mut() {
                lw.visit_params("loss", &mut params);
            }
            opt.step(&mut params, lr)?;
            let n = idx.len() as f64;
            sum += jl.total * n;
            sum_main += jl.main * n;
            sum_aux += jl.aux.unwrap_or(0.0) * n;
            seen += idx.len();
        }
        model.clear_cache();

        let train_eval = evaluate(model, train_set, cfg.batch_size)?;
        let val_eval = val_set.map(|v| evaluate(model, v, cfg.batch_size)).transpose()?;
        let alpha_eff = match (cfg.alpha, &weights) {
            _ if !has_aux => None,
            (LossMode::Fixed(a), _) => Some(a),
            (LossMode::MainOnly, _) => Some(0.0),
            (LossMode::AuxOnly, _) => None,
            (LossMode::Learnable, Some(lw)) => Some(lw.alpha_eff()),
            (LossMode::Learnable, None) => None,
        };
        let seen = seen as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss: sum / seen,
            loss_main: sum_main / seen,
            loss_aux: has_aux.then_some(sum_aux / seen),
            alpha_eff,
            train_acc_main: train_eval.main_accuracy(),
            train_acc_aux: train_eval.aux_accuracy(),
            val_acc_main: val_eval.as_ref().map(|e| e.main_accuracy()),
            val_acc_aux: val_eval.as_ref().and_then(|e| e.aux_accuracy()),
        };
        on_epoch(&m);
        if cfg.selection == Selection::BestVal {
            let score = m.val_acc_main.unwrap_or(m.train_acc_main);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch + 1, model.state(), weights.clone()));
            }
        }
        history.push(m);
    }

    let (selected_epoch, loss_weights) = match best {
        Some((_, e, state, lw)) => {
            if e != cfg.epochs {
                model.load_state(&state)?;
            }
            (e, lw)
        }
        None => (cfg.epochs, weights),
    };
    Ok(TrainOutcome {
        history,
        selected_epoch,
        loss_weights,
    })
}
