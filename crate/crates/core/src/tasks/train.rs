//! Seeded training loop: per-example forward/loss/backward with gradient
//! accumulation over mini-batches and Adam updates.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{label_tensor, metrics, predict, TaskModel, TrainConfig};
use crate::cograph::CoGraph;
use crate::ehr::{Label, LabeledExample, Task};
use crate::num::{Adam, GradTape};
use crate::transitions::forward;
use crate::{Error, Result};

/// Loss and validation metric of one epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation w-F1 (diagnosis) or AUC (heart failure); absent when the
    /// validation set is empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

/// Outcome of a training run: the parameters from the best validation
/// epoch plus the full history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TaskModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn validation_metric(
    model: &TaskModel,
    val: &[LabeledExample],
    graph: &CoGraph,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let opts = cfg.forward_options();
    match cfg.task {
        Task::Diagnosis => {
            let (scores, labels, _) = super::diagnosis_scores(model, val, graph, &opts)?;
            Ok(Some(metrics::weighted_f1(&scores, &labels, graph.d(), cfg.f1_threshold)?))
        }
        Task::HeartFailure => {
            let mut scores = Vec::with_capacity(val.len());
            let mut labels = Vec::with_capacity(val.len());
            for example in val {
                let Label::HeartFailure(positive) = example.label else {
                    return Err(Error::config("heart-failure validation on a non-binary example"));
                };
                scores.push(model.score_example(&example.features, graph, &opts)?[0]);
                labels.push(positive);
            }
            Ok(Some(metrics::auc_roc(&scores, &labels)?))
        }
    }
}

/// Train a model on the given split.
///
/// Per epoch: a seeded shuffle of the training examples, one
/// forward/loss/backward per example, gradients averaged over each batch
/// before an Adam step. The returned parameters are from the epoch with
/// the best validation metric (ties favor the later epoch; without a
/// validation set, the final epoch). A non-finite loss aborts with a
/// divergence error carrying the last finite loss.
pub fn train(
    train_set: &[LabeledExample],
    val_set: &[LabeledExample],
    graph: &CoGraph,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let d = graph.d();
    let opts = cfg.forward_options();
    let mut model = TaskModel::init(cfg, d)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let labels: Vec<_> = train_set.iter().map(|e| label_tensor(e, d)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let param_count = model.named_tensors().len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut last_finite_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        let mut grad_acc: Vec<Vec<f64>> = Vec::with_capacity(param_count);
        for (_, t) in model.named_tensors() {
            grad_acc.push(vec![0.0; t.numel()]);
        }
        let mut in_batch = 0usize;

        for (step, &i) in order.iter().enumerate() {
            let example = &train_set[i];
            let mut tape = GradTape::new();
            let watched = model.map_tensors(|t| tape.watch(t));
            let o = forward(&mut tape, &example.features, graph, &watched.params, &opts)?;
            let probs = predict(&mut tape, &o, &watched.classifier)?;
            let loss = tape.bce_loss(&probs, &labels[i])?;
            let loss_value = loss.scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch, last_loss: last_finite_loss });
            }
            last_finite_loss = loss_value;
            epoch_loss += loss_value;

            let store = tape.backward(&loss)?;
            for (acc, (_, wt)) in grad_acc.iter_mut().zip(watched.named_tensors()) {
                let grad = store.grad(wt)?;
                for (a, g) in acc.iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            in_batch += 1;

            if in_batch == cfg.batch_size || step + 1 == order.len() {
                let scale = 1.0 / in_batch as f64;
                for acc in grad_acc.iter_mut() {
                    for g in acc.iter_mut() {
                        *g *= scale;
                    }
                }
                {
                    let mut params = model.tensors_mut();
                    let grads: Vec<&[f64]> = grad_acc.iter().map(|g| g.as_slice()).collect();
                    adam.step(&mut params, &grads)?;
                }
                for acc in grad_acc.iter_mut() {
                    acc.iter_mut().for_each(|g| *g = 0.0);
                }
                in_batch = 0;
            }
        }

        let val_metric = validation_metric(&model, val_set, graph, cfg)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            val_metric,
        });

        // Ties favor the later (further-trained) epoch; with no validation
        // set every epoch "improves", i.e. the final model is kept.
        let comparable = val_metric.unwrap_or(0.0);
        if comparable >= best_metric {
            best_metric = comparable;
            best_epoch = epoch;
            best_model = model.clone();
        }
    }

    Ok(TrainedModel { model: best_model, history, best_epoch })
}
