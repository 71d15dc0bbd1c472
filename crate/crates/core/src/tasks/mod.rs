//! Task heads, training, and evaluation: classifier + binary cross-entropy
//! over patient embeddings, the evaluation metrics, the
//! persistent/emerging recall breakdown, ablation wiring, and a frequency
//! baseline.

pub mod baseline;
pub mod metrics;
mod train;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use baseline::FrequencyBaseline;
pub use train::{train, EpochStats, TrainedModel};

use crate::cograph::CoGraph;
use crate::dyngraph::{Mask, NeighborMode};
use crate::ehr::{Label, LabeledExample, Task, Visit};
use crate::num::{GradTape, Tensor};
use crate::transitions::{forward, ForwardOptions, ModelDims, ModelParams, PoolMode, Variant};
use crate::{Error, Result};

/// Fully connected head with a sigmoid: `d` outputs for diagnosis
/// prediction, one for heart failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierParams {
    pub fn init(pool_dim: usize, out_dim: usize, seed: u64) -> Self {
        ClassifierParams {
            w: crate::transitions::init_param(seed, "cls.w", &[pool_dim, out_dim], pool_dim),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.b.dim1().unwrap_or(0)
    }
}

/// Sigmoid classifier over a patient embedding.
pub fn predict(tape: &mut GradTape, o: &Tensor, cls: &ClassifierParams) -> Result<Tensor> {
    let raw = tape.vec_mat(o, &cls.w)?;
    let logits = tape.add(&raw, &cls.b)?;
    tape.sigmoid(&logits)
}

/// Model parameters plus task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub params: ModelParams,
    pub classifier: ClassifierParams,
}

impl TaskModel {
    /// Build and randomly initialize the wiring selected by the config's
    /// ablation flag and task.
    pub fn init(cfg: &TrainConfig, d: usize) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.ablation, &cfg.model_dims(d), cfg.seed)?;
        let out_dim = match cfg.task {
            Task::Diagnosis => d,
            Task::HeartFailure => 1,
        };
        let classifier = ClassifierParams::init(params.pool_dim(), out_dim, cfg.seed);
        Ok(TaskModel { params, classifier })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.params.named_tensors();
        out.push(("cls.w", &self.classifier.w));
        out.push(("cls.b", &self.classifier.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.params.tensors_mut();
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn map_tensors(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> TaskModel {
        let params = self.params.map_tensors(&mut f);
        TaskModel {
            params,
            classifier: ClassifierParams {
                w: f(&self.classifier.w),
                b: f(&self.classifier.b),
            },
        }
    }

    /// Probabilities for one example, outside any gradient tape.
    pub fn score_example(&self, features: &[Visit], graph: &CoGraph, opts: &ForwardOptions) -> Result<Vec<f64>> {
        let mut tape = GradTape::new();
        let o = forward(&mut tape, features, graph, &self.params, opts)?;
        let probs = predict(&mut tape, &o, &self.classifier)?;
        Ok(probs.data().to_vec())
    }
}

/// Training configuration: optimizer settings, model dimensions, task and
/// ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub ablation: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Co-occurrence threshold used when building the graph.
    pub delta: f64,
    pub s: usize,
    pub s_prime: usize,
    pub attn: usize,
    pub hidden: usize,
    pub neighbor_mode: NeighborMode,
    pub pool: PoolMode,
    /// `k` values evaluated for recall@k.
    pub eval_k: Vec<usize>,
    /// Decision threshold for F1-style metrics.
    pub f1_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Task::Diagnosis)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: small dimensions that train in seconds to
    /// minutes on a laptop.
    pub fn desk(task: Task) -> Self {
        TrainConfig {
            task,
            ablation: Variant::Full,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
            delta: crate::cograph::DEFAULT_DELTA,
            s: 16,
            s_prime: 12,
            attn: 8,
            hidden: 32,
            neighbor_mode: NeighborMode::Union,
            pool: PoolMode::Masked,
            eval_k: vec![10, 20],
            f1_threshold: 0.5,
        }
    }

    /// The published full-scale hyperparameters (diagnosis task sizing).
    pub fn paper(task: Task) -> Self {
        TrainConfig {
            epochs: 200,
            s: 48,
            s_prime: 32,
            attn: 32,
            hidden: 256,
            ..Self::desk(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.s == 0 || self.s_prime == 0 || self.attn == 0 || self.hidden == 0 {
            return Err(Error::config("model dimensions must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("delta must be in [0, 1]"));
        }
        if !(0.0 < self.f1_threshold && self.f1_threshold < 1.0) {
            return Err(Error::config("f1_threshold must be in (0, 1)"));
        }
        if self.eval_k.iter().any(|&k| k == 0) {
            return Err(Error::config("eval_k entries must be >= 1"));
        }
        Ok(())
    }

    pub fn model_dims(&self, d: usize) -> ModelDims {
        ModelDims {
            d,
            s: self.s,
            s_prime: self.s_prime,
            attn: self.attn,
            hidden: self.hidden,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            neighbor_mode: self.neighbor_mode,
            pool: self.pool,
        }
    }
}

/// Metric values as fractions in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub r_at: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

/// Recall broken down by persistent vs. emerging ground-truth codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBreakdown {
    pub persistent: MetricValues,
    pub emerging: MetricValues,
}

/// Evaluation outcome of one model on one example set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub seed: u64,
    pub ablation: Variant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub metrics: MetricValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitBreakdown>,
}

/// Score a diagnosis example set: per-example probabilities, label sets,
/// and the last-feature-visit diagnosis masks used by the recall split.
pub fn diagnosis_scores(
    model: &TaskModel,
    examples: &[LabeledExample],
    graph: &CoGraph,
    opts: &ForwardOptions,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<Mask>)> {
    let d = graph.d();
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut prev = Vec::with_capacity(examples.len());
    for example in examples {
        let label = example
            .diagnosis_label()
            .ok_or_else(|| Error::config("diagnosis evaluation on a non-diagnosis example"))?;
        scores.push(model.score_example(&example.features, graph, opts)?);
        labels.push(label.codes().to_vec());
        prev.push(Mask::from_visit(example.features.last().expect("nonempty features"), d));
    }
    Ok((scores, labels, prev))
}

/// Label sets and prior-visit masks paired with externally computed scores
/// (used to evaluate non-model scorers like the frequency baseline).
pub fn diagnosis_targets(examples: &[LabeledExample], d: usize) -> Result<(Vec<Vec<usize>>, Vec<Mask>)> {
    let mut labels = Vec::with_capacity(examples.len());
    let mut prev = Vec::with_capacity(examples.len());
    for example in examples {
        let label = example
            .diagnosis_label()
            .ok_or_else(|| Error::config("diagnosis evaluation on a non-diagnosis example"))?;
        labels.push(label.codes().to_vec());
        prev.push(Mask::from_visit(example.features.last().expect("nonempty features"), d));
    }
    Ok((labels, prev))
}

/// Evaluate a trained model on an example set, producing the full report.
pub fn evaluate(
    examples: &[LabeledExample],
    model: &TaskModel,
    graph: &CoGraph,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let opts = cfg.forward_options();
    let mut metrics = MetricValues::default();
    let mut split = None;
    match cfg.task {
        Task::Diagnosis => {
            let (scores, labels, prev) = diagnosis_scores(model, examples, graph, &opts)?;
            metrics.w_f1 = Some(metrics::weighted_f1(&scores, &labels, graph.d(), cfg.f1_threshold)?);
            let mut persistent = MetricValues::default();
            let mut emerging = MetricValues::default();
            for &k in &cfg.eval_k {
                metrics.r_at.insert(k, metrics::recall_at_k(&scores, &labels, k)?);
                let (p, e) = metrics::recall_split(&scores, &labels, &prev, k)?;
                persistent.r_at.insert(k, p);
                emerging.r_at.insert(k, e);
            }
            split = Some(SplitBreakdown { persistent, emerging });
        }
        Task::HeartFailure => {
            let mut scores = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for example in examples {
                let Label::HeartFailure(positive) = example.label else {
                    return Err(Error::config("heart-failure evaluation on a non-binary example"));
                };
                let probs = model.score_example(&example.features, graph, &opts)?;
                scores.push(probs[0]);
                labels.push(positive);
            }
            metrics.auc = Some(metrics::auc_roc(&scores, &labels)?);
            metrics.f1 = Some(metrics::f1_binary(&scores, &labels, cfg.f1_threshold));
        }
    }
    Ok(EvalReport {
        task: cfg.task,
        seed: cfg.seed,
        ablation: cfg.ablation,
        config_hash: None,
        metrics,
        split,
    })
}

/// Maximum relative disagreement between analytic gradients of the full
/// forward-plus-loss pipeline and central finite differences, over every
/// parameter of the model the config wires up.
pub fn gradient_check(
    cfg: &TrainConfig,
    graph: &CoGraph,
    example: &LabeledExample,
    h: f64,
) -> Result<f64> {
    let model = TaskModel::init(cfg, graph.d())?;
    let template = model.clone();
    let opts = cfg.forward_options();
    let label = label_tensor(example, graph.d());
    let params: Vec<Tensor> = model.named_tensors().iter().map(|(_, t)| (*t).detach()).collect();
    crate::num::finite_diff_check(
        move |tape, ps| {
            let mut it = ps.iter();
            let m = template.map_tensors(|_| it.next().expect("tensor count fixed").clone());
            let o = forward(tape, &example.features, graph, &m.params, &opts)?;
            let probs = predict(tape, &o, &m.classifier)?;
            tape.bce_loss(&probs, &label)
        },
        &params,
        h,
    )
}

/// Multi-hot / scalar label tensor for the loss.
pub(crate) fn label_tensor(example: &LabeledExample, d: usize) -> Tensor {
    match &example.label {
        Label::Diagnosis(visit) => {
            let mut data = vec![0.0; d];
            for &c in visit.codes() {
                data[c] = 1.0;
            }
            Tensor::vector(data)
        }
        Label::HeartFailure(positive) => Tensor::vector(vec![if *positive { 1.0 } else { 0.0 }]),
    }
}
