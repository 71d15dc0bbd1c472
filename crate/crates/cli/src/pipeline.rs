//! End-to-end training pipeline: split, graph construction from training
//! features, training, and test-set evaluation.

use anyhow::Result;

use sequela_core::cograph::{build_adjacency, count_cooccurrence, CoGraph};
use sequela_core::ehr::{make_examples, split_dataset, Dataset, LabeledExample};
use sequela_core::tasks::{evaluate, train, EvalReport, TrainedModel};

use crate::config::RunConfig;

/// Everything produced by one training run.
pub struct TrainOutcome {
    pub graph: CoGraph,
    pub trained: TrainedModel,
    /// Test-set evaluation with the config hash filled in.
    pub report: EvalReport,
    pub train_examples: Vec<LabeledExample>,
    pub val_examples: Vec<LabeledExample>,
    pub test_examples: Vec<LabeledExample>,
}

/// Split the dataset, build the co-occurrence graph from the training
/// split's feature visits only, train, and evaluate on the test split.
pub fn run_training(ds: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    let counts = cfg.split.resolve(ds.len())?;
    let [train_ds, val_ds, test_ds] = split_dataset(ds, counts, cfg.split.seed)?;
    let train_examples = make_examples(&train_ds, cfg.train.task);
    let val_examples = make_examples(&val_ds, cfg.train.task);
    let test_examples = make_examples(&test_ds, cfg.train.task);

    let freq = count_cooccurrence(
        train_examples.iter().flat_map(|e| e.features.iter()),
        ds.d(),
    );
    let graph = build_adjacency(&freq, cfg.train.delta)?;

    let trained = train(&train_examples, &val_examples, &graph, &cfg.train)?;
    let mut report = evaluate(&test_examples, &trained.model, &graph, &cfg.train)?;
    report.config_hash = Some(cfg.hash());
    Ok(TrainOutcome {
        graph,
        trained,
        report,
        train_examples,
        val_examples,
        test_examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sequela_core::ehr::Task;
    use sequela_core::synthgen::{self, SynthConfig};
    use sequela_core::tasks::TrainConfig;

    fn small_run_config() -> RunConfig {
        RunConfig {
            synth: SynthConfig {
                n_patients: 60,
                d: 30,
                n_clusters: 3,
                codes_per_visit_mean: 5.0,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                s: 4,
                s_prime: 4,
                attn: 2,
                hidden: 6,
                eval_k: vec![5],
                ..TrainConfig::desk(Task::Diagnosis)
            },
            split: crate::config::SplitSpec::default(),
        }
    }

    #[test]
    fn pipeline_produces_a_complete_outcome() {
        let cfg = small_run_config();
        let ds = synthgen::generate(&cfg.synth).unwrap();
        let outcome = run_training(&ds, &cfg).unwrap();
        assert_eq!(outcome.train_examples.len(), 42);
        assert_eq!(outcome.val_examples.len(), 6);
        assert_eq!(outcome.test_examples.len(), 12);
        assert_eq!(outcome.trained.history.len(), 2);
        assert!(outcome.report.config_hash.is_some());
        assert!(outcome.report.metrics.r_at[&5] >= 0.0);
    }

    #[test]
    fn graph_depends_only_on_training_features() {
        let cfg = small_run_config();
        let ds = synthgen::generate(&cfg.synth).unwrap();
        let outcome = run_training(&ds, &cfg).unwrap();
        // Rebuilding the graph from the training examples alone (no
        // validation/test patients involved) reproduces it exactly.
        let freq = count_cooccurrence(
            outcome.train_examples.iter().flat_map(|e| e.features.iter()),
            ds.d(),
        );
        let rebuilt = build_adjacency(&freq, cfg.train.delta).unwrap();
        assert_eq!(outcome.graph, rebuilt);
        // The label visits of the training examples are excluded too:
        // counting them in changes the counts.
        let with_labels = count_cooccurrence(
            outcome
                .train_examples
                .iter()
                .flat_map(|e| e.features.iter())
                .chain(outcome.train_examples.iter().filter_map(|e| e.diagnosis_label())),
            ds.d(),
        );
        assert_ne!(freq, with_labels);
    }

    #[test]
    fn same_config_reproduces_the_report() {
        let cfg = small_run_config();
        let ds = synthgen::generate(&cfg.synth).unwrap();
        let a = run_training(&ds, &cfg).unwrap();
        let b = run_training(&ds, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        for (x, y) in a.trained.history.iter().zip(&b.trained.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }
}
