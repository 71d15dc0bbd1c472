//! Trained-model files: JSON carrying the resolved config, the vocabulary,
//! the training-split co-occurrence graph, and all parameters.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sequela_core::cograph::CoGraph;
use sequela_core::ehr::Dataset;
use sequela_core::tasks::TaskModel;

use crate::config::RunConfig;

const FORMAT: &str = "sequela-model/1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub run_config: RunConfig,
    pub best_epoch: usize,
    pub vocab: Vec<String>,
    pub graph_delta: f64,
    pub graph_edges: Vec<(usize, usize, f64)>,
    pub model: TaskModel,
}

impl ModelFile {
    pub fn new(run_config: RunConfig, best_epoch: usize, vocab: Vec<String>, graph: &CoGraph, model: TaskModel) -> Self {
        ModelFile {
            format: FORMAT.to_owned(),
            run_config,
            best_epoch,
            vocab,
            graph_delta: graph.delta(),
            graph_edges: graph.to_triples(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: ModelFile =
            serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))?;
        if file.format != FORMAT {
            bail!("unsupported model format {:?} (expected {FORMAT})", file.format);
        }
        Ok(file)
    }

    pub fn graph(&self) -> Result<CoGraph> {
        Ok(CoGraph::from_triples(self.vocab.len(), self.graph_delta, &self.graph_edges)?)
    }

    /// The model's code indexing must match the dataset exactly (same
    /// codes, same order); otherwise embeddings would silently refer to
    /// the wrong diseases.
    pub fn check_vocab(&self, ds: &Dataset) -> Result<()> {
        if ds.d() != self.vocab.len() {
            bail!(
                "vocabulary size mismatch: model has {} codes, dataset has {}",
                self.vocab.len(),
                ds.d()
            );
        }
        for (i, code) in self.vocab.iter().enumerate() {
            if ds.vocab().code(i) != code {
                bail!("vocabulary mismatch at index {i}: model {:?}, dataset {:?}", code, ds.vocab().code(i));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::run_training;
    use sequela_core::ehr::Task;
    use sequela_core::synthgen::{self, SynthConfig};
    use sequela_core::tasks::TrainConfig;

    #[test]
    fn model_roundtrips_through_disk() {
        let cfg = RunConfig {
            synth: SynthConfig {
                n_patients: 40,
                d: 20,
                n_clusters: 2,
                codes_per_visit_mean: 4.0,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                s: 3,
                s_prime: 3,
                attn: 2,
                hidden: 4,
                eval_k: vec![3],
                ..TrainConfig::desk(Task::Diagnosis)
            },
            split: crate::config::SplitSpec::default(),
        };
        let ds = synthgen::generate(&cfg.synth).unwrap();
        let outcome = run_training(&ds, &cfg).unwrap();
        let vocab: Vec<String> = ds.vocab().iter().map(str::to_owned).collect();
        let file = ModelFile::new(
            cfg.clone(),
            outcome.trained.best_epoch,
            vocab,
            &outcome.graph,
            outcome.trained.model.clone(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path).unwrap();
        assert_eq!(loaded.model, outcome.trained.model);
        assert_eq!(loaded.graph().unwrap(), outcome.graph);
        loaded.check_vocab(&ds).unwrap();

        // A dataset with different codes must be rejected.
        let other = synthgen::generate(&SynthConfig {
            d: 21,
            n_patients: 40,
            n_clusters: 3,
            codes_per_visit_mean: 4.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(loaded.check_vocab(&other).is_err());
    }
}
