//! Report files: the evaluation metrics plus the full resolved config,
//! training history, and provenance hash.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use sequela_core::tasks::{EpochStats, EvalReport};

use crate::config::RunConfig;

/// A complete run report as written to disk.
#[derive(Debug, Serialize)]
pub struct RunReport<'a> {
    #[serde(flatten)]
    pub eval: &'a EvalReport,
    pub best_epoch: usize,
    pub history: &'a [EpochStats],
    /// Full resolved configuration for reproducibility.
    pub config: &'a RunConfig,
}

impl RunReport<'_> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// One-screen summary of the headline metrics.
pub fn summarize(eval: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("task: {:?}, ablation: {:?}, seed: {}\n", eval.task, eval.ablation, eval.seed));
    if let Some(w) = eval.metrics.w_f1 {
        out.push_str(&format!("w-F1: {:.4}\n", w));
    }
    for (k, v) in &eval.metrics.r_at {
        out.push_str(&format!("R@{k}: {v:.4}\n"));
    }
    if let Some(auc) = eval.metrics.auc {
        out.push_str(&format!("AUC: {auc:.4}\n"));
    }
    if let Some(f1) = eval.metrics.f1 {
        out.push_str(&format!("F1: {f1:.4}\n"));
    }
    if let Some(split) = &eval.split {
        for (k, v) in &split.persistent.r_at {
            out.push_str(&format!(
                "R@{k} split: persistent {v:.4}, emerging {:.4}\n",
                split.emerging.r_at[k]
            ));
        }
    }
    out
}
