//! Run configuration: a JSON file mirroring the generator and training
//! configs plus the patient split, with CLI flags layered on top. Unknown
//! keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sequela_core::synthgen::SynthConfig;
use sequela_core::tasks::TrainConfig;

/// Patient split sizes. Either all three counts are given or none are; in
/// the latter case roughly 70/10/20 percent of the dataset is used. The
/// split permutation has its own seed so several training seeds can share
/// one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: None, val: None, test: None, seed: 42 }
    }
}

impl SplitSpec {
    /// Concrete (train, val, test) counts for a dataset of `n` patients.
    pub fn resolve(&self, n: usize) -> Result<(usize, usize, usize)> {
        match (self.train, self.val, self.test) {
            (Some(tr), Some(va), Some(te)) => {
                if tr + va + te > n {
                    bail!("split {tr}+{va}+{te} exceeds {n} patients");
                }
                if tr == 0 {
                    bail!("training split must be nonempty");
                }
                Ok((tr, va, te))
            }
            (None, None, None) => {
                let te = n / 5;
                let va = n / 10;
                let tr = n - te - va;
                if tr == 0 {
                    bail!("dataset of {n} patients is too small to split");
                }
                Ok((tr, va, te))
            }
            _ => bail!("split must specify either all of train/val/test or none"),
        }
    }
}

/// Everything a run needs: generator settings, training settings, split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON serialization, recorded in
    /// reports for provenance.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
