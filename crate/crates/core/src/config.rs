//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchgen::{generate, load_dataset, BenchSpec, TaskSplit};
use crate::error::{Error, Result};
use crate::grad::{GradCheckCase, DEFAULT_FD_STEP};
use crate::nullspace::ProjectorFlags;
use crate::ssm::ModelDims;
use crate::trainer::TrainConfig;

/// Model dimensions; `d_raw` and `d_delta` default to the data width and
/// `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_raw: Option<usize>,
    pub d_model: usize,
    pub d_state: usize,
    pub d_delta: Option<usize>,
    pub d_out: usize,
    pub n_blocks: usize,
    pub gated: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            d_raw: None,
            d_model: d.d_model,
            d_state: d.d_state,
            d_delta: None,
            d_out: d.d_out,
            n_blocks: d.n_blocks,
            gated: d.gated,
        }
    }
}

impl ModelSection {
    pub fn dims(&self, data_d_raw: usize) -> ModelDims {
        ModelDims {
            d_raw: self.d_raw.unwrap_or(data_d_raw),
            d_model: self.d_model,
            d_state: self.d_state,
            d_delta: self.d_delta.unwrap_or(self.d_model),
            d_out: self.d_out,
            n_blocks: self.n_blocks,
            gated: self.gated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory for every file a command writes; `--out` overrides it.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Each entry lists the projectors enabled in one run, e.g.
    /// `["h1_delta", "h_out"]`; `[]` is the unprojected baseline.
    pub subsets: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub etas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.5, 0.85, 0.9, 0.95, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub seeds: Vec<u64>,
    pub d_raw: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub d_delta: Option<usize>,
    pub d_out: usize,
    pub n_blocks: usize,
    pub gated: bool,
    pub seq_len: usize,
    pub batch: usize,
    pub classes: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            d_raw: 5,
            d_model: 8,
            d_state: 4,
            d_delta: None,
            d_out: 6,
            n_blocks: 2,
            gated: false,
            seq_len: 6,
            batch: 3,
            classes: 4,
            step: DEFAULT_FD_STEP,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckSection {
    pub fn cases(&self) -> Result<Vec<GradCheckCase>> {
        if self.seeds.is_empty() {
            return Err(Error::config("grad_check.seeds is empty"));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::config("grad_check.step and grad_check.tolerance must be positive"));
        }
        if self.seq_len == 0 || self.batch == 0 || self.classes == 0 {
            return Err(Error::config("grad_check.seq_len, batch and classes must be at least 1"));
        }
        let dims = ModelDims {
            d_raw: self.d_raw,
            d_model: self.d_model,
            d_state: self.d_state,
            d_delta: self.d_delta.unwrap_or(self.d_model),
            d_out: self.d_out,
            n_blocks: self.n_blocks,
            gated: self.gated,
        };
        dims.validate()?;
        Ok(self
            .seeds
            .iter()
            .map(|&seed| GradCheckCase {
                seed,
                dims,
                seq_len: self.seq_len,
                batch: self.batch,
                classes: self.classes,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset file to train on; the `[bench]` spec is generated when absent.
    /// Relative paths resolve against the config file's directory.
    pub dataset: Option<PathBuf>,
    pub bench: BenchSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub output: OutputSection,
    pub ablate: AblateSection,
    pub sweep: SweepSection,
    pub grad_check: GradCheckSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads a config file; a relative `dataset` path is resolved next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(ds), Some(dir)) = (cfg.dataset.as_mut(), path.parent()) {
            if ds.is_relative() {
                *ds = dir.join(&*ds);
            }
        }
        Ok(cfg)
    }

    /// Overrides the training and benchmark seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.bench.seed = seed;
    }

    /// Loads or generates the task list.
    pub fn tasks(&self) -> Result<Vec<TaskSplit>> {
        match &self.dataset {
            Some(p) => load_dataset(p).map_err(|e| match e {
                Error::Io(io) => Error::config(format!("cannot read dataset {}: {io}", p.display())),
                other => other,
            }),
            None => generate(&self.bench),
        }
    }

    /// Training config with model dims filled in for data of width `d_raw`.
    pub fn train_config(&self, data_d_raw: usize) -> Result<TrainConfig> {
        let mut t = self.train;
        t.dims = self.model.dims(data_d_raw);
        if t.dims.d_raw != data_d_raw {
            return Err(Error::config(format!(
                "model.d_raw = {} but the data has {data_d_raw} features per token",
                t.dims.d_raw
            )));
        }
        t.validate()?;
        Ok(t)
    }

    pub fn ablation_flags(&self) -> Result<Vec<ProjectorFlags>> {
        if self.ablate.subsets.is_empty() {
            return Err(Error::config("ablate.subsets is empty"));
        }
        self.ablate
            .subsets
            .iter()
            .map(|s| ProjectorFlags::from_names(s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        let t = c.train_config(32).unwrap();
        assert_eq!(t.dims, ModelDims::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in ["bogus = 1", "[train]\nlearning_rate = 0.1", "[bench]\nseeed = 2", "[model]\nwidth = 3"] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            let key = text.rsplit('\n').next().unwrap().split(' ').next().unwrap();
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml_str(
            r#"
            [bench]
            tasks = 2
            d_raw = 6
            [model]
            d_model = 8
            d_delta = 1
            [train]
            eta = 0.9
            optimizer = "adaptive"
            flags = { h1_delta = true, h1_c = false, h2 = false, h3 = true, h_out = true }
            [ablate]
            subsets = [[], ["h1_delta", "h_out"]]
            "#,
        )
        .unwrap();
        assert_eq!(c.bench.tasks, 2);
        let t = c.train_config(6).unwrap();
        assert_eq!((t.dims.d_raw, t.dims.d_model, t.dims.d_delta), (6, 8, 1));
        assert_eq!(t.eta, 0.9);
        let flags = c.ablation_flags().unwrap();
        assert!(!flags[0].any());
        assert_eq!(flags[1].names(), vec!["h1_delta", "h_out"]);
    }

    #[test]
    fn semantic_errors() {
        let c = RunConfig::from_toml_str("[model]\nd_raw = 4").unwrap();
        assert!(c.train_config(32).is_err());
        let c = RunConfig::from_toml_str("[train]\neta = 2.0").unwrap();
        assert!(c.train_config(32).is_err());
        assert!(RunConfig::default().ablation_flags().is_err());
    }
}
