//! Experiment configuration files.
//!
//! Configs are TOML: top-level keys plus `[dataset]`, `[theory]`, `[model]`,
//! `[schedule]` and `[pipeline]` tables. Unknown keys are rejected and every
//! invariant is checked before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convstack::{ConvStackSpec, LossKind};
use crate::distsim::ScheduleConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::{DatasetSource, DatasetSpec};
use crate::tensor::PatchSpec;
use crate::theory::{MaskMode, TheoryConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Theory,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineProtocol {
    Loft,
    LocalSgd,
    Dense,
}

impl PipelineProtocol {
    pub fn name(self) -> &'static str {
        match self {
            PipelineProtocol::Loft => "loft",
            PipelineProtocol::LocalSgd => "local_sgd",
            PipelineProtocol::Dense => "dense",
        }
    }
}

/// Grid for the theory suite. Scalars are shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub m: Vec<usize>,
    pub workers: Vec<usize>,
    pub q: usize,
    pub kappa: Option<f64>,
    pub xi: f64,
    pub eta_coeff: f64,
    pub iterations: usize,
    pub delta: f64,
    pub mask_mode: MaskMode,
    pub moment_trials: usize,
    /// Local iterations; the theory pathway supports only 1.
    pub ell: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            m: vec![256],
            workers: vec![4],
            q: 9,
            kappa: None,
            xi: 0.5,
            eta_coeff: 1.0,
            iterations: 200,
            delta: 0.1,
            mask_mode: MaskMode::Bernoulli,
            moment_trials: 100_000,
            ell: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Channel chain `[c_in, mid_1, out_1, mid_2, out_2, ...]`.
    pub channels: Vec<usize>,
    pub strided_blocks: Vec<usize>,
    pub loss: LossKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: vec![3, 8, 16, 16, 32],
            strided_blocks: Vec::new(),
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub workers: usize,
    pub ell: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub freeze_partition: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            workers: 2,
            ell: 25,
            batch_size: 16,
            eta: 0.1,
            freeze_partition: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub protocols: Vec<PipelineProtocol>,
    pub ratios: Vec<f64>,
    /// Synchronization rounds; one round counts as one pretraining epoch.
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_eta: f64,
    /// Restrict heatmaps to the top-(1 - ratio) prefix of each ranking, using
    /// the first ratio.
    pub heatmap_pruned: bool,
    /// Emit the analytic pipeline-parallel ledger.
    pub gpipe: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            protocols: vec![
                PipelineProtocol::Loft,
                PipelineProtocol::LocalSgd,
                PipelineProtocol::Dense,
            ],
            ratios: vec![0.3, 0.5, 0.8],
            pretrain_epochs: 20,
            finetune_epochs: 30,
            finetune_eta: 0.1,
            heatmap_pruned: false,
            gpipe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn stack_spec(&self) -> Result<ConvStackSpec> {
        ConvStackSpec::from_channels(
            &self.model.channels,
            &self.model.strided_blocks,
            self.dataset.height,
            self.dataset.width,
            self.dataset.num_classes,
            self.model.loss,
        )
    }

    pub fn schedule(&self, workers: usize, seed: u64) -> ScheduleConfig {
        ScheduleConfig {
            workers,
            rounds: self.pipeline.pretrain_epochs,
            ell: self.schedule.ell,
            batch_size: self.schedule.batch_size,
            eta: self.schedule.eta,
            seed,
            freeze_partition: self.schedule.freeze_partition,
        }
    }

    pub fn theory_config(&self, m: usize, workers: usize, seed: u64) -> TheoryConfig {
        let t = &self.theory;
        TheoryConfig {
            m,
            n: self.dataset.n,
            d_hat: self.dataset.d_hat,
            height: self.dataset.height,
            width: self.dataset.width,
            q: t.q,
            kappa: t.kappa,
            xi: t.xi,
            eta_coeff: t.eta_coeff,
            workers,
            iterations: t.iterations,
            delta: t.delta,
            label_bound: self.dataset.label_bound,
            mask_mode: t.mask_mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.dataset.validate()?;
        match self.mode {
            Mode::Theory => self.validate_theory(),
            Mode::System => self.validate_system(),
        }
    }

    fn validate_theory(&self) -> Result<()> {
        let t = &self.theory;
        if self.dataset.source != DatasetSource::SyntheticTheory {
            return Err(Error::Config(
                "theory mode needs dataset.source = \"synthetic_theory\"".into(),
            ));
        }
        if t.m.is_empty() || t.workers.is_empty() {
            return Err(Error::Config("theory.m and theory.workers must not be empty".into()));
        }
        if t.ell != 1 {
            return Err(Error::Config("theory.ell must be 1".into()));
        }
        PatchSpec::new(t.q).map_err(|_| Error::Config(format!("theory.q={} is not an odd square", t.q)))?;
        if t.moment_trials < 10_000 {
            return Err(Error::Config("theory.moment_trials must be at least 10000".into()));
        }
        for &m in &t.m {
            for &s in &t.workers {
                self.theory_config(m, s, 0).validate()?;
            }
        }
        Ok(())
    }

    fn validate_system(&self) -> Result<()> {
        let p = &self.pipeline;
        if self.dataset.source == DatasetSource::SyntheticTheory {
            return Err(Error::Config("system mode needs an image dataset".into()));
        }
        if p.protocols.is_empty() {
            return Err(Error::Config("pipeline.protocols must not be empty".into()));
        }
        if let Some(r) = p.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("pruning ratio outside [0,1): {r}")));
        }
        if p.pretrain_epochs == 0 {
            return Err(Error::Config("pipeline.pretrain_epochs must be at least 1".into()));
        }
        if !(p.finetune_eta >= 0.0) {
            return Err(Error::Config("pipeline.finetune_eta must be non-negative".into()));
        }
        let spec = self.stack_spec()?;
        if self.model.channels[0] != self.dataset.d_hat {
            return Err(Error::Config(format!(
                "model.channels[0]={} but the dataset has {} channels",
                self.model.channels[0], self.dataset.d_hat
            )));
        }
        if p.protocols.iter().any(|&pr| pr != PipelineProtocol::Dense) {
            spec.validate_workers(self.schedule.workers)?;
        }
        self.schedule(self.schedule.workers, 0).validate()?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}
