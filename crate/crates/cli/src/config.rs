// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file, every block optional, defaults match
//! the published hyperparameters where they exist.

use std::path::{Path, PathBuf};

use anyhow::Context;
use featlab::decomp::DecompKind;
use featlab::interp::InterpreterConfig;
use featlab::sae::SaeTrainConfig;
use featlab::toylm::{CaptureSite, ModelConfig, Position, TrainConfig};
use featlab::units::MaxScope;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub paths: Paths,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub capture: CaptureBlock,
    pub sae: SaeBlock,
    pub decomp: DecompBlock,
    pub attribution: AttributionBlock,
    pub edit: EditBlock,
    pub eval: EvalBlock,
    pub interpreter: InterpreterBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            paths: Paths::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            model: ModelBlock::default(),
            train: TrainBlock::default(),
            capture: CaptureBlock::default(),
            sae: SaeBlock::default(),
            decomp: DecompBlock::default(),
            attribution: AttributionBlock::default(),
            edit: EditBlock::default(),
            eval: EvalBlock::default(),
            interpreter: InterpreterBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Every experiment lives in `root/<experiment>/`.
    pub root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { root: "runs".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub privacy: u64,
    pub probes: u64,
    pub model: u64,
    pub train: u64,
    pub sae: u64,
    pub decomp: u64,
    pub split: u64,
    pub bootstrap: u64,
    pub mixture: u64,
    pub interp: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 7,
            privacy: 11,
            probes: 13,
            model: 7,
            train: 7,
            sae: 0,
            decomp: 0,
            split: 0,
            bootstrap: 0,
            mixture: 0,
            interp: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub facts_per_relation: usize,
    /// Size of the written privacy corpus.
    pub privacy_per_relation: usize,
    /// Privacy facts per relation actually fine-tuned and erased.
    pub privacy_subset_per_relation: usize,
    /// Untrained fact prompts used as mixture pools.
    pub probes_per_relation: usize,
    pub privacy_train_templates: Vec<usize>,
    pub privacy_eval_templates: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            facts_per_relation: 20,
            privacy_per_relation: 500,
            privacy_subset_per_relation: 20,
            probes_per_relation: 160,
            privacy_train_templates: vec![0, 1, 2],
            privacy_eval_templates: vec![3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let c = ModelConfig::new(1, 0);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_mlp: c.d_mlp,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl ModelBlock {
    pub fn to_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub finetune_epochs: usize,
    pub finetune_lr_divisor: f32,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            finetune_epochs: 80,
            finetune_lr_divisor: 10.0,
        }
    }
}

impl TrainBlock {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        }
    }

    pub fn to_finetune(&self, seed: u64) -> TrainConfig {
        let mut c = featlab::toylm::finetune_config(&self.to_config(seed), self.finetune_epochs);
        c.lr = self.lr / self.finetune_lr_divisor;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureBlock {
    pub site: CaptureSite,
    pub layers: Vec<usize>,
    pub position: Position,
}

impl Default for CaptureBlock {
    fn default() -> Self {
        Self {
            site: CaptureSite::MlpActivation,
            layers: vec![0, 1, 2, 3],
            position: Position::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeBlock {
    pub lambda: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub n_multiplier: usize,
    pub ste_bandwidth: f32,
    pub theta_init: f32,
    pub val_fraction: f64,
    pub tied: bool,
}

impl Default for SaeBlock {
    fn default() -> Self {
        let s = SaeTrainConfig::default();
        Self {
            lambda: s.lambda,
            lr: s.lr,
            batch_size: s.batch_size,
            epochs: s.epochs,
            patience: s.patience,
            n_multiplier: s.n_multiplier,
            ste_bandwidth: s.ste_bandwidth,
            theta_init: s.theta_init,
            val_fraction: s.val_fraction,
            tied: s.tied,
        }
    }
}

impl SaeBlock {
    pub fn to_config(&self, seed: u64) -> SaeTrainConfig {
        SaeTrainConfig {
            lambda: self.lambda,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            n_multiplier: self.n_multiplier,
            ste_bandwidth: self.ste_bandwidth,
            theta_init: self.theta_init,
            val_fraction: self.val_fraction,
            tied: self.tied,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompBlock {
    pub kinds: Vec<DecompKind>,
    pub pca_variance: f64,
    /// ICA component count; 0 means the input width.
    pub ica_components: usize,
}

impl Default for DecompBlock {
    fn default() -> Self {
        Self {
            kinds: vec![DecompKind::Pca, DecompKind::Ica, DecompKind::Rd],
            pca_variance: 0.99,
            ica_components: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionBlock {
    pub steps: usize,
    pub tau: f64,
}

impl Default for AttributionBlock {
    fn default() -> Self {
        Self {
            steps: 20,
            tau: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditBlock {
    pub tau1: f64,
    pub tau2: f64,
    /// Whether τ1 is relative to each prompt's maximum or the maximum over
    /// the erased fact's training prompts.
    pub scope: MaxScope,
    /// Privacy facts erased, each by its own edit; 0 means all of them.
    pub max_facts: usize,
}

impl Default for EditBlock {
    fn default() -> Self {
        Self {
            tau1: 0.3,
            tau2: 0.1,
            scope: MaxScope::PerInput,
            max_facts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub tau1: f64,
    pub max_k: usize,
    pub bootstrap_iterations: usize,
    pub bootstrap_size: usize,
    /// Facts used for ablation comparisons (one prompt each).
    pub ablation_facts: usize,
    pub mixture_relations: Vec<String>,
    pub mixture_proportions: Vec<u32>,
    pub mixture_total: usize,
    /// Pure relation prompts used to freeze the relation units.
    pub mixture_selection: usize,
    pub stability_n: Vec<usize>,
    /// Layers whose SAEs are retrained at every width; must be captured.
    pub stability_layers: Vec<usize>,
    pub stability_facts: usize,
    /// Features and neurons scored by `interpret`, each.
    pub interpret_units: usize,
    /// Fact prompts offered as samples; 0 means all of them.
    pub interpret_samples: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        let mix = featlab::eval::MixtureConfig::default();
        Self {
            tau1: 0.3,
            max_k: 10,
            bootstrap_iterations: 5,
            bootstrap_size: 300,
            ablation_facts: 200,
            mixture_relations: mix.relations,
            mixture_proportions: mix.proportions,
            mixture_total: mix.total,
            mixture_selection: 100,
            stability_n: vec![1, 2, 4, 8],
            stability_layers: vec![2],
            stability_facts: 50,
            interpret_units: 5,
            interpret_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpreterKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpreterBlock {
    pub kind: InterpreterKind,
    /// Serve remote requests only from the replay cache.
    pub offline: bool,
    pub remote: InterpreterConfig,
}

impl Default for InterpreterBlock {
    fn default() -> Self {
        Self {
            kind: InterpreterKind::Mock,
            offline: false,
            remote: InterpreterConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |m: String| anyhow::Error::new(ConfigError(m));
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) || self.experiment.starts_with('.') {
            return Err(bad(format!("experiment id `{}` is not a plain directory name", self.experiment)));
        }
        self.model
            .to_config(4, 0)
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        self.train.to_config(0).validate().map_err(|e| bad(e.to_string()))?;
        self.sae.to_config(0).validate().map_err(|e| bad(e.to_string()))?;
        if self.data.facts_per_relation == 0 || self.data.privacy_subset_per_relation == 0 {
            return Err(bad("fact counts must be positive".into()));
        }
        if self.data.privacy_subset_per_relation > self.data.privacy_per_relation {
            return Err(bad("privacy subset exceeds the privacy corpus".into()));
        }
        if self.capture.layers.iter().any(|&l| l >= self.model.n_layers) || self.capture.layers.is_empty() {
            return Err(bad(format!("capture layers {:?} invalid for {} layers", self.capture.layers, self.model.n_layers)));
        }
        for (name, t) in [("edit.tau1", self.edit.tau1), ("eval.tau1", self.eval.tau1), ("attribution.tau", self.attribution.tau)] {
            featlab::units::check_tau(t).map_err(|e| bad(format!("{name}: {e}")))?;
        }
        if !(self.edit.tau2 > 0.0) {
            return Err(bad("edit.tau2 must be positive".into()));
        }
        if self.eval.stability_n.is_empty() || self.eval.stability_n.contains(&0) {
            return Err(bad("stability multipliers must be at least 1".into()));
        }
        if self.eval.stability_layers.is_empty() || self.eval.stability_layers.iter().any(|l| !self.capture.layers.contains(l)) {
            return Err(bad(format!("stability layers {:?} must be captured layers", self.eval.stability_layers)));
        }
        if self.eval.interpret_samples != 0 && self.eval.interpret_samples < featlab::eval::IS_MIN_SAMPLES {
            return Err(bad(format!("interpret_samples must be 0 or at least {}", featlab::eval::IS_MIN_SAMPLES)));
        }
        self.mixture().validate().map_err(|e| bad(e.to_string()))?;
        if self.interpreter.kind == InterpreterKind::Remote {
            self.interpreter.remote.validate().map_err(|e| bad(e.to_string()))?;
            if self.interpreter.offline {
                match &self.interpreter.remote.cache_path {
                    Some(p) if p.exists() => {}
                    Some(p) => return Err(bad(format!("offline interpreter cache {} does not exist", p.display()))),
                    None => return Err(bad("offline interpreter needs remote.cache_path".into())),
                }
            }
        }
        Ok(())
    }

    pub fn mixture(&self) -> featlab::eval::MixtureConfig {
        featlab::eval::MixtureConfig {
            relations: self.eval.mixture_relations.clone(),
            proportions: self.eval.mixture_proportions.clone(),
            total: self.eval.mixture_total,
            seed: self.seeds.mixture,
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    /// SHA-256 of the canonical TOML rendering, leaving out `paths` so a
    /// moved run directory keeps its hash.
    pub fn hash(&self) -> anyhow::Result<String> {
        let canonical = RunConfig {
            paths: Paths::default(),
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.paths.root.join(&self.experiment)
    }
}
