//! Pipeline configuration: flat dotted key-value text.
//!
//! One assignment per line (`tes.token_count = 7`), `#` comments, strict
//! key checking. Parsing collects every violation before reporting, and
//! every field has a default, so an empty config is a runnable desk-scale
//! pipeline. Section seeds left unset derive from the master `seed`
//! (dataset +0, split +1, encoder +2, tes +3, train +4, eval +5,
//! estimate +6).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::{OldClassPolicy, SyntheticDatasetSpec};
use crate::dual::DualTrainConfig;
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, TemperatureSet};
use crate::tes::TesTrainConfig;

/// Dataset source selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Margin-separated synthetic classes.
    Synthetic,
    /// Synthetic classes whose visual anchors coincide pairwise while
    /// text anchors stay separated.
    SyntheticPaired,
    /// Line-delimited manifest on disk.
    Manifest,
}

impl DatasetKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Self::Synthetic),
            "synthetic-paired" => Some(Self::SyntheticPaired),
            "manifest" => Some(Self::Manifest),
            _ => None,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::SyntheticPaired => "synthetic-paired",
            Self::Manifest => "manifest",
        }
    }
}

/// Encoder backend selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderBackend {
    /// Deterministic oracle built from the synthetic generator's anchors.
    Synthetic,
    /// Weight archive loaded from `encoder.weights`.
    Pretrained,
}

impl EncoderBackend {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Self::Synthetic),
            "pretrained" => Some(Self::Pretrained),
            _ => None,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Pretrained => "pretrained",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub manifest: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub class_margin: f64,
    pub view_noise: f64,
    /// Within-pair visual offset for the paired generator.
    pub pair_offset: f64,
    /// Paired generator: twin the second (new-class) half as well.
    pub pair_new: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SplitSection {
    pub old_class_count: usize,
    pub labeled_fraction: f64,
    pub policy: OldClassPolicy,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EncoderSection {
    pub backend: EncoderBackend,
    pub weights: Option<PathBuf>,
    pub backbone_dim: usize,
    pub joint_dim: usize,
    pub token_dim: usize,
    pub max_tokens: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TesSection {
    pub token_count: usize,
    pub tau_a: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub distill_include_positive: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct LossSection {
    pub lambda_balance: f64,
    pub lambda_cico: f64,
    pub epsilon: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub exclude_positive: bool,
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    pub projection_dim: usize,
    pub hidden_dim: usize,
    pub share_projector: bool,
    pub finetune_projector: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub use_cache_fast_path: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EstimateSection {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: Option<u64>,
}

/// The full pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub encoder: EncoderSection,
    pub tes: TesSection,
    pub loss: LossSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub estimate: EstimateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetSection {
                kind: DatasetKind::Synthetic,
                manifest: None,
                num_classes: 8,
                per_class: 20,
                visual_dim: 16,
                text_dim: 12,
                class_margin: 4.0,
                view_noise: 0.25,
                pair_offset: 0.35,
                pair_new: false,
                seed: None,
            },
            split: SplitSection {
                old_class_count: 4,
                labeled_fraction: 0.5,
                policy: OldClassPolicy::SeededRandom,
                seed: None,
            },
            encoder: EncoderSection {
                backend: EncoderBackend::Synthetic,
                weights: None,
                backbone_dim: 24,
                joint_dim: 16,
                token_dim: 12,
                max_tokens: 8,
                seed: None,
            },
            tes: TesSection {
                token_count: 7,
                tau_a: 0.01,
                epochs: 200,
                batch_size: 128,
                learning_rate: 0.1,
                momentum: 0.9,
                distill_include_positive: false,
                seed: None,
            },
            loss: LossSection {
                lambda_balance: 0.35,
                lambda_cico: 1.0,
                epsilon: 1.0,
                tau_c: 0.07,
                tau_s: 0.1,
                tau_t_start: 0.07,
                tau_t_end: 0.04,
                tau_t_warmup_epochs: 30,
                exclude_positive: false,
            },
            model: ModelSection {
                projection_dim: 256,
                hidden_dim: 256,
                share_projector: false,
                finetune_projector: false,
            },
            train: TrainSection {
                epochs: 200,
                batch_size: 128,
                learning_rate: 0.1,
                momentum: 0.9,
                use_cache_fast_path: false,
                seed: None,
            },
            eval: EvalSection { seed: None },
            estimate: EstimateSection {
                k_min: 4,
                k_max: 16,
                seed: None,
            },
        }
    }
}

impl PipelineConfig {
    // resolved section seeds
    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }
    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed.wrapping_add(1))
    }
    pub fn encoder_seed(&self) -> u64 {
        self.encoder.seed.unwrap_or(self.seed.wrapping_add(2))
    }
    pub fn tes_seed(&self) -> u64 {
        self.tes.seed.unwrap_or(self.seed.wrapping_add(3))
    }
    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed.wrapping_add(4))
    }
    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed.wrapping_add(5))
    }
    pub fn estimate_seed(&self) -> u64 {
        self.estimate.seed.unwrap_or(self.seed.wrapping_add(6))
    }

    pub fn synthetic_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: self.dataset.num_classes,
            per_class: self.dataset.per_class,
            visual_dim: self.dataset.visual_dim,
            text_dim: self.dataset.text_dim,
            class_margin: self.dataset.class_margin,
            view_noise: self.dataset.view_noise,
            seed: self.dataset_seed(),
        }
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            visual_dim: self.dataset.visual_dim,
            backbone_dim: self.encoder.backbone_dim,
            joint_dim: self.encoder.joint_dim,
            token_dim: self.encoder.token_dim,
            max_tokens: self.encoder.max_tokens,
        }
    }

    pub fn tes_train_config(&self) -> TesTrainConfig {
        TesTrainConfig {
            epochs: self.tes.epochs,
            batch_size: self.tes.batch_size,
            learning_rate: self.tes.learning_rate,
            momentum: self.tes.momentum,
            view_noise: self.dataset.view_noise,
            token_count: self.tes.token_count,
            tau_a: self.tes.tau_a,
            distill_include_positive: self.tes.distill_include_positive,
            seed: self.tes_seed(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_balance: self.loss.lambda_balance,
            lambda_cico: self.loss.lambda_cico,
            epsilon: self.loss.epsilon,
        }
    }

    pub fn temperatures(&self) -> TemperatureSet {
        TemperatureSet {
            tau_c: self.loss.tau_c,
            tau_s: self.loss.tau_s,
            tau_t_start: self.loss.tau_t_start,
            tau_t_end: self.loss.tau_t_end,
            tau_t_warmup_epochs: self.loss.tau_t_warmup_epochs,
        }
    }

    pub fn dual_train_config(&self) -> DualTrainConfig {
        DualTrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            view_noise: self.dataset.view_noise,
            weights: self.loss_weights(),
            temperatures: self.temperatures(),
            exclude_positive: self.loss.exclude_positive,
            projection_dim: self.model.projection_dim,
            hidden_dim: self.model.hidden_dim,
            share_projector: self.model.share_projector,
            finetune_projector: self.model.finetune_projector,
            use_cache_fast_path: self.train.use_cache_fast_path,
            seed: self.train_seed(),
        }
    }

    /// Loads and strictly validates a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses config text; collects all violations before failing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut problems: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                problems.push(format!("line {}: duplicate key {key:?}", lineno + 1));
                continue;
            }
            if let Err(msg) = config.apply(key, value) {
                problems.push(format!("line {}: {msg}", lineno + 1));
            }
        }
        problems.extend(config.check_ranges());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "dataset.kind" => {
                self.dataset.kind = DatasetKind::parse(value).ok_or(format!(
                    "dataset.kind: expected synthetic, synthetic-paired or manifest, got {value:?}"
                ))?
            }
            "dataset.manifest" => self.dataset.manifest = Some(PathBuf::from(value)),
            "dataset.num_classes" => self.dataset.num_classes = num(key, value)?,
            "dataset.per_class" => self.dataset.per_class = num(key, value)?,
            "dataset.visual_dim" => self.dataset.visual_dim = num(key, value)?,
            "dataset.text_dim" => self.dataset.text_dim = num(key, value)?,
            "dataset.class_margin" => self.dataset.class_margin = num(key, value)?,
            "dataset.view_noise" => self.dataset.view_noise = num(key, value)?,
            "dataset.pair_offset" => self.dataset.pair_offset = num(key, value)?,
            "dataset.pair_new" => self.dataset.pair_new = flag(key, value)?,
            "dataset.seed" => self.dataset.seed = Some(num(key, value)?),
            "split.old_class_count" => self.split.old_class_count = num(key, value)?,
            "split.labeled_fraction" => self.split.labeled_fraction = num(key, value)?,
            "split.policy" => {
                self.split.policy = match value {
                    "random" => OldClassPolicy::SeededRandom,
                    "first" => OldClassPolicy::FirstN,
                    _ => {
                        return Err(format!(
                            "split.policy: expected random or first, got {value:?}"
                        ))
                    }
                }
            }
            "split.seed" => self.split.seed = Some(num(key, value)?),
            "encoder.backend" => {
                self.encoder.backend = EncoderBackend::parse(value).ok_or(format!(
                    "encoder.backend: expected synthetic or pretrained, got {value:?}"
                ))?
            }
            "encoder.weights" => self.encoder.weights = Some(PathBuf::from(value)),
            "encoder.backbone_dim" => self.encoder.backbone_dim = num(key, value)?,
            "encoder.joint_dim" => self.encoder.joint_dim = num(key, value)?,
            "encoder.token_dim" => self.encoder.token_dim = num(key, value)?,
            "encoder.max_tokens" => self.encoder.max_tokens = num(key, value)?,
            "encoder.seed" => self.encoder.seed = Some(num(key, value)?),
            "tes.token_count" => self.tes.token_count = num(key, value)?,
            "tes.tau_a" => self.tes.tau_a = num(key, value)?,
            "tes.epochs" => self.tes.epochs = num(key, value)?,
            "tes.batch_size" => self.tes.batch_size = num(key, value)?,
            "tes.learning_rate" => self.tes.learning_rate = num(key, value)?,
            "tes.momentum" => self.tes.momentum = num(key, value)?,
            "tes.distill_include_positive" => self.tes.distill_include_positive = flag(key, value)?,
            "tes.seed" => self.tes.seed = Some(num(key, value)?),
            "loss.lambda_balance" => self.loss.lambda_balance = num(key, value)?,
            "loss.lambda_cico" => self.loss.lambda_cico = num(key, value)?,
            "loss.epsilon" => self.loss.epsilon = num(key, value)?,
            "loss.tau_c" => self.loss.tau_c = num(key, value)?,
            "loss.tau_s" => self.loss.tau_s = num(key, value)?,
            "loss.tau_t_start" => self.loss.tau_t_start = num(key, value)?,
            "loss.tau_t_end" => self.loss.tau_t_end = num(key, value)?,
            "loss.tau_t_warmup_epochs" => self.loss.tau_t_warmup_epochs = num(key, value)?,
            "loss.exclude_positive" => self.loss.exclude_positive = flag(key, value)?,
            "model.projection_dim" => self.model.projection_dim = num(key, value)?,
            "model.hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "model.share_projector" => self.model.share_projector = flag(key, value)?,
            "model.finetune_projector" => self.model.finetune_projector = flag(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.use_cache_fast_path" => self.train.use_cache_fast_path = flag(key, value)?,
            "train.seed" => self.train.seed = Some(num(key, value)?),
            "eval.seed" => self.eval.seed = Some(num(key, value)?),
            "estimate.k_min" => self.estimate.k_min = num(key, value)?,
            "estimate.k_max" => self.estimate.k_max = num(key, value)?,
            "estimate.seed" => self.estimate.seed = Some(num(key, value)?),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn check_ranges(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.dataset.kind == DatasetKind::Manifest && self.dataset.manifest.is_none() {
            problems.push("dataset.manifest is required for dataset.kind = manifest".into());
        }
        if self.dataset.kind != DatasetKind::Manifest && self.dataset.num_classes < 2 {
            problems.push("dataset.num_classes must be at least 2".into());
        }
        if self.dataset.kind == DatasetKind::SyntheticPaired
            && !self.dataset.num_classes.is_multiple_of(2)
        {
            problems.push("dataset.num_classes must be even for synthetic-paired".into());
        }
        if self.encoder.backend == EncoderBackend::Pretrained && self.encoder.weights.is_none() {
            problems.push("encoder.weights is required for encoder.backend = pretrained".into());
        }
        if self.encoder.backend == EncoderBackend::Synthetic
            && self.dataset.kind == DatasetKind::Manifest
        {
            problems.push(
                "the synthetic encoder backend needs a synthetic dataset; \
                 use encoder.backend = pretrained with manifest data"
                    .into(),
            );
        }
        if !(0.0..=1.0).contains(&self.split.labeled_fraction) {
            problems.push("split.labeled_fraction must lie in [0, 1]".into());
        }
        if self.tes.token_count == 0 {
            problems.push("tes.token_count must be at least 1".into());
        }
        if self.tes.token_count > self.encoder.max_tokens {
            problems.push(format!(
                "tes.token_count ({}) exceeds encoder.max_tokens ({})",
                self.tes.token_count, self.encoder.max_tokens
            ));
        }
        if self.tes.tau_a <= 0.0 {
            problems.push("tes.tau_a must be positive".into());
        }
        if let Err(e) = self.loss_weights().validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.temperatures().validate() {
            problems.push(e.to_string());
        }
        for (name, v) in [
            ("tes.batch_size", self.tes.batch_size),
            ("train.batch_size", self.train.batch_size),
            ("model.projection_dim", self.model.projection_dim),
            ("model.hidden_dim", self.model.hidden_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.estimate.k_min > self.estimate.k_max {
            problems.push("estimate.k_min must not exceed estimate.k_max".into());
        }
        if self.train.use_cache_fast_path && self.dataset.view_noise != 0.0 {
            problems.push("train.use_cache_fast_path requires dataset.view_noise = 0".into());
        }
        problems
    }

    /// Checks that referenced input files exist (CLI-time validation).
    pub fn validate_paths(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Some(p) = &self.dataset.manifest {
            if self.dataset.kind == DatasetKind::Manifest && !p.exists() {
                problems.push(format!("dataset.manifest path {p:?} does not exist"));
            }
        }
        if let Some(p) = &self.encoder.weights {
            if self.encoder.backend == EncoderBackend::Pretrained && !p.exists() {
                problems.push(format!("encoder.weights path {p:?} does not exist"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Every key with its resolved value, in canonical order. Seeds are
    /// echoed resolved, so the echo pins the run completely.
    pub fn to_flat(&self) -> Vec<(String, String)> {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("dataset.kind", self.dataset.kind.as_str().to_string());
        push("dataset.manifest", path_str(&self.dataset.manifest));
        push("dataset.num_classes", self.dataset.num_classes.to_string());
        push("dataset.per_class", self.dataset.per_class.to_string());
        push("dataset.visual_dim", self.dataset.visual_dim.to_string());
        push("dataset.text_dim", self.dataset.text_dim.to_string());
        push(
            "dataset.class_margin",
            self.dataset.class_margin.to_string(),
        );
        push("dataset.view_noise", self.dataset.view_noise.to_string());
        push("dataset.pair_offset", self.dataset.pair_offset.to_string());
        push("dataset.pair_new", self.dataset.pair_new.to_string());
        push("dataset.seed", self.dataset_seed().to_string());
        push(
            "split.old_class_count",
            self.split.old_class_count.to_string(),
        );
        push(
            "split.labeled_fraction",
            self.split.labeled_fraction.to_string(),
        );
        push(
            "split.policy",
            match self.split.policy {
                OldClassPolicy::SeededRandom => "random".to_string(),
                OldClassPolicy::FirstN => "first".to_string(),
            },
        );
        push("split.seed", self.split_seed().to_string());
        push("encoder.backend", self.encoder.backend.as_str().to_string());
        push("encoder.weights", path_str(&self.encoder.weights));
        push(
            "encoder.backbone_dim",
            self.encoder.backbone_dim.to_string(),
        );
        push("encoder.joint_dim", self.encoder.joint_dim.to_string());
        push("encoder.token_dim", self.encoder.token_dim.to_string());
        push("encoder.max_tokens", self.encoder.max_tokens.to_string());
        push("encoder.seed", self.encoder_seed().to_string());
        push("tes.token_count", self.tes.token_count.to_string());
        push("tes.tau_a", self.tes.tau_a.to_string());
        push("tes.epochs", self.tes.epochs.to_string());
        push("tes.batch_size", self.tes.batch_size.to_string());
        push("tes.learning_rate", self.tes.learning_rate.to_string());
        push("tes.momentum", self.tes.momentum.to_string());
        push(
            "tes.distill_include_positive",
            self.tes.distill_include_positive.to_string(),
        );
        push("tes.seed", self.tes_seed().to_string());
        push("loss.lambda_balance", self.loss.lambda_balance.to_string());
        push("loss.lambda_cico", self.loss.lambda_cico.to_string());
        push("loss.epsilon", self.loss.epsilon.to_string());
        push("loss.tau_c", self.loss.tau_c.to_string());
        push("loss.tau_s", self.loss.tau_s.to_string());
        push("loss.tau_t_start", self.loss.tau_t_start.to_string());
        push("loss.tau_t_end", self.loss.tau_t_end.to_string());
        push(
            "loss.tau_t_warmup_epochs",
            self.loss.tau_t_warmup_epochs.to_string(),
        );
        push(
            "loss.exclude_positive",
            self.loss.exclude_positive.to_string(),
        );
        push(
            "model.projection_dim",
            self.model.projection_dim.to_string(),
        );
        push("model.hidden_dim", self.model.hidden_dim.to_string());
        push(
            "model.share_projector",
            self.model.share_projector.to_string(),
        );
        push(
            "model.finetune_projector",
            self.model.finetune_projector.to_string(),
        );
        push("train.epochs", self.train.epochs.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.learning_rate", self.train.learning_rate.to_string());
        push("train.momentum", self.train.momentum.to_string());
        push(
            "train.use_cache_fast_path",
            self.train.use_cache_fast_path.to_string(),
        );
        push("train.seed", self.train_seed().to_string());
        push("eval.seed", self.eval_seed().to_string());
        push("estimate.k_min", self.estimate.k_min.to_string());
        push("estimate.k_max", self.estimate.k_max.to_string());
        push("estimate.seed", self.estimate_seed().to_string());
        out
    }

    /// The flat form as config-file text.
    pub fn echo_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_flat() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let config = PipelineConfig::parse("").unwrap();
        assert_eq!(config.seed, 1);
        assert_eq!(config.tes.token_count, 7);
        assert_eq!(config.train.batch_size, 128);
        assert_eq!(config.loss.lambda_balance, 0.35);
        assert_eq!(config.tes.tau_a, 0.01);
    }

    #[test]
    fn parses_keys_comments_and_seeds() {
        let text = "
# toy run
seed = 9
tes.token_count = 3   # small
dataset.kind = synthetic-paired
train.seed = 77
";
        let config = PipelineConfig::parse(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.tes.token_count, 3);
        assert_eq!(config.dataset.kind, DatasetKind::SyntheticPaired);
        // explicit seed wins; others derive from the master seed
        assert_eq!(config.train_seed(), 77);
        assert_eq!(config.dataset_seed(), 9);
        assert_eq!(config.split_seed(), 10);
        assert_eq!(config.estimate_seed(), 15);
    }

    #[test]
    fn collects_all_violations_at_once() {
        let text = "
bogus.key = 1
tes.token_count = banana
split.labeled_fraction = 1.5
loss.tau_t_start = 0.5
";
        let err = PipelineConfig::parse(text).unwrap_err();
        let Error::Config(problems) = err else {
            panic!("expected a config error")
        };
        assert!(problems.len() >= 4, "got: {problems:?}");
        assert!(problems.iter().any(|p| p.contains("unknown key")));
        assert!(problems.iter().any(|p| p.contains("banana")));
        assert!(problems.iter().any(|p| p.contains("labeled_fraction")));
        assert!(problems.iter().any(|p| p.contains("teacher temperature")));
    }

    #[test]
    fn rejects_duplicate_keys_and_bad_lines() {
        let text = "
seed = 1
seed = 2
just some words
";
        let err = PipelineConfig::parse(text).unwrap_err();
        let Error::Config(problems) = err else {
            panic!()
        };
        assert!(problems.iter().any(|p| p.contains("duplicate")));
        assert!(problems.iter().any(|p| p.contains("key = value")));
    }

    #[test]
    fn cross_field_requirements() {
        let err = PipelineConfig::parse("dataset.kind = manifest\n").unwrap_err();
        let Error::Config(problems) = err else {
            panic!()
        };
        assert!(problems.iter().any(|p| p.contains("dataset.manifest")));

        let err = PipelineConfig::parse("encoder.backend = pretrained\n").unwrap_err();
        let Error::Config(problems) = err else {
            panic!()
        };
        assert!(problems.iter().any(|p| p.contains("encoder.weights")));

        let err =
            PipelineConfig::parse("tes.token_count = 9\nencoder.max_tokens = 8\n").unwrap_err();
        let Error::Config(problems) = err else {
            panic!()
        };
        assert!(problems.iter().any(|p| p.contains("max_tokens")));
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let text = "seed = 4\ntes.epochs = 12\nmodel.share_projector = true\n";
        let config = PipelineConfig::parse(text).unwrap();
        let echoed = PipelineConfig::parse(&config.echo_string()).unwrap();
        assert_eq!(config.echo_string(), echoed.echo_string());
        assert!(echoed.model.share_projector);
        assert_eq!(echoed.tes.epochs, 12);
    }

    #[test]
    fn flat_echo_has_stable_order() {
        let a = PipelineConfig::default().to_flat();
        let b = PipelineConfig::default().to_flat();
        assert_eq!(a, b);
        assert_eq!(a[0].0, "seed");
    }
}
