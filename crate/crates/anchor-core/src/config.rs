//! Run configuration with flat dotted keys.
//!
//! Config files are JSON objects whose keys are dotted paths
//! (`{"attack.train.eps": 0.031}`); command-line flags mirror the keys one to
//! one. Resolution precedence: built-in defaults, then the config file, then
//! flags. The resolved snapshot serializes with sorted keys, so its bytes are
//! stable and hashable into a run id.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, ObjectiveKind};
use crate::data::{AugmentConfig, DatasetKind};
use crate::error::{AnchorError, Result};
use crate::losses::LossConfig;
use crate::models::{ClassifierSpec, EncoderSpec, ProjectionHeadSpec};
use crate::pipeline::TrainConfig;
use crate::tensor::Precision;

/// Every recognized flat key, in canonical (sorted) order.
pub const KEYS: &[&str] = &[
    "attack.eval.alpha",
    "attack.eval.eps",
    "attack.eval.objective",
    "attack.eval.random_start",
    "attack.eval.restarts",
    "attack.eval.steps",
    "attack.train.alpha",
    "attack.train.eps",
    "attack.train.objective",
    "attack.train.random_start",
    "attack.train.restarts",
    "attack.train.steps",
    "augment.flip_prob",
    "augment.jitter",
    "augment.pad",
    "data.classes",
    "data.kind",
    "data.n_test",
    "data.n_train",
    "data.noise",
    "data.test_path",
    "data.train_path",
    "eval.workers",
    "loss.beta_end",
    "loss.beta_start",
    "loss.lambda",
    "loss.margin",
    "loss.tau",
    "model.block_widths",
    "model.classifier_hidden",
    "model.convs_per_block",
    "model.embedding_dim",
    "model.proj_dim",
    "model.proj_hidden",
    "model.stem_width",
    "precision",
    "seed",
    "train.apt.epochs",
    "train.apt.lr",
    "train.batch_size",
    "train.momentum",
    "train.pretrain.epochs",
    "train.pretrain.lr",
];

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    pub data_kind: DatasetKind,
    pub data_classes: usize,
    pub data_n_train: usize,
    pub data_n_test: usize,
    pub data_noise: f64,
    /// Dataset container files to load instead of generating; empty means
    /// generate from the data.* settings.
    pub data_train_path: String,
    pub data_test_path: String,

    pub augment: AugmentConfig,

    pub model_stem_width: usize,
    pub model_block_widths: Vec<usize>,
    pub model_convs_per_block: usize,
    pub model_embedding_dim: usize,
    pub model_proj_hidden: usize,
    pub model_proj_dim: usize,
    pub model_classifier_hidden: usize,

    pub loss_tau: f64,
    pub loss_lambda: f64,
    pub loss_beta_start: f64,
    pub loss_beta_end: f64,
    pub loss_margin: f64,

    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub apt_epochs: usize,
    pub apt_lr: f64,
    pub momentum: f64,

    pub attack_train: AttackConfig,
    pub attack_eval: AttackConfig,

    pub eval_workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            data_kind: DatasetKind::TinyImages,
            data_classes: 3,
            data_n_train: 2000,
            data_n_test: 500,
            data_noise: 0.1,
            data_train_path: String::new(),
            data_test_path: String::new(),
            augment: AugmentConfig::default(),
            model_stem_width: 16,
            model_block_widths: vec![16, 32],
            model_convs_per_block: 1,
            model_embedding_dim: 64,
            model_proj_hidden: 32,
            model_proj_dim: 16,
            model_classifier_hidden: 32,
            loss_tau: 0.1,
            loss_lambda: 1.0,
            loss_beta_start: 0.5,
            loss_beta_end: 2.0,
            loss_margin: -1.0,
            batch_size: 64,
            pretrain_epochs: 30,
            pretrain_lr: 0.002,
            apt_epochs: 20,
            apt_lr: 0.01,
            momentum: 0.9,
            attack_train: AttackConfig::train_default(),
            attack_eval: AttackConfig::eval_default(),
            eval_workers: 1,
        }
    }
}

fn want_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| AnchorError::Config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn want_usize(key: &str, v: &Value) -> Result<usize> {
    Ok(want_u64(key, v)? as usize)
}

fn want_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| AnchorError::Config(format!("{key}: expected a number, got {v}")))
}

fn want_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| AnchorError::Config(format!("{key}: expected true or false, got {v}")))
}

fn want_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| AnchorError::Config(format!("{key}: expected a string, got {v}")))
}

/// Accepts a JSON array of integers or a comma-separated string ("16,32").
fn want_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(|i| want_usize(key, i)).collect(),
        Value::String(s) => s
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| AnchorError::Config(format!("{key}: bad list element {part:?}")))
            })
            .collect(),
        other => Err(AnchorError::Config(format!(
            "{key}: expected an integer list, got {other}"
        ))),
    }
}

fn objective_from(key: &str, v: &Value) -> Result<ObjectiveKind> {
    match want_str(key, v)? {
        "ce" => Ok(ObjectiveKind::Ce),
        "combined" => Ok(ObjectiveKind::Combined),
        other => Err(AnchorError::Config(format!(
            "{key}: objective must be ce or combined, got {other:?}"
        ))),
    }
}

fn objective_str(o: ObjectiveKind) -> &'static str {
    match o {
        ObjectiveKind::Ce => "ce",
        ObjectiveKind::Combined => "combined",
    }
}

impl RunConfig {
    /// Set one dotted key from a JSON value. Unknown keys are reported by name.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = want_u64(key, v)?,
            "precision" => self.precision = want_str(key, v)?.parse()?,
            "data.kind" => self.data_kind = want_str(key, v)?.parse()?,
            "data.classes" => self.data_classes = want_usize(key, v)?,
            "data.n_train" => self.data_n_train = want_usize(key, v)?,
            "data.n_test" => self.data_n_test = want_usize(key, v)?,
            "data.noise" => self.data_noise = want_f64(key, v)?,
            "data.train_path" => self.data_train_path = want_str(key, v)?.to_string(),
            "data.test_path" => self.data_test_path = want_str(key, v)?.to_string(),
            "augment.pad" => self.augment.pad = want_usize(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = want_f64(key, v)?,
            "augment.jitter" => self.augment.jitter = want_f64(key, v)?,
            "model.stem_width" => self.model_stem_width = want_usize(key, v)?,
            "model.block_widths" => self.model_block_widths = want_usize_list(key, v)?,
            "model.convs_per_block" => self.model_convs_per_block = want_usize(key, v)?,
            "model.embedding_dim" => self.model_embedding_dim = want_usize(key, v)?,
            "model.proj_hidden" => self.model_proj_hidden = want_usize(key, v)?,
            "model.proj_dim" => self.model_proj_dim = want_usize(key, v)?,
            "model.classifier_hidden" => self.model_classifier_hidden = want_usize(key, v)?,
            "loss.tau" => self.loss_tau = want_f64(key, v)?,
            "loss.lambda" => self.loss_lambda = want_f64(key, v)?,
            "loss.beta_start" => self.loss_beta_start = want_f64(key, v)?,
            "loss.beta_end" => self.loss_beta_end = want_f64(key, v)?,
            "loss.margin" => self.loss_margin = want_f64(key, v)?,
            "train.batch_size" => self.batch_size = want_usize(key, v)?,
            "train.pretrain.epochs" => self.pretrain_epochs = want_usize(key, v)?,
            "train.pretrain.lr" => self.pretrain_lr = want_f64(key, v)?,
            "train.apt.epochs" => self.apt_epochs = want_usize(key, v)?,
            "train.apt.lr" => self.apt_lr = want_f64(key, v)?,
            "train.momentum" => self.momentum = want_f64(key, v)?,
            "attack.train.eps" => self.attack_train.epsilon = want_f64(key, v)?,
            "attack.train.alpha" => self.attack_train.alpha = want_f64(key, v)?,
            "attack.train.steps" => self.attack_train.steps = want_usize(key, v)?,
            "attack.train.objective" => self.attack_train.objective = objective_from(key, v)?,
            "attack.train.random_start" => self.attack_train.random_start = want_bool(key, v)?,
            "attack.train.restarts" => self.attack_train.restarts = want_usize(key, v)?,
            "attack.eval.eps" => self.attack_eval.epsilon = want_f64(key, v)?,
            "attack.eval.alpha" => self.attack_eval.alpha = want_f64(key, v)?,
            "attack.eval.steps" => self.attack_eval.steps = want_usize(key, v)?,
            "attack.eval.objective" => self.attack_eval.objective = objective_from(key, v)?,
            "attack.eval.random_start" => self.attack_eval.random_start = want_bool(key, v)?,
            "attack.eval.restarts" => self.attack_eval.restarts = want_usize(key, v)?,
            "eval.workers" => self.eval_workers = want_usize(key, v)?,
            other => {
                return Err(AnchorError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Value {
        match key {
            "seed" => self.seed.into(),
            "precision" => serde_json::to_value(self.precision).unwrap(),
            "data.kind" => serde_json::to_value(self.data_kind).unwrap(),
            "data.classes" => self.data_classes.into(),
            "data.n_train" => self.data_n_train.into(),
            "data.n_test" => self.data_n_test.into(),
            "data.noise" => self.data_noise.into(),
            "data.train_path" => self.data_train_path.clone().into(),
            "data.test_path" => self.data_test_path.clone().into(),
            "augment.pad" => self.augment.pad.into(),
            "augment.flip_prob" => self.augment.flip_prob.into(),
            "augment.jitter" => self.augment.jitter.into(),
            "model.stem_width" => self.model_stem_width.into(),
            "model.block_widths" => self.model_block_widths.clone().into(),
            "model.convs_per_block" => self.model_convs_per_block.into(),
            "model.embedding_dim" => self.model_embedding_dim.into(),
            "model.proj_hidden" => self.model_proj_hidden.into(),
            "model.proj_dim" => self.model_proj_dim.into(),
            "model.classifier_hidden" => self.model_classifier_hidden.into(),
            "loss.tau" => self.loss_tau.into(),
            "loss.lambda" => self.loss_lambda.into(),
            "loss.beta_start" => self.loss_beta_start.into(),
            "loss.beta_end" => self.loss_beta_end.into(),
            "loss.margin" => self.loss_margin.into(),
            "train.batch_size" => self.batch_size.into(),
            "train.pretrain.epochs" => self.pretrain_epochs.into(),
            "train.pretrain.lr" => self.pretrain_lr.into(),
            "train.apt.epochs" => self.apt_epochs.into(),
            "train.apt.lr" => self.apt_lr.into(),
            "train.momentum" => self.momentum.into(),
            "attack.train.eps" => self.attack_train.epsilon.into(),
            "attack.train.alpha" => self.attack_train.alpha.into(),
            "attack.train.steps" => self.attack_train.steps.into(),
            "attack.train.objective" => objective_str(self.attack_train.objective).into(),
            "attack.train.random_start" => self.attack_train.random_start.into(),
            "attack.train.restarts" => self.attack_train.restarts.into(),
            "attack.eval.eps" => self.attack_eval.epsilon.into(),
            "attack.eval.alpha" => self.attack_eval.alpha.into(),
            "attack.eval.steps" => self.attack_eval.steps.into(),
            "attack.eval.objective" => objective_str(self.attack_eval.objective).into(),
            "attack.eval.random_start" => self.attack_eval.random_start.into(),
            "attack.eval.restarts" => self.attack_eval.restarts.into(),
            "eval.workers" => self.eval_workers.into(),
            other => panic!("get of unknown key {other:?}"),
        }
    }

    /// The canonical flat snapshot: every key, sorted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        KEYS.iter().map(|&k| (k.to_string(), self.get(k))).collect()
    }

    /// Canonical JSON bytes of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Run id: truncated SHA-256 of the canonical snapshot (which contains the
    /// seed).
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply a JSON config file of dotted keys over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AnchorError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| AnchorError::Config(format!("malformed config {}: {e}", path.display())))?;
        let obj = parsed.as_object().ok_or_else(|| {
            AnchorError::Config(format!("{}: top level must be a JSON object", path.display()))
        })?;
        // Sorted application keeps error reporting deterministic.
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.sort();
        for k in keys {
            self.set(k, &obj[k])?;
        }
        Ok(())
    }

    /// Basic cross-field validation.
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.attack_train.validate()?;
        self.attack_eval.validate()?;
        self.loss_config().validate()?;
        if self.batch_size < 2 {
            return Err(AnchorError::Config(
                "train.batch_size must be >= 2 (the contrastive loss needs pairs)".into(),
            ));
        }
        if self.model_proj_dim >= self.model_embedding_dim {
            return Err(AnchorError::Config(format!(
                "model.proj_dim {} must be smaller than model.embedding_dim {}",
                self.model_proj_dim, self.model_embedding_dim
            )));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            in_channels: match self.data_kind {
                DatasetKind::TinyImages => 3,
                DatasetKind::Blobs => 1,
            },
            stem_width: self.model_stem_width,
            block_widths: self.model_block_widths.clone(),
            convs_per_block: self.model_convs_per_block,
            embedding_dim: self.model_embedding_dim,
        }
    }

    pub fn projection_spec(&self) -> ProjectionHeadSpec {
        ProjectionHeadSpec {
            hidden: self.model_proj_hidden,
            output: self.model_proj_dim,
        }
    }

    pub fn pretrain_classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec::linear(self.data_classes)
    }

    pub fn apt_classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec::zero_mlp(self.model_classifier_hidden, self.data_classes)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.loss_tau,
            lambda: self.loss_lambda,
            beta_start: self.loss_beta_start,
            beta_end: self.loss_beta_end,
            total_epochs: self.pretrain_epochs.max(1),
            margin: self.loss_margin,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        // APT generates adversarial examples against the plain cross-entropy;
        // there is no contrastive term in phase 2.
        let mut attack_apt = self.attack_train.clone();
        attack_apt.objective = ObjectiveKind::Ce;
        TrainConfig {
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_lr: self.pretrain_lr,
            apt_epochs: self.apt_epochs,
            apt_lr: self.apt_lr,
            momentum: self.momentum,
            attack_pretrain: self.attack_train.clone(),
            attack_apt,
            attack_eval: self.attack_eval.clone(),
            loss: self.loss_config(),
            augment: self.augment.clone(),
            seed: self.seed,
            precision: self.precision,
            eval_workers: self.eval_workers,
            encoder: self.encoder_spec(),
            projection: self.projection_spec(),
            classifier_hidden: self.model_classifier_hidden,
            class_count: self.data_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_roundtrips_through_get_set() {
        let mut cfg = RunConfig::default();
        for &k in KEYS {
            let v = cfg.get(k);
            cfg.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(cfg.get(k), v, "key {k} drifted");
        }
    }

    #[test]
    fn unknown_key_is_reported_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("attack.train.epsilon", &Value::from(0.1)).unwrap_err();
        assert!(err.to_string().contains("attack.train.epsilon"));
    }

    #[test]
    fn run_id_depends_on_seed_and_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn canonical_json_is_stable() {
        let a = RunConfig::default();
        assert_eq!(a.canonical_json(), a.canonical_json());
    }

    #[test]
    fn block_widths_accept_csv_strings() {
        let mut cfg = RunConfig::default();
        cfg.set("model.block_widths", &Value::from("8, 12")).unwrap();
        assert_eq!(cfg.model_block_widths, vec![8, 12]);
        cfg.set("model.block_widths", &serde_json::json!([4, 6, 8])).unwrap();
        assert_eq!(cfg.model_block_widths, vec![4, 6, 8]);
    }

    #[test]
    fn file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"loss.tau": 0.25, "train.batch_size": 16}"#).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.loss_tau, 0.25);
        assert_eq!(cfg.batch_size, 16);
    }
}
