//! Flat key-value run configuration.
//!
//! The format is plain text: one `key = value` per line, `#` starts a
//! comment, keys are namespaced with dots. Unknown keys are rejected
//! (fail-closed) naming the offending key. Every run writes its fully
//! resolved configuration (defaults included) next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::inferadapt::InferenceAdaptConfig;
use crate::model::{FastInit, FastScope, ModelConfig, OuterLora};
use crate::trainer::{
    InnerLoopConfig, LrSchedule, Method, Normalization, OuterMode, Stage1Target, Supervision,
    Trajectory, TrainConfig,
};

pub const CONFIG_HEADER: &str = "# memdlm-config v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key: {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected 'key = value'")]
    BadLine { line: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model.*
    pub model_vocab: usize,
    pub model_d_model: usize,
    pub model_n_heads: usize,
    pub model_n_layers: usize,
    pub model_max_len: usize,
    pub model_ffn_mult: usize,
    // diffusion.*
    pub diffusion_t_min: f32,
    pub diffusion_sampler_steps: usize,
    // train.*
    pub train_method: Method,
    pub train_beta: f32,
    pub train_weight_decay: f32,
    pub train_warmup: f32,
    pub train_schedule: LrSchedule,
    pub train_batch: usize,
    pub train_steps: u64,
    pub train_seed: u64,
    pub train_eval_every: u64,
    pub train_eval_batches: usize,
    pub train_save_every: u64,
    pub train_outer: OuterMode,
    pub train_outer_lora_rank: usize,
    pub train_outer_lora_alpha: f32,
    // inner.*
    pub inner_eta: f32,
    pub inner_k: usize,
    pub inner_s_pre: f32,
    pub inner_supervision: Supervision,
    pub inner_stage1_target: Stage1Target,
    pub inner_normalization: Normalization,
    pub inner_clip: Option<f32>,
    pub inner_scope_fraction: f32,
    pub inner_ffn_only: bool,
    pub inner_full_param: bool,
    pub inner_trajectory: Trajectory,
    pub inner_rank: usize,
    pub inner_alpha: f32,
    pub inner_fast_init: FastInit,
    // infer.*
    pub infer_enabled: bool,
    pub infer_anchor_ratio: f32,
    pub infer_eta: f32,
    pub infer_epochs: usize,
    pub infer_s_pre: f32,
    pub infer_supervision: Supervision,
    // probe.*
    pub probe_samples: usize,
    // data.*
    pub data_train: String,
    pub data_eval: String,
    pub data_retrieval: String,
    // out.*
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_vocab: 64,
            model_d_model: 64,
            model_n_heads: 4,
            model_n_layers: 4,
            model_max_len: 256,
            model_ffn_mult: 4,
            diffusion_t_min: 0.02,
            diffusion_sampler_steps: 8,
            train_method: Method::StandardMdlm,
            train_beta: 2e-4,
            train_weight_decay: 0.01,
            train_warmup: 0.1,
            train_schedule: LrSchedule::Cosine,
            train_batch: 8,
            train_steps: 1000,
            train_seed: 1,
            train_eval_every: 100,
            train_eval_batches: 8,
            train_save_every: 500,
            train_outer: OuterMode::Full,
            train_outer_lora_rank: 8,
            train_outer_lora_alpha: 16.0,
            inner_eta: 0.05,
            inner_k: 2,
            inner_s_pre: 1.5,
            inner_supervision: Supervision::CrossEntropy,
            inner_stage1_target: Stage1Target::BroadClean,
            inner_normalization: Normalization::Local,
            inner_clip: Some(1.0),
            inner_scope_fraction: 0.25,
            inner_ffn_only: true,
            inner_full_param: false,
            inner_trajectory: Trajectory::AnchorConsistent,
            inner_rank: 4,
            inner_alpha: 8.0,
            inner_fast_init: FastInit::ZeroBoth,
            infer_enabled: false,
            infer_anchor_ratio: 0.2,
            infer_eta: 0.05,
            infer_epochs: 1,
            infer_s_pre: 1.5,
            infer_supervision: Supervision::CrossEntropy,
            probe_samples: 8,
            data_train: String::new(),
            data_eval: String::new(),
            data_retrieval: String::new(),
            out_dir: "run".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn bad(key: &str, value: &str, options: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: format!("expected one of: {options}") }
}

impl RunConfig {
    /// Apply one `key = value` assignment (fail-closed on unknown keys).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "model.vocab" => self.model_vocab = parse_num(key, value)?,
            "model.d_model" => self.model_d_model = parse_num(key, value)?,
            "model.n_heads" => self.model_n_heads = parse_num(key, value)?,
            "model.n_layers" => self.model_n_layers = parse_num(key, value)?,
            "model.max_len" => self.model_max_len = parse_num(key, value)?,
            "model.ffn_mult" => self.model_ffn_mult = parse_num(key, value)?,
            "diffusion.t_min" => self.diffusion_t_min = parse_num(key, value)?,
            "diffusion.sampler_steps" => self.diffusion_sampler_steps = parse_num(key, value)?,
            "train.method" => {
                self.train_method = match value {
                    "standard_mdlm" => Method::StandardMdlm,
                    "memdlm" => Method::Memdlm,
                    _ => return Err(bad(key, value, "standard_mdlm, memdlm")),
                }
            }
            "train.beta" => self.train_beta = parse_num(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, value)?,
            "train.warmup" => self.train_warmup = parse_num(key, value)?,
            "train.schedule" => {
                self.train_schedule = match value {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(bad(key, value, "cosine, constant")),
                }
            }
            "train.batch" => self.train_batch = parse_num(key, value)?,
            "train.steps" => self.train_steps = parse_num(key, value)?,
            "train.seed" => self.train_seed = parse_num(key, value)?,
            "train.eval_every" => self.train_eval_every = parse_num(key, value)?,
            "train.eval_batches" => self.train_eval_batches = parse_num(key, value)?,
            "train.save_every" => self.train_save_every = parse_num(key, value)?,
            "train.outer" => {
                self.train_outer = match value {
                    "full" => OuterMode::Full,
                    "lora" => OuterMode::Lora,
                    _ => return Err(bad(key, value, "full, lora")),
                }
            }
            "train.outer_lora_rank" => self.train_outer_lora_rank = parse_num(key, value)?,
            "train.outer_lora_alpha" => self.train_outer_lora_alpha = parse_num(key, value)?,
            "inner.eta" => self.inner_eta = parse_num(key, value)?,
            "inner.k" => self.inner_k = parse_num(key, value)?,
            "inner.s_pre" => self.inner_s_pre = parse_num(key, value)?,
            "inner.supervision" => self.inner_supervision = parse_supervision(key, value)?,
            "inner.stage1_target" => {
                self.inner_stage1_target = match value {
                    "broad_clean" => Stage1Target::BroadClean,
                    "anchor_token_only" => Stage1Target::AnchorTokenOnly,
                    _ => return Err(bad(key, value, "broad_clean, anchor_token_only")),
                }
            }
            "inner.normalization" => {
                self.inner_normalization = match value {
                    "local" => Normalization::Local,
                    "global" => Normalization::Global,
                    "off" => Normalization::Off,
                    _ => return Err(bad(key, value, "local, global, off")),
                }
            }
            "inner.clip" => {
                self.inner_clip = if value == "none" { None } else { Some(parse_num(key, value)?) }
            }
            "inner.scope_fraction" => self.inner_scope_fraction = parse_num(key, value)?,
            "inner.ffn_only" => self.inner_ffn_only = parse_bool(key, value)?,
            "inner.full_param" => self.inner_full_param = parse_bool(key, value)?,
            "inner.trajectory" => {
                self.inner_trajectory = match value {
                    "anchor_consistent" => Trajectory::AnchorConsistent,
                    "inconsistent" => Trajectory::Inconsistent,
                    _ => return Err(bad(key, value, "anchor_consistent, inconsistent")),
                }
            }
            "inner.rank" => self.inner_rank = parse_num(key, value)?,
            "inner.alpha" => self.inner_alpha = parse_num(key, value)?,
            "inner.fast_init" => {
                self.inner_fast_init = match value {
                    "zero_both" => FastInit::ZeroBoth,
                    "random_a" => FastInit::RandomA,
                    _ => return Err(bad(key, value, "zero_both, random_a")),
                }
            }
            "infer.enabled" => self.infer_enabled = parse_bool(key, value)?,
            "infer.anchor_ratio" => self.infer_anchor_ratio = parse_num(key, value)?,
            "infer.eta" => self.infer_eta = parse_num(key, value)?,
            "infer.epochs" => self.infer_epochs = parse_num(key, value)?,
            "infer.s_pre" => self.infer_s_pre = parse_num(key, value)?,
            "infer.supervision" => self.infer_supervision = parse_supervision(key, value)?,
            "probe.samples" => self.probe_samples = parse_num(key, value)?,
            "data.train" => self.data_train = value.to_string(),
            "data.eval" => self.data_eval = value.to_string(),
            "data.retrieval" => self.data_retrieval = value.to_string(),
            "out.dir" => self.out_dir = value.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(ConfigError::BadLine { line: lineno + 1 });
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(ConfigError::BadLine { line: lineno + 1 });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model_d_model % self.model_n_heads != 0 {
            return Err(ConfigError::Invalid("model.d_model must divide by model.n_heads".into()));
        }
        if self.train_beta <= 0.0 {
            return Err(ConfigError::Invalid("train.beta must be positive".into()));
        }
        if self.inner_eta < 0.0 {
            return Err(ConfigError::Invalid("inner.eta must be nonnegative".into()));
        }
        if self.inner_k < 1 {
            return Err(ConfigError::Invalid("inner.k must be at least 1".into()));
        }
        if self.inner_trajectory == Trajectory::AnchorConsistent && self.inner_s_pre < 1.0 {
            return Err(ConfigError::Invalid(
                "inner.s_pre must be >= 1 for anchor_consistent trajectories".into(),
            ));
        }
        if !(self.infer_anchor_ratio > 0.0 && self.infer_anchor_ratio < 1.0) {
            return Err(ConfigError::Invalid("infer.anchor_ratio must lie in (0, 1)".into()));
        }
        if self.diffusion_sampler_steps < 1 {
            return Err(ConfigError::Invalid("diffusion.sampler_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.diffusion_t_min) {
            return Err(ConfigError::Invalid("diffusion.t_min must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Fully resolved config text (defaults included), parse-stable.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CONFIG_HEADER}");
        let kv: Vec<(&str, String)> = vec![
            ("model.vocab", self.model_vocab.to_string()),
            ("model.d_model", self.model_d_model.to_string()),
            ("model.n_heads", self.model_n_heads.to_string()),
            ("model.n_layers", self.model_n_layers.to_string()),
            ("model.max_len", self.model_max_len.to_string()),
            ("model.ffn_mult", self.model_ffn_mult.to_string()),
            ("diffusion.t_min", self.diffusion_t_min.to_string()),
            ("diffusion.sampler_steps", self.diffusion_sampler_steps.to_string()),
            ("train.method", self.train_method.name().into()),
            ("train.beta", self.train_beta.to_string()),
            ("train.weight_decay", self.train_weight_decay.to_string()),
            ("train.warmup", self.train_warmup.to_string()),
            ("train.schedule", self.train_schedule.name().into()),
            ("train.batch", self.train_batch.to_string()),
            ("train.steps", self.train_steps.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("train.eval_every", self.train_eval_every.to_string()),
            ("train.eval_batches", self.train_eval_batches.to_string()),
            ("train.save_every", self.train_save_every.to_string()),
            ("train.outer", self.train_outer.name().into()),
            ("train.outer_lora_rank", self.train_outer_lora_rank.to_string()),
            ("train.outer_lora_alpha", self.train_outer_lora_alpha.to_string()),
            ("inner.eta", self.inner_eta.to_string()),
            ("inner.k", self.inner_k.to_string()),
            ("inner.s_pre", self.inner_s_pre.to_string()),
            ("inner.supervision", self.inner_supervision.name().into()),
            ("inner.stage1_target", self.inner_stage1_target.name().into()),
            ("inner.normalization", self.inner_normalization.name().into()),
            ("inner.clip", self.inner_clip.map_or("none".into(), |c| c.to_string())),
            ("inner.scope_fraction", self.inner_scope_fraction.to_string()),
            ("inner.ffn_only", self.inner_ffn_only.to_string()),
            ("inner.full_param", self.inner_full_param.to_string()),
            ("inner.trajectory", self.inner_trajectory.name().into()),
            ("inner.rank", self.inner_rank.to_string()),
            ("inner.alpha", self.inner_alpha.to_string()),
            ("inner.fast_init", match self.inner_fast_init {
                FastInit::ZeroBoth => "zero_both".into(),
                FastInit::RandomA => "random_a".into(),
            }),
            ("infer.enabled", self.infer_enabled.to_string()),
            ("infer.anchor_ratio", self.infer_anchor_ratio.to_string()),
            ("infer.eta", self.infer_eta.to_string()),
            ("infer.epochs", self.infer_epochs.to_string()),
            ("infer.s_pre", self.infer_s_pre.to_string()),
            ("infer.supervision", self.infer_supervision.name().into()),
            ("probe.samples", self.probe_samples.to_string()),
            ("data.train", self.data_train.clone()),
            ("data.eval", self.data_eval.clone()),
            ("data.retrieval", self.data_retrieval.clone()),
            ("out.dir", self.out_dir.clone()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    // ── projections into module configs ─────────────────────────────

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.model_vocab,
            d_model: self.model_d_model,
            n_heads: self.model_n_heads,
            n_layers: self.model_n_layers,
            max_len: self.model_max_len,
            ffn_mult: self.model_ffn_mult,
        }
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule { t_min: self.diffusion_t_min }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { n_steps: self.diffusion_sampler_steps }
    }

    pub fn inner_config(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            eta: self.inner_eta,
            k: self.inner_k,
            s_pre: self.inner_s_pre,
            supervision: self.inner_supervision,
            stage1_target: self.inner_stage1_target,
            normalization: self.inner_normalization,
            clip: self.inner_clip,
            scope: FastScope {
                fraction: self.inner_scope_fraction,
                ffn_only: self.inner_ffn_only,
                full_param: self.inner_full_param,
            },
            rank: self.inner_rank,
            alpha: self.inner_alpha,
            fast_init: self.inner_fast_init,
            trajectory: self.inner_trajectory,
        }
    }

    pub fn train_settings(&self) -> TrainConfig {
        TrainConfig {
            method: self.train_method,
            beta: self.train_beta,
            weight_decay: self.train_weight_decay,
            warmup: self.train_warmup,
            schedule: self.train_schedule,
            batch: self.train_batch,
            steps: self.train_steps,
            seed: self.train_seed,
            eval_every: self.train_eval_every,
            eval_batches: self.train_eval_batches,
            save_every: self.train_save_every,
            outer: self.train_outer,
        }
    }

    pub fn outer_lora(&self) -> Option<OuterLora> {
        match self.train_outer {
            OuterMode::Full => None,
            OuterMode::Lora => Some(OuterLora {
                rank: self.train_outer_lora_rank,
                alpha: self.train_outer_lora_alpha,
            }),
        }
    }

    pub fn infer_config(&self) -> InferenceAdaptConfig {
        InferenceAdaptConfig {
            enabled: self.infer_enabled,
            anchor_ratio: self.infer_anchor_ratio,
            eta: self.infer_eta,
            epochs: self.infer_epochs,
            s_pre: self.infer_s_pre,
            supervision: self.infer_supervision,
        }
    }
}

fn parse_supervision(key: &str, value: &str) -> Result<Supervision, ConfigError> {
    match value {
        "cross_entropy" => Ok(Supervision::CrossEntropy),
        "kl_distill" => Ok(Supervision::KlDistill),
        "reverse_kl_distill" => Ok(Supervision::ReverseKlDistill),
        "hidden_cosine" => Ok(Supervision::HiddenCosine),
        "hidden_mse" => Ok(Supervision::HiddenMse),
        _ => Err(bad(key, value, "cross_entropy, kl_distill, reverse_kl_distill, hidden_cosine, hidden_mse")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_and_named() {
        let err = RunConfig::parse("model.vocabb = 64").unwrap_err();
        assert!(err.to_string().contains("model.vocabb"), "{err}");
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("inner.supervision", "kl_distill").unwrap();
        cfg.set("inner.clip", "none").unwrap();
        cfg.set("train.method", "memdlm").unwrap();
        let text = cfg.resolved();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# hello\n\nmodel.vocab = 32  # trailing\n").unwrap();
        assert_eq!(cfg.model_vocab, 32);
    }

    #[test]
    fn validation_catches_bad_invariants() {
        let mut cfg = RunConfig::default();
        cfg.set("inner.s_pre", "0.5").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("inner.s_pre", "1.5").unwrap();
        cfg.set("inner.trajectory", "inconsistent").unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn every_ablation_cell_is_reachable_from_text() {
        for sup in ["cross_entropy", "kl_distill", "reverse_kl_distill", "hidden_cosine", "hidden_mse"] {
            for target in ["broad_clean", "anchor_token_only"] {
                for norm in ["local", "global", "off"] {
                    let text = format!(
                        "inner.supervision = {sup}\ninner.stage1_target = {target}\ninner.normalization = {norm}\ninner.k = 3\n"
                    );
                    let cfg = RunConfig::parse(&text).unwrap();
                    assert_eq!(cfg.inner_k, 3);
                }
            }
        }
    }
}
