//! Strict run configuration. Unknown keys are rejected; every run
//! directory stores the fully resolved form.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use advlab_core::train::{ClipTrainConfig, InstructionTuneConfig, TrainStageConfig};
use advlab_core::{Error, Result};

fn d_data_n() -> usize {
    512
}
fn d_resolution() -> usize {
    32
}
fn d_data_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_data_n")]
    pub n: usize,
    #[serde(default = "d_resolution")]
    pub resolution: usize,
    #[serde(default = "d_data_seed")]
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection { n: d_data_n(), resolution: d_resolution(), seed: d_data_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub resolution: usize,
    pub attack_steps: usize,
    pub epsilon: f64,
    pub samples: usize,
}

fn d_base_samples() -> usize {
    32000
}
fn d_batch_size() -> usize {
    32
}
fn d_clip_lr() -> f64 {
    2e-3
}
fn d_weight_decay() -> f64 {
    1e-4
}
fn d_lambda_caption() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSection {
    /// "clean" trains everything at epsilon 0; "adversarial" runs the
    /// staged schedule with a frozen text tower.
    pub mode: String,
    #[serde(default = "d_base_samples")]
    pub base_samples: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_clip_lr")]
    pub lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_lambda_caption")]
    pub lambda_caption: f64,
    /// Checkpoint donating a pretrained text tower (adversarial mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_from: Option<PathBuf>,
    #[serde(default)]
    pub strict_vision_only: bool,
    #[serde(default)]
    pub attack_contrastive_only: bool,
    #[serde(default)]
    pub clean_mix: bool,
    /// Explicit stage schedule; omitted = the default three-stage ramp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageSection>>,
}

fn d_cap_epochs() -> usize {
    8
}
fn d_cap_batch() -> usize {
    16
}
fn d_cap_lr() -> f64 {
    3e-4
}
fn d_vision_lr_ratio() -> f64 {
    0.05
}
fn d_cap_epsilon() -> f64 {
    8.0 / 255.0
}
fn d_cap_steps() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerSection {
    /// Encoder checkpoint supplying the vision tower to copy and tune.
    pub vision_from: PathBuf,
    #[serde(default)]
    pub adversarial: bool,
    #[serde(default = "d_cap_epochs")]
    pub epochs: usize,
    #[serde(default = "d_cap_batch")]
    pub batch_size: usize,
    #[serde(default = "d_cap_lr")]
    pub lr: f64,
    #[serde(default = "d_vision_lr_ratio")]
    pub vision_lr_ratio: f64,
    #[serde(default = "d_cap_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_cap_steps")]
    pub attack_steps: usize,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
}

fn d_eval_samples() -> usize {
    64
}
fn d_eval_seed() -> u64 {
    99
}
fn d_eval_epsilon() -> f64 {
    4.0 / 255.0
}
fn d_eval_steps() -> usize {
    20
}
fn d_eval_data_n() -> usize {
    128
}
fn d_eval_data_seed() -> u64 {
    1007
}
fn d_caption_samples() -> usize {
    32
}
fn d_targeted_epsilon() -> f64 {
    16.0 / 255.0
}
fn d_targeted_steps() -> usize {
    60
}
fn d_targeted_samples() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_eval_samples")]
    pub samples: usize,
    #[serde(default = "d_eval_seed")]
    pub seed: u64,
    #[serde(default = "d_eval_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_eval_steps")]
    pub steps: usize,
    /// Evaluation rides on a freshly rendered dataset: same distribution,
    /// disjoint seed from training.
    #[serde(default = "d_eval_data_n")]
    pub data_n: usize,
    #[serde(default = "d_eval_data_seed")]
    pub data_seed: u64,
    /// Optional pre-rendered dataset file; overrides data_n/data_seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
    #[serde(default = "d_caption_samples")]
    pub caption_samples: usize,
    #[serde(default = "d_eval_steps")]
    pub caption_steps: usize,
    #[serde(default = "d_cap_epsilon")]
    pub caption_epsilon: f64,
    #[serde(default = "d_targeted_epsilon")]
    pub targeted_epsilon: f64,
    #[serde(default = "d_targeted_steps")]
    pub targeted_steps: usize,
    #[serde(default = "d_targeted_samples")]
    pub targeted_samples_per_target: usize,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        toml::from_str("").expect("empty eval section has defaults for every field")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<CaptionerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn clip_section(&self) -> Result<&ClipSection> {
        self.clip.as_ref().ok_or_else(|| Error::InvalidArgument("config lacks a [clip] section".into()))
    }

    pub fn captioner_section(&self) -> Result<&CaptionerSection> {
        self.captioner
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("config lacks a [captioner] section".into()))
    }

    pub fn eval_section(&self) -> EvalSection {
        self.eval.clone().unwrap_or_default()
    }

    /// Stage schedule and loop parameters for the contrastive trainer.
    pub fn clip_train_config(&self) -> Result<ClipTrainConfig> {
        let c = self.clip_section()?;
        let clean = match c.mode.as_str() {
            "clean" => true,
            "adversarial" => false,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "clip.mode must be clean or adversarial, got {other:?}"
                )))
            }
        };
        let mut stages: Vec<TrainStageConfig> = match &c.stages {
            Some(list) => list
                .iter()
                .map(|s| TrainStageConfig {
                    resolution: s.resolution,
                    attack_steps: s.attack_steps,
                    epsilon: s.epsilon,
                    samples: s.samples,
                    batch_size: c.batch_size,
                    lr: c.lr,
                    freeze_text: true,
                    lambda_caption: c.lambda_caption,
                })
                .collect(),
            None => advlab_core::train::default_stages(c.base_samples, c.batch_size, c.lr),
        };
        for st in &mut stages {
            st.lambda_caption = c.lambda_caption;
            if clean {
                st.epsilon = 0.0;
                st.attack_steps = 0;
                st.freeze_text = false;
            }
        }
        let mut cfg = ClipTrainConfig::new(stages, self.data.n, self.data.seed, self.run.seed);
        cfg.weight_decay = c.weight_decay;
        cfg.strict_vision_only = c.strict_vision_only;
        cfg.attack_contrastive_only = c.attack_contrastive_only;
        cfg.clean_mix = c.clean_mix;
        Ok(cfg)
    }

    pub fn instruction_tune_config(&self) -> Result<InstructionTuneConfig> {
        let c = self.captioner_section()?;
        Ok(InstructionTuneConfig {
            attack_steps: if c.adversarial { c.attack_steps } else { 0 },
            epsilon: if c.adversarial { c.epsilon } else { 0.0 },
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            vision_lr_ratio: c.vision_lr_ratio,
            adversarial: c.adversarial,
            weight_decay: c.weight_decay,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_and_round_trips_through_resolved_form() {
        let c = RunConfig::parse("[run]\nseed = 3\n").unwrap();
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.data.n, 512);
        assert!(c.clip.is_none());
        let resolved = c.resolved_toml().unwrap();
        let back = RunConfig::parse(&resolved).unwrap();
        assert_eq!(back.run.seed, 3);
        assert_eq!(back.data.resolution, c.data.resolution);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[run]\nseed = 3\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = 3\n[clip]\nmode = \"clean\"\ntypo = 2\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = 3\n[data]\nres = 16\n").is_err());
    }

    #[test]
    fn clean_mode_zeroes_attacks_and_unfreezes_text() {
        let c = RunConfig::parse("[run]\nseed = 1\n[clip]\nmode = \"clean\"\n").unwrap();
        let t = c.clip_train_config().unwrap();
        assert!(t.stages.iter().all(|s| s.epsilon == 0.0 && s.attack_steps == 0 && !s.freeze_text));
    }

    #[test]
    fn adversarial_mode_keeps_the_staged_schedule_with_frozen_text() {
        let c = RunConfig::parse("[run]\nseed = 1\n[clip]\nmode = \"adversarial\"\n").unwrap();
        let t = c.clip_train_config().unwrap();
        assert_eq!(t.stages.len(), 3);
        assert!(t.stages.iter().all(|s| s.freeze_text));
        assert!(t.stages.iter().all(|s| s.epsilon > 0.0 && s.attack_steps > 0));
        let bad = RunConfig::parse("[run]\nseed = 1\n[clip]\nmode = \"x\"\n").unwrap();
        assert!(bad.clip_train_config().is_err());
    }

    #[test]
    fn explicit_stages_override_the_default_ramp() {
        let text = "[run]\nseed = 1\n[clip]\nmode = \"adversarial\"\nbatch_size = 4\n\
                    [[clip.stages]]\nresolution = 16\nattack_steps = 1\nepsilon = 0.01\nsamples = 8\n";
        let t = RunConfig::parse(text).unwrap().clip_train_config().unwrap();
        assert_eq!(t.stages.len(), 1);
        assert_eq!(t.stages[0].batch_size, 4);
        assert_eq!(t.stages[0].samples, 8);
        assert!(t.stages[0].freeze_text);
    }

    #[test]
    fn eval_section_defaults_fill_every_field() {
        let c = RunConfig::parse("[run]\nseed = 1\n[eval]\nsamples = 8\n").unwrap();
        let e = c.eval_section();
        assert_eq!(e.samples, 8);
        assert_eq!(e.steps, 20);
        assert!(e.data_file.is_none());
        let d = RunConfig::parse("[run]\nseed = 1\n").unwrap().eval_section();
        assert_eq!(d.samples, 64);
    }
}
