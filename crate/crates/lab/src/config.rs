//! Run configuration: one TOML file with a section per concern.
//!
//! Every section is optional and every missing key takes its default, so an
//! empty file is a valid configuration. Unknown keys are rejected. The fully
//! resolved configuration is written next to the run's outputs.

use std::path::{Path, PathBuf};

use flashgrpo_core::grpo::{AlignConfig, Method};
use flashgrpo_core::model::{Arch, DataSpec, PretrainConfig};
use flashgrpo_core::oracle::MIN_ENERGY_SAMPLES;
use flashgrpo_core::rewards::RewardSpec;
use flashgrpo_core::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// File name of the echoed effective configuration.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub reward: RewardSection,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub output: OutputSection,
    pub verify: VerifySection,
    pub compare: CompareSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSpec::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            reward: RewardSection::default(),
            pretrain: PretrainConfig::default(),
            align: AlignConfig::default(),
            output: OutputSection::default(),
            verify: VerifySection::default(),
            compare: CompareSection::default(),
        }
    }
}

/// Network shape. Data dimension and class count come from `[data]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub embed: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            width: a.width,
            depth: a.depth,
            embed: a.embed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Number of sampling transitions `T`.
    pub steps: usize,
    /// Noise level `a` of the SDE sampler.
    pub noise_scale: f64,
    pub t_floor: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 20,
            noise_scale: 0.7,
            t_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub sharpness: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { sharpness: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Also write every rollout group to `trajectories.jsonl`.
    pub dump_trajectories: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub identity_trials: usize,
    pub identity_tolerance: f64,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    /// Deliberately corrupt the reference scale of the gradient-identity
    /// check; the verification must then fail.
    pub lambda_fault: bool,
    pub energy_samples: usize,
    pub energy_permutations: usize,
    pub alpha: f64,
    /// Guidance scale of the marginal-preservation test.
    pub marginal_cfg_scale: f64,
    pub variance_groups: usize,
    /// Probe amplitude as a multiple of the plain reward's spread.
    pub probe_ratio: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            identity_trials: 100,
            identity_tolerance: 1e-6,
            fd_step: 1e-5,
            fd_tolerance: 1e-4,
            lambda_fault: false,
            energy_samples: 4096,
            energy_permutations: 500,
            alpha: 0.01,
            marginal_cfg_scale: 1.0,
            variance_groups: 2000,
            probe_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub methods: Vec<Method>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Flash, Method::Fast1],
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            LabError::Parse { message, .. } => LabError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses and validates config text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            dim: self.data.dim,
            width: self.model.width,
            depth: self.model.depth,
            classes: self.data.class_count(),
            embed: self.model.embed,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(
            self.schedule.steps,
            self.schedule.noise_scale,
            self.schedule.t_floor,
        )?)
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec::mode_preference(&self.data, self.reward.sharpness)
    }

    /// Checks every field, reporting the first offending one by its dotted
    /// path.
    pub fn validate(&self) -> Result<()> {
        core_check("data", self.data.validate())?;
        core_check("model", self.arch().validate())?;
        if self.model.depth == 0 {
            log::info!("model.depth = 0 gives a linear vector field");
        }
        if self.schedule.steps < 2 {
            return Err(LabError::field("schedule.steps", "must be at least 2"));
        }
        if !(self.schedule.noise_scale > 0.0) || !self.schedule.noise_scale.is_finite() {
            return Err(LabError::field("schedule.noise_scale", "must be positive and finite"));
        }
        let s = &self.schedule;
        core_check("schedule.t_floor", NoiseSchedule::new(s.steps, s.noise_scale, s.t_floor).map(|_| ()))?;
        core_check("reward.sharpness", self.reward_spec().validate())?;
        core_check("pretrain", self.pretrain.validate())?;
        if !self.pretrain.loss_threshold.is_finite() {
            return Err(LabError::field("pretrain.loss_threshold", "must be finite"));
        }
        self.validate_align()?;
        self.validate_verify()?;
        if self.compare.methods.is_empty() {
            return Err(LabError::field("compare.methods", "must list at least one method"));
        }
        for (i, m) in self.compare.methods.iter().enumerate() {
            if self.compare.methods[..i].contains(m) {
                return Err(LabError::field("compare.methods", format!("{m} is listed twice")));
            }
        }
        Ok(())
    }

    fn validate_align(&self) -> Result<()> {
        let a = &self.align;
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(LabError::field(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("align.batch_prompts", a.batch_prompts)?;
        if a.group_size < 2 {
            return Err(LabError::field("align.group_size", format!("must be at least 2, got {}", a.group_size)));
        }
        if !(a.lr >= 0.0) || !a.lr.is_finite() {
            return Err(LabError::field("align.lr", "must be finite and non-negative"));
        }
        if !(a.eps_clip > 0.0 && a.eps_clip < 1.0) {
            return Err(LabError::field("align.eps_clip", "must lie in (0, 1)"));
        }
        if !(a.beta_kl >= 0.0) || !a.beta_kl.is_finite() {
            return Err(LabError::field("align.beta_kl", "must be finite and non-negative"));
        }
        if !(a.cfg_scale >= 0.0) || !a.cfg_scale.is_finite() {
            return Err(LabError::field("align.cfg_scale", "must be finite and non-negative"));
        }
        if !(a.std_floor >= 0.0) || !a.std_floor.is_finite() {
            return Err(LabError::field("align.std_floor", "must be finite and non-negative"));
        }
        if a.eval_every > 0 {
            positive("align.eval_per_class", a.eval_per_class)?;
            if a.eval_steps < 2 {
                return Err(LabError::field("align.eval_steps", "must be at least 2"));
            }
        }
        let eligible = self.schedule.steps;
        if a.method == Method::Flash && a.batch_prompts > eligible {
            return Err(LabError::field(
                "align.batch_prompts",
                format!("flash needs at most {eligible} prompts (one timestep stratum each)"),
            ));
        }
        core_check("align", a.validate())
    }

    fn validate_verify(&self) -> Result<()> {
        let v = &self.verify;
        if v.identity_trials == 0 {
            return Err(LabError::field("verify.identity_trials", "must be positive"));
        }
        for (field, x) in [
            ("verify.identity_tolerance", v.identity_tolerance),
            ("verify.fd_step", v.fd_step),
            ("verify.fd_tolerance", v.fd_tolerance),
            ("verify.probe_ratio", v.probe_ratio),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(LabError::field(field, "must be positive and finite"));
            }
        }
        if v.energy_samples < MIN_ENERGY_SAMPLES {
            return Err(LabError::field(
                "verify.energy_samples",
                format!("must be at least {MIN_ENERGY_SAMPLES}"),
            ));
        }
        if v.energy_permutations == 0 {
            return Err(LabError::field("verify.energy_permutations", "must be positive"));
        }
        if !(v.alpha > 0.0 && v.alpha < 1.0) {
            return Err(LabError::field("verify.alpha", "must lie in (0, 1)"));
        }
        if !(v.marginal_cfg_scale >= 0.0) || !v.marginal_cfg_scale.is_finite() {
            return Err(LabError::field("verify.marginal_cfg_scale", "must be finite and non-negative"));
        }
        if v.variance_groups == 0 {
            return Err(LabError::field("verify.variance_groups", "must be positive"));
        }
        Ok(())
    }
}

fn core_check(field: &str, r: flashgrpo_core::Result<()>) -> Result<()> {
    r.map_err(|e| LabError::field(field, e))
}
