use std::path::Path;

use serde::{Deserialize, Serialize};

use aei::bmm::BmmConfig;
use aei::dataio::{LabelConfig, SynthConfig};
use aei::eval::EvalConfig;
use aei::pipeline::TrainConfig;
use aei::postproc::PostprocConfig;
use aei::pvr::{PvrConfig, Spectators};

use crate::CliError;

/// Switches that remove parts of the snippet representation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub environment_only: bool,
    pub actors_only: bool,
    pub no_interaction: bool,
    pub no_selection: bool,
    pub no_fusion: bool,
}

impl AblationFlags {
    /// Applies the flags on top of `base`.
    pub fn apply(&self, base: &PvrConfig) -> Result<PvrConfig, CliError> {
        let exclusive = [self.environment_only, self.actors_only, self.no_interaction];
        if exclusive.iter().filter(|&&f| f).count() > 1 {
            return Err(CliError::Config(
                "ablation.environment_only, ablation.actors_only and ablation.no_interaction are mutually exclusive"
                    .into(),
            ));
        }
        let mut cfg = base.clone();
        if self.environment_only {
            cfg.spectators = Spectators::EnvironmentOnly;
        } else if self.actors_only {
            cfg.spectators = Spectators::ActorsOnly;
        } else if self.no_interaction {
            cfg.spectators = Spectators::NoInteraction;
        }
        if self.no_selection {
            cfg.select_main_actors = false;
        }
        if self.no_fusion {
            cfg.fuse_with_attention = false;
        }
        Ok(cfg)
    }
}

/// Protocol of the `ablate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Videos whose ids sort last form the validation split.
    pub validation_fraction: f64,
    /// Each configuration is trained from seeds `seed .. seed + num_seeds`
    /// and reported with its best validation AR@`an`.
    pub num_seeds: u64,
    pub an: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.25,
            num_seeds: 3,
            an: 10,
        }
    }
}

/// Everything a command needs. Omitted keys take the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds parameter initialization.
    pub seed: u64,
    pub synth: SynthConfig,
    pub labels: LabelConfig,
    pub pvr: PvrConfig,
    pub bmm: BmmConfig,
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Representation config after applying the ablation flags.
    pub fn effective_pvr(&self) -> Result<PvrConfig, CliError> {
        self.ablation.apply(&self.pvr)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.synth
            .validate()
            .map_err(|e| CliError::Config(format!("synth: {e}")))?;
        self.eval.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.labels.max_duration != self.bmm.max_duration {
            return bad(format!(
                "labels.max_duration ({}) must equal bmm.max_duration ({})",
                self.labels.max_duration, self.bmm.max_duration
            ));
        }
        let p = &self.pvr;
        let b = &self.bmm;
        for (name, v) in [
            ("pvr.embed_dim", p.embed_dim),
            ("pvr.mlp_hidden", p.mlp_hidden),
            ("pvr.feature_dim", p.feature_dim),
            ("pvr.num_heads", p.num_heads),
            ("bmm.max_duration", b.max_duration),
            ("bmm.hidden_dim", b.hidden_dim),
            ("bmm.head_hidden", b.head_hidden),
            ("bmm.num_samples", b.num_samples),
            ("ablate.num_seeds", self.ablate.num_seeds as usize),
            ("ablate.an", self.ablate.an),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !p.feature_dim.is_multiple_of(p.num_heads) {
            return bad("pvr.num_heads must divide pvr.feature_dim".into());
        }
        if !(self.train.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if !(self.train.lambda >= 0.0) {
            return bad("train.lambda must be non-negative".into());
        }
        if !(self.labels.boundary_ratio > 0.0 && self.labels.boundary_ratio <= 0.5) {
            return bad("labels.boundary_ratio must lie in (0, 0.5]".into());
        }
        let pp = &self.postproc;
        if !(pp.soft_sigma > 0.0) || !(0.0..=1.0).contains(&pp.nms_threshold) || pp.max_proposals == 0 {
            return bad("postproc: soft_sigma > 0, nms_threshold in [0, 1], max_proposals > 0 required".into());
        }
        if !(self.ablate.validation_fraction > 0.0 && self.ablate.validation_fraction < 1.0) {
            return bad("ablate.validation_fraction must lie in (0, 1)".into());
        }
        self.effective_pvr()?;
        Ok(())
    }
}
