use std::path::Path;

use deformsplat::gradcheck::DEFAULT_STEP;
use deformsplat::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::TrainArgs;

/// Settings for `inpaint-sim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSettings {
    pub steps: usize,
    pub train_iters: usize,
    pub lr: f64,
    pub hidden: usize,
    pub head_dim: usize,
    /// Random occlusion boxes per training clip.
    pub train_clips: usize,
    pub seed: u64,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self {
            steps: deformsplat::inpaint::DEFAULT_SAMPLING_STEPS,
            train_iters: 200,
            lr: 1e-2,
            hidden: 8,
            head_dim: 4,
            train_clips: 8,
            seed: 0,
        }
    }
}

/// Settings for `gradcheck`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub splats: usize,
    pub res: usize,
    pub basis: usize,
    pub deform: bool,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            splats: 50,
            res: 32,
            basis: deformsplat::deform::DEFAULT_BASIS,
            deform: true,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub inpaint: InpaintSettings,
    pub gradcheck: GradcheckSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        parse_file(path)
    }
}

/// Reads TOML, or JSON when the extension is `.json`.
pub fn parse_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

pub fn override_train(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.iters {
        cfg.iterations = v;
        if cfg.densify_freeze_iters >= v {
            cfg.densify_freeze_iters = v.saturating_sub(1);
        }
    }
    if let Some(v) = a.lr {
        cfg.lr_init = v;
    }
    if let Some(v) = a.w_init {
        cfg.schedule.w_init = v;
    }
    if let Some(v) = a.w_final {
        cfg.schedule.w_final = v;
    }
    if let Some(v) = a.alpha {
        cfg.schedule.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.schedule.beta = v;
    }
    if let Some(v) = a.basis {
        cfg.basis = v;
    }
}
