//! Training configuration files: JSON overlays on the built-in defaults.
//!
//! A config names the scene it trains and overrides only the scalars it
//! cares about. Cameras and the timeline always come from the scene file;
//! a `--seed` flag beats the config's seed, which beats the default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use wabe_splat::editor::{EditSpec, PRESET_COUNT};
use wabe_splat::losses::LossWeights;
use wabe_splat::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Scene file this config trains, relative to the config's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_wabe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wabe_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsOverride>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub editor: Option<EditorOverride>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binding: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: ConfigFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config
            .check()
            .with_context(|| format!("validating {}", path.display()))?;
        Ok(config)
    }

    /// The scene path, resolved relative to where the config file lives.
    pub fn scene_path(&self, config_path: &Path) -> Option<PathBuf> {
        let scene = self.scene.as_ref()?;
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        Some(base.join(scene))
    }

    /// Overlays this file's settings onto `base`. Scene-derived fields
    /// (cameras, timeline) are untouched.
    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        let defaults_weights = base.weights;
        let defaults_editor = base.editor;
        let weights = self.weights.as_ref().map_or(defaults_weights, |w| LossWeights {
            recon: w.recon.unwrap_or(defaults_weights.recon),
            adversarial_d: w.adversarial_d.unwrap_or(defaults_weights.adversarial_d),
            adversarial_g: w.adversarial_g.unwrap_or(defaults_weights.adversarial_g),
            binding: w.binding.unwrap_or(defaults_weights.binding),
        });
        let editor = self.editor.as_ref().map_or(defaults_editor, |e| EditSpec {
            prompt_id: e.prompt_id.unwrap_or(defaults_editor.prompt_id),
            jitter_sigma: e.jitter_sigma.unwrap_or(defaults_editor.jitter_sigma),
            seed: e.seed.unwrap_or(defaults_editor.seed),
        });
        TrainConfig {
            beta_wabe: self.beta_wabe.unwrap_or(base.beta_wabe),
            weights,
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            iterations: self.iterations.unwrap_or(base.iterations),
            adam_beta1: self.adam_beta1.unwrap_or(base.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(base.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(base.adam_eps),
            seed: self.seed.unwrap_or(base.seed),
            adversarial_enabled: self.adversarial_enabled.unwrap_or(base.adversarial_enabled),
            wabe_enabled: self.wabe_enabled.unwrap_or(base.wabe_enabled),
            editor,
            cameras: base.cameras,
            timeline: base.timeline,
        }
    }

    fn check(&self) -> Result<()> {
        let nonneg = |name: &str, v: Option<f64>| -> Result<()> {
            if let Some(v) = v {
                ensure!(v.is_finite() && v >= 0.0, "{name} must be finite and >= 0");
            }
            Ok(())
        };
        nonneg("learning_rate", self.learning_rate)?;
        nonneg("beta_wabe", self.beta_wabe)?;
        nonneg("adam_eps", self.adam_eps)?;
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if let Some(v) = v {
                ensure!((0.0..1.0).contains(&v), "{name} must be in [0, 1)");
            }
        }
        if let Some(w) = &self.weights {
            nonneg("weights.recon", w.recon)?;
            nonneg("weights.adversarial_d", w.adversarial_d)?;
            nonneg("weights.adversarial_g", w.adversarial_g)?;
            nonneg("weights.binding", w.binding)?;
        }
        if let Some(e) = &self.editor {
            nonneg("editor.jitter_sigma", e.jitter_sigma)?;
            if let Some(id) = e.prompt_id {
                ensure!(
                    id < PRESET_COUNT,
                    "editor.prompt_id {id} out of range (presets 0..{})",
                    PRESET_COUNT - 1
                );
            }
        }
        Ok(())
    }
}
