use std::collections::BTreeMap;

use pdi_core::denoiser::ModelDims;
use pdi_core::nurse::NurseConfig;
use pdi_core::pdi::{MaskSource, PdiConfig};
use pdi_core::prompt::DecompositionConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything needed to reproduce a `generate` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub prompt: String,
    pub seed: u64,
    pub model_seed: u64,
    pub decomposition: String,
    pub steps: usize,
    pub share_fraction: f64,
    pub tau: f64,
    pub mask_source: String,
    pub lambda: f64,
    pub alpha: f64,
    pub nurse_steps: usize,
    pub nurse_window: usize,
    pub height: usize,
    pub width: usize,
    pub trace: bool,
    pub versions: BTreeMap<String, String>,
}

impl Default for RunManifest {
    fn default() -> Self {
        let cfg = PdiConfig::default();
        Self {
            prompt: String::new(),
            seed: 0,
            model_seed: cfg.model_seed,
            decomposition: cfg.decomposition.to_string(),
            steps: cfg.steps,
            share_fraction: cfg.share_fraction,
            tau: cfg.tau,
            mask_source: "branch".into(),
            lambda: cfg.nurse.lambda,
            alpha: cfg.nurse.alpha,
            nurse_steps: cfg.nurse.inner_steps,
            nurse_window: cfg.nurse.window,
            height: cfg.dims.height,
            width: cfg.dims.width,
            trace: false,
            versions: versions(),
        }
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("pdi-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("pdi-core".to_string(), pdi_core::VERSION.to_string()),
    ])
}

pub fn parse_mask_source(s: &str) -> Result<MaskSource, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "branch" => Ok(MaskSource::Branch),
        "first" => Ok(MaskSource::First),
        _ => Err(CliError::Usage(format!(
            "unknown mask source {s:?} (expected branch or first)"
        ))),
    }
}

impl RunManifest {
    pub fn decomposition(&self) -> Result<DecompositionConfig, CliError> {
        self.decomposition
            .parse()
            .map_err(|e: pdi_core::PdiError| CliError::Usage(e.to_string()))
    }

    pub fn config(&self, parallel: bool) -> Result<PdiConfig, CliError> {
        let cfg = PdiConfig {
            steps: self.steps,
            share_fraction: self.share_fraction,
            tau: self.tau,
            mask_source: parse_mask_source(&self.mask_source)?,
            nurse: NurseConfig {
                lambda: self.lambda,
                alpha: self.alpha,
                inner_steps: self.nurse_steps,
                window: self.nurse_window,
            },
            decomposition: self.decomposition()?,
            model_seed: self.model_seed,
            dims: ModelDims::with_resolution(self.height, self.width),
            parallel,
            record_latents: self.trace,
            ..PdiConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("manifest: {e}")))
    }
}
