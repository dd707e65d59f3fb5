use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationSet;
use crate::detector::{BackendFactory, DetectorBackend, DetectorConfig, JitterBackend, NoiseSpec, OracleBackend, ProcessAdapter};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::stain::{StainMatrix, TissueMaskParams};

use super::output::OutputFormat;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Ground truth read from `annotations`.
    #[default]
    Oracle,
    /// Ground truth with noise.
    Jitter,
    /// Child process speaking the adapter protocol.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub backend: BackendKind,
    pub annotations: Option<PathBuf>,
    /// Program and arguments of the external adapter.
    pub command: Vec<String>,
    pub num_queries: usize,
    pub top_k: usize,
    pub confidence_threshold: f64,
    pub class_names: Vec<String>,
    pub noise: NoiseSpec,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            backend: BackendKind::Oracle,
            annotations: None,
            command: Vec::new(),
            num_queries: d.num_queries,
            top_k: d.top_k,
            confidence_threshold: d.confidence_threshold,
            class_names: d.class_names,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub detections: Option<PathBuf>,
    /// Defaults to the extension of `detections`.
    pub format: Option<OutputFormat>,
    pub manifest: Option<PathBuf>,
    /// Sidecar mapping window ids to slide positions, for external adapters.
    pub window_index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tile_size: u32,
    pub tile_overlap: u32,
    pub window_size: u32,
    pub window_overlap: u32,
    /// Resolution detection runs at; the slide's own when unset.
    pub mpp_target: Option<f64>,
    pub min_tissue_fraction: f64,
    /// Tile workers; 0 picks the number of available cores.
    pub worker_count: usize,
    /// Windows per backend call.
    pub batch_size: usize,
    pub thumbnail_max_dim: u32,
    pub rng_seed: u64,
    pub stain_matrix: Option<StainMatrix>,
    pub tissue: TissueMaskParams,
    pub detector: DetectorSettings,
    pub output: OutputSettings,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: 1024,
            tile_overlap: 64,
            window_size: 256,
            window_overlap: 64,
            mpp_target: None,
            min_tissue_fraction: 0.05,
            worker_count: 0,
            batch_size: 16,
            thumbnail_max_dim: 2048,
            rng_seed: 0,
            stain_matrix: None,
            tissue: TissueMaskParams::default(),
            detector: DetectorSettings::default(),
            output: OutputSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_overlap != self.window_overlap {
            return Err(Error::Config(format!(
                "tile_overlap ({}) must equal window_overlap ({})",
                self.tile_overlap, self.window_overlap
            )));
        }
        if self.window_size == 0 || self.window_size > self.tile_size {
            return Err(Error::Config(format!(
                "window_size ({}) must be positive and at most tile_size ({})",
                self.window_size, self.tile_size
            )));
        }
        if self.tile_overlap >= self.window_size || !self.tile_overlap.is_multiple_of(2) {
            return Err(Error::Config("overlap must be even and smaller than the window".into()));
        }
        if let Some(m) = self.mpp_target {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config("mpp_target must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::Config("min_tissue_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.thumbnail_max_dim < 16 {
            return Err(Error::Config("thumbnail_max_dim must be at least 16".into()));
        }
        self.detector_config(0.25).validate()?;
        self.detector.noise.validate()
    }

    pub fn workers(&self) -> usize {
        if self.worker_count > 0 {
            self.worker_count
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn stains(&self) -> StainMatrix {
        self.stain_matrix.unwrap_or_else(StainMatrix::ruifrok_johnson)
    }

    /// Detector settings for a slide at `slide_mpp`.
    pub fn detector_config(&self, slide_mpp: f64) -> DetectorConfig {
        DetectorConfig {
            window_size: self.window_size,
            mpp: self.mpp_target.unwrap_or(slide_mpp),
            num_queries: self.detector.num_queries,
            top_k: self.detector.top_k,
            confidence_threshold: self.detector.confidence_threshold,
            class_names: self.detector.class_names.clone(),
        }
    }

    /// Builds the configured backend factory for a slide of `slide_dims`
    /// level-0 pixels at `slide_mpp`.
    pub fn backend_factory(&self, slide_dims: (u32, u32), slide_mpp: f64) -> Result<Box<dyn BackendFactory>> {
        let load = || -> Result<AnnotationSet> {
            let path = self
                .detector
                .annotations
                .as_ref()
                .ok_or_else(|| Error::Config("the oracle and jitter backends need detector.annotations".into()))?;
            AnnotationSet::read_jsonl(path)
        };
        match self.detector.backend {
            BackendKind::Oracle => {
                let oracle = OracleBackend::new(&load()?);
                Ok(Box::new(move |_: usize| -> Result<Box<dyn DetectorBackend>> { Ok(Box::new(oracle.clone())) }))
            }
            BackendKind::Jitter => {
                let noise = NoiseSpec {
                    rng_seed: self.rng_seed,
                    ..self.detector.noise.clone()
                };
                let classes = self.detector.class_names.len() as u32;
                let jitter = JitterBackend::new(&load()?, &noise, classes, slide_dims)?;
                Ok(Box::new(move |_: usize| -> Result<Box<dyn DetectorBackend>> { Ok(Box::new(jitter.clone())) }))
            }
            BackendKind::External => {
                if self.detector.command.is_empty() {
                    return Err(Error::Config("the external backend needs detector.command".into()));
                }
                let command = self.detector.command.clone();
                let cfg = self.detector_config(slide_mpp);
                let index = self.output.window_index.clone();
                Ok(Box::new(move |_: usize| -> Result<Box<dyn DetectorBackend>> {
                    Ok(Box::new(ProcessAdapter::spawn(&command, &cfg, index.as_deref())?))
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "tile_size = 512\nmpp_target = 0.5\n[detector]\nbackend = \"jitter\"\n[detector.noise]\ndrop_prob = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.tile_size, 512);
        assert_eq!(cfg.window_size, 256);
        assert_eq!(cfg.mpp_target, Some(0.5));
        assert_eq!(cfg.detector.backend, BackendKind::Jitter);
        assert_eq!(cfg.detector.noise.drop_prob, 0.2);
        assert_eq!(cfg.detector.noise.jitter_sigma, NoiseSpec::default().jitter_sigma);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(PipelineConfig::from_toml_str("tile_sise = 3").is_err());
        let mismatch = PipelineConfig {
            window_overlap: 32,
            ..Default::default()
        };
        assert!(matches!(mismatch.validate(), Err(Error::Config(_))));
        let big_window = PipelineConfig {
            window_size: 2048,
            ..Default::default()
        };
        assert!(big_window.validate().is_err());
        let no_ann = PipelineConfig::default();
        assert!(no_ann.backend_factory((10, 10), 0.25).is_err());
        let no_cmd = PipelineConfig {
            detector: DetectorSettings {
                backend: BackendKind::External,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(no_cmd.backend_factory((10, 10), 0.25).is_err());
    }
}
