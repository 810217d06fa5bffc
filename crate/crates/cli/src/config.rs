//! JSON run configuration: one file with `gen`, `encoder`, `model`, and
//! `train` sections. Every checkpoint embeds the complete resolved config,
//! so artifacts are self-describing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use shiftlab_core::encoder::{CnnEncoder, EncoderConfig, EncoderMode};
use shiftlab_core::error::{Error, Result};
use shiftlab_core::model::{SsasConfig, SsasModel};
use shiftlab_core::rng::{derive_seed, rng_from, STREAM_INIT};
use shiftlab_core::scene::GenConfig;
use shiftlab_core::tensor::Tensor;
use shiftlab_core::train::{Grounder, Net, TrainConfig};
use shiftlab_core::Real;
use shiftlab_core::baselines::{CooccurModel, SpatialShiftModel, VrdModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[value(rename_all = "lower")]
pub enum ModelKind {
    Ssas,
    Cooccur,
    Vrd,
    SpatialShift,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ssas => "ssas",
            ModelKind::Cooccur => "cooccur",
            ModelKind::Vrd => "vrd",
            ModelKind::SpatialShift => "spatialshift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssas" => Ok(ModelKind::Ssas),
            "cooccur" => Ok(ModelKind::Cooccur),
            "vrd" => Ok(ModelKind::Vrd),
            "spatialshift" => Ok(ModelKind::SpatialShift),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture selection plus the shift-stack shape knobs (only SSAS
/// reads the knobs; grid and channel width come from the encoder section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub stages: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub iterations: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = SsasConfig::default();
        ModelSection {
            kind: ModelKind::Ssas,
            stages: d.stages,
            kernel: d.kernel,
            hidden: d.hidden,
            iterations: d.iterations,
        }
    }
}

/// The whole run configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let encoder = EncoderConfig::oracle(14, gen.categories.len());
        FileConfig {
            gen,
            encoder,
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder.validate(self.gen.categories.len())?;
        self.train.validate()?;
        if self.model.kind == ModelKind::Ssas {
            self.ssas_config().validate()?;
        }
        Ok(())
    }

    pub fn ssas_config(&self) -> SsasConfig {
        SsasConfig {
            grid: self.encoder.grid,
            channels: self.encoder.channels,
            stages: self.model.stages,
            kernel: self.model.kernel,
            hidden: self.model.hidden,
            iterations: self.model.iterations,
        }
    }

    /// Instantiate the configured net with freshly initialized parameters.
    /// The spatial-shift baseline additionally needs the displacement
    /// statistics estimated from training scenes.
    pub fn build_net(
        &self,
        stat: Option<(Vec<Tensor<Real>>, Vec<bool>)>,
        seed: u64,
    ) -> Result<Net<Real>> {
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 0));
        let vocab = self.gen.categories.clone();
        let (grid, channels) = (self.encoder.grid, self.encoder.channels);
        Ok(match self.model.kind {
            ModelKind::Ssas => {
                Net::Ssas(SsasModel::new(self.ssas_config(), vocab, &mut rng)?)
            }
            ModelKind::Cooccur => Net::Cooccur(CooccurModel::new(grid, channels, vocab, &mut rng)),
            ModelKind::Vrd => Net::Vrd(VrdModel::new(grid, channels, vocab, &mut rng)),
            ModelKind::SpatialShift => {
                let (kernels, uniform) = stat.ok_or_else(|| {
                    Error::Config(
                        "the spatial-shift baseline needs displacement statistics \
                         estimated from training scenes"
                            .into(),
                    )
                })?;
                Net::SpatialShift(SpatialShiftModel::new(
                    grid, channels, vocab, kernels, uniform, &mut rng,
                )?)
            }
        })
    }

    /// Net plus trainable encoder when the config asks for one.
    pub fn build_grounder(
        &self,
        stat: Option<(Vec<Tensor<Real>>, Vec<bool>)>,
        seed: u64,
    ) -> Result<Grounder<Real>> {
        let net = self.build_net(stat, seed)?;
        Ok(match self.encoder.mode {
            EncoderMode::Oracle => Grounder::oracle(net),
            EncoderMode::Trainable => {
                let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 1));
                let enc = CnnEncoder::new(self.encoder.channels, &mut rng);
                Grounder::with_encoder(net, enc)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = FileConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: FileConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.model.kind, ModelKind::Ssas);
        assert_eq!(back.encoder.grid, 14);
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let cfg: FileConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3, "batch_size": 8, "learning_rate": 0.01, "mask_rate": 0.0, "queries_per_scene": 2, "seed": 1}}"#)
                .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.stages, 3);
        assert_eq!(cfg.gen.width, 64);
    }

    #[test]
    fn spatialshift_without_statistics_is_a_config_error() {
        let mut cfg = FileConfig::default();
        cfg.model.kind = ModelKind::SpatialShift;
        assert!(matches!(cfg.build_net(None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_channel_mismatch_is_rejected() {
        let mut cfg = FileConfig::default();
        cfg.encoder.channels = 7; // vocab is 9, oracle needs 10
        assert!(cfg.validate().is_err());
    }
}
