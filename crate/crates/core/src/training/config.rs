//! Line-oriented `key = value` configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::DEFAULT_HIDDEN;
use crate::encoder::ApmEncoderConfig;
use crate::error::ensure;
use crate::fusion::{FusionConfig, DEFAULT_LAYERS, DEFAULT_N_A, DEFAULT_TAU};
use crate::losses::LossConfig;
use crate::rvq::{DEFAULT_CODEBOOK_SIZE, DEFAULT_STAGES};
use crate::{Error, Result};

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        ensure!(!k.is_empty(), Format, "config line {}: empty key", n + 1);
        if out.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(Error::Format(format!("config line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

/// Optimizer and loop settings for one gradient-trained stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a better validation SRCC before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            epochs: 100,
            batch_size: 8,
            patience: 20,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Argument, "lr must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), Argument, "momentum must lie in [0, 1)");
        ensure!(self.batch_size >= 1, Argument, "batch size must be at least 1");
        LossConfig::new(self.loss.alpha, self.loss.beta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Every system contributes utterances to each split.
    Utterance,
    /// Whole systems are held out.
    System,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utterance" => Ok(Self::Utterance),
            "system" => Ok(Self::System),
            _ => Err(Error::Argument(format!("split must be `utterance` or `system`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RvqPool {
    /// Features of the undegraded signals when available.
    Clean,
    /// Features of the training split.
    Train,
}

impl FromStr for RvqPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "train" => Ok(Self::Train),
            _ => Err(Error::Argument(format!("rvq.pool must be `clean` or `train`, got `{s}`"))),
        }
    }
}

/// Step size of the auditory stage; the pure L1 objective oscillates and
/// saturates the head at the fusion rate.
pub const APM_LR: f64 = 1e-4;

/// Every setting of the three-stage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub channels: usize,
    pub tdnn_channels: usize,
    pub attention_hidden: usize,
    pub apm: TrainConfig,
    pub apm_head_hidden: usize,
    pub rvq_codebook_size: usize,
    pub rvq_stages: usize,
    pub rvq_iterations: usize,
    pub rvq_pool: RvqPool,
    pub fusion: TrainConfig,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_tau: f64,
    pub fusion_n_a: usize,
    pub decoder_hidden: usize,
    /// Supervise every decoded row instead of only the pooled score.
    pub frame_level: bool,
    pub split: SplitMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: crate::cochlea::DEFAULT_CHANNELS,
            tdnn_channels: 128,
            attention_hidden: 64,
            apm: TrainConfig {
                lr: APM_LR,
                loss: LossConfig { alpha: 1.0, beta: 0.1 },
                ..TrainConfig::default()
            },
            apm_head_hidden: DEFAULT_HIDDEN,
            rvq_codebook_size: DEFAULT_CODEBOOK_SIZE,
            rvq_stages: DEFAULT_STAGES,
            rvq_iterations: 50,
            rvq_pool: RvqPool::Clean,
            fusion: TrainConfig::default(),
            fusion_layers: DEFAULT_LAYERS,
            fusion_heads: 1,
            fusion_tau: DEFAULT_TAU,
            fusion_n_a: DEFAULT_N_A,
            decoder_hidden: DEFAULT_HIDDEN,
            frame_level: false,
            split: SplitMode::Utterance,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("config `{key}`: cannot parse `{v}`")))
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    /// Applies overrides; unknown keys are rejected.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let k = k.as_str();
            match k {
                "seed" => self.seed = parse(k, v)?,
                "channels" => self.channels = parse(k, v)?,
                "tdnn_channels" => self.tdnn_channels = parse(k, v)?,
                "attention_hidden" => self.attention_hidden = parse(k, v)?,
                "apm.head_hidden" => self.apm_head_hidden = parse(k, v)?,
                "rvq.codebook_size" => self.rvq_codebook_size = parse(k, v)?,
                "rvq.stages" => self.rvq_stages = parse(k, v)?,
                "rvq.iterations" => self.rvq_iterations = parse(k, v)?,
                "rvq.pool" => self.rvq_pool = parse(k, v)?,
                "fusion.layers" => self.fusion_layers = parse(k, v)?,
                "fusion.heads" => self.fusion_heads = parse(k, v)?,
                "fusion.tau" => self.fusion_tau = parse(k, v)?,
                "fusion.n_a" => self.fusion_n_a = parse(k, v)?,
                "decoder.hidden" => self.decoder_hidden = parse(k, v)?,
                "frame_level" => self.frame_level = parse(k, v)?,
                "split" => self.split = parse(k, v)?,
                _ => {
                    let (stage, field) = k
                        .split_once('.')
                        .ok_or_else(|| Error::Argument(format!("unknown config key `{k}`")))?;
                    let tc = match stage {
                        "apm" => &mut self.apm,
                        "fusion" => &mut self.fusion,
                        _ => return Err(Error::Argument(format!("unknown config key `{k}`"))),
                    };
                    match field {
                        "lr" => tc.lr = parse(k, v)?,
                        "momentum" => tc.momentum = parse(k, v)?,
                        "epochs" => tc.epochs = parse(k, v)?,
                        "batch_size" => tc.batch_size = parse(k, v)?,
                        "patience" => tc.patience = parse(k, v)?,
                        "alpha" => tc.loss.alpha = parse(k, v)?,
                        "beta" => tc.loss.beta = parse(k, v)?,
                        _ => return Err(Error::Argument(format!("unknown config key `{k}`"))),
                    }
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 1, Argument, "channels must be positive");
        ensure!(
            self.tdnn_channels >= 1 && self.attention_hidden >= 1,
            Argument,
            "encoder widths must be positive"
        );
        ensure!(
            self.rvq_codebook_size >= 1 && self.rvq_stages >= 1,
            Argument,
            "codebook size and stage count must be positive"
        );
        self.apm.validate()?;
        self.fusion.validate()?;
        Ok(())
    }

    pub fn encoder(&self) -> ApmEncoderConfig {
        ApmEncoderConfig {
            d_f: self.channels,
            tdnn_channels: self.tdnn_channels,
            attention_hidden: self.attention_hidden,
        }
    }

    pub fn fusion_config(&self, d_s: usize, d_w: usize) -> FusionConfig {
        FusionConfig {
            n_a: self.fusion_n_a,
            d_s,
            d_w,
            l_layers: self.fusion_layers,
            tau: self.fusion_tau,
            heads: self.fusion_heads,
        }
    }

    /// Stage settings with the pipeline seed filled in.
    pub fn apm_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.apm }
    }

    pub fn fusion_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.fusion }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let cfg = PipelineConfig::from_text(
            "# small run\nseed = 7\nchannels=32\n\nfusion.lr = 0.01\napm.epochs = 3\nsplit = system\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.channels, 32);
        assert_eq!(cfg.fusion.lr, 0.01);
        assert_eq!(cfg.apm.epochs, 3);
        assert_eq!(cfg.split, SplitMode::System);
        assert_eq!(cfg.fusion_train().seed, 7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_kv("a = 1\na = 2"), Err(Error::Format(_))));
        assert!(matches!(parse_kv("novalue"), Err(Error::Format(_))));
        assert!(PipelineConfig::from_text("bogus = 1").is_err());
        assert!(PipelineConfig::from_text("fusion.bogus = 1").is_err());
        assert!(PipelineConfig::from_text("fusion.momentum = 1.0").is_err());
        assert!(PipelineConfig::from_text("apm.lr = abc").is_err());
    }
}
