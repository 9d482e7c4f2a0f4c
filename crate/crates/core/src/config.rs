//! Run configuration and its content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ad_generator::blocks::ResamplerConfig;
use crate::ad_generator::decode::DecodeConfig;
use crate::ad_generator::lm::{LmConfig, LmTrainConfig};
use crate::ad_generator::{GeneratorConfig, GeneratorTrainConfig};
use crate::char_recognizer::{RecognizerConfig, RecognizerTrainConfig};
use crate::evaluation::{Pairing, SimilarityBackend};
use crate::temporal_proposer::{ProposerConfig, ProposerTrainConfig, DEFAULT_STRIDE_S};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which time intervals the generator describes at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segments {
    /// Ground-truth AD intervals.
    #[default]
    Gt,
    /// Gaps the proposer marks as AD.
    Proposals,
}

impl std::str::FromStr for Segments {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gt" => Ok(Segments::Gt),
            "proposals" => Ok(Segments::Proposals),
            other => Err(ConfigError::Invalid(format!("unknown segments {other:?}, expected gt or proposals"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Holds `movies/<id>/` and the cast fixtures under `imdb/`.
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn movies(&self) -> PathBuf {
        self.data_root.join("movies")
    }

    pub fn cast_db(&self) -> PathBuf {
        self.data_root.join("imdb")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// The last movies in id order are held out for inference and metrics;
    /// with a single movie it serves both roles.
    pub eval_movies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharBankConfig {
    pub k: usize,
    pub max_cast: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerStage {
    pub model: RecognizerConfig,
    pub train: RecognizerTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerStage {
    pub model: ProposerConfig,
    pub train: ProposerTrainConfig,
    pub stride_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStage {
    pub model: GeneratorConfig,
    pub train: GeneratorTrainConfig,
    /// Text-only training of the LM before it is frozen; none keeps the
    /// random initialization.
    pub lm_pretrain: Option<LmTrainConfig>,
    pub decode: DecodeConfig,
    /// Feed previous AD sentences back as context.
    pub recurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub n: usize,
    pub similarity: SimilarityBackend,
    /// Word-vector table for the embedding backends; unknown words hash.
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub pairing: Pairing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub split: SplitConfig,
    pub charbank: CharBankConfig,
    pub recognizer: RecognizerStage,
    pub proposer: ProposerStage,
    pub generator: GeneratorStage,
    pub segments: Segments,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    /// Full-size models and training recipes.
    pub fn full(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            paths: Paths {
                data_root: data_root.into(),
                out_dir: out_dir.into(),
            },
            split: SplitConfig { eval_movies: 1 },
            charbank: CharBankConfig { k: 5, max_cast: 10 },
            recognizer: RecognizerStage {
                model: RecognizerConfig::default(),
                train: RecognizerTrainConfig {
                    warmup_steps: 100,
                    ..Default::default()
                },
            },
            proposer: ProposerStage {
                model: ProposerConfig::default(),
                train: ProposerTrainConfig {
                    warmup_steps: 100,
                    ..Default::default()
                },
                stride_s: DEFAULT_STRIDE_S,
            },
            generator: GeneratorStage {
                model: GeneratorConfig::default(),
                train: GeneratorTrainConfig {
                    warmup_steps: 100,
                    ..Default::default()
                },
                lm_pretrain: None,
                decode: DecodeConfig::default(),
                recurrent: true,
            },
            segments: Segments::Gt,
            evaluation: EvalConfig {
                k: 5,
                n: 16,
                similarity: SimilarityBackend::BertscoreStyle,
                embeddings: None,
                embedding_dim: 64,
                pairing: Pairing::Auto,
            },
        }
    }

    /// Small models sized for the fixture corpus on a CPU.
    pub fn desk(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self::full(data_root, out_dir);
        c.charbank.k = 3;
        c.recognizer.model = RecognizerConfig {
            proj_in: 32,
            proj_out: 64,
            num_blocks: 1,
            channels: 64,
            heads: 4,
            ff_dim: 128,
            threshold: 0.5,
        };
        c.recognizer.train = RecognizerTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 10,
            weight_decay: 0.01,
        };
        c.proposer.model = ProposerConfig {
            visual_dim: 32,
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            ..ProposerConfig::default()
        };
        c.proposer.train = ProposerTrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 10,
            weight_decay: 0.01,
        };
        c.generator.model = GeneratorConfig {
            lm: LmConfig {
                vocab_size: 0,
                dim: 64,
                layers: 2,
                heads: 4,
                ff_dim: 128,
                max_len: 160,
            },
            resampler: ResamplerConfig {
                num_latents: 4,
                num_blocks: 1,
                channels: 64,
                heads: 4,
                ff_dim: 128,
                proj_in: 32,
            },
            xattn_heads: 4,
            xattn_ff_dim: 128,
            ..GeneratorConfig::default()
        };
        c.generator.train = GeneratorTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 10,
            ..GeneratorTrainConfig::default()
        };
        c.generator.lm_pretrain = Some(LmTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 10,
        });
        c.generator.decode = DecodeConfig {
            beam_size: 3,
            max_tokens: 16,
            greedy: false,
        };
        c.evaluation.n = 8;
        c.evaluation.k = 3;
        c
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_slice(&raw).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json = self.to_json();
        fs::write(path, json).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.charbank.k == 0 {
            return bad("charbank.k must be positive".into());
        }
        if self.evaluation.k == 0 || self.evaluation.k > self.evaluation.n {
            return bad(format!("need 1 <= k <= n, got k={} n={}", self.evaluation.k, self.evaluation.n));
        }
        if !(self.proposer.stride_s > 0.0) {
            return bad("proposer.stride_s must be positive".into());
        }
        if self.recognizer.model.proj_in != self.proposer.model.visual_dim
            || self.recognizer.model.proj_in != self.generator.model.resampler.proj_in
        {
            return bad(format!(
                "feature width differs between stages: recognizer {}, proposer {}, generator {}",
                self.recognizer.model.proj_in, self.proposer.model.visual_dim, self.generator.model.resampler.proj_in
            ));
        }
        self.recognizer.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.proposer.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON with paths and the inference segment
    /// source blanked: the same trained run in another directory, or
    /// described on other segments, hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths {
            data_root: PathBuf::new(),
            out_dir: PathBuf::new(),
        };
        c.segments = Segments::Gt;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
