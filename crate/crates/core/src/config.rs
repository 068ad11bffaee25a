//! Experiment configuration: a flat-sectioned `key = value` text format,
//! strict about unknown sections and keys, with a writer that emits the
//! fully resolved configuration (defaults filled in) next to every run's
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::corpus::CorpusConfig;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{AugChoice, MatrixConfig, Shot, Stage, TrainConfig, TrainMode};

/// Environment variable that overrides `[output] dir`.
pub const OUTPUT_ENV: &str = "CLASR_OUT";

/// Per-stage training keys (the stage/mode slots are filled at run time).
#[derive(Debug, Clone, PartialEq)]
pub struct StageKeys {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub tau: f64,
    pub pair_cap: usize,
}

impl StageKeys {
    pub fn pretrain_defaults() -> Self {
        StageKeys {
            learning_rate: 2.83e-4,
            batch_size: 16,
            max_epochs: 6,
            patience: 5,
            eval_interval: 50,
            tau: crate::contrast::DEFAULT_TAU,
            pair_cap: crate::contrast::DEFAULT_PAIR_CAP,
        }
    }

    pub fn finetune_defaults() -> Self {
        StageKeys {
            learning_rate: 8e-5,
            max_epochs: 4,
            ..StageKeys::pretrain_defaults()
        }
    }

    pub fn to_train_config(&self, mode: TrainMode, stage: Stage, train_seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_stage(mode, stage, train_seed);
        cfg.learning_rate = self.learning_rate;
        cfg.batch_size = self.batch_size;
        cfg.max_epochs = self.max_epochs;
        cfg.patience = self.patience;
        cfg.eval_interval = self.eval_interval;
        cfg.tau = self.tau;
        cfg.pair_cap = self.pair_cap;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: StageKeys,
    pub finetune: StageKeys,
    pub decode: DecodeConfig,
    pub matrix: MatrixConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageKeys::pretrain_defaults(),
            finetune: StageKeys::finetune_defaults(),
            decode: DecodeConfig::default(),
            matrix: MatrixConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_usize(section: &str, key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        Error::Config(format!("{section}.{key}: `{value}` is not a non-negative integer"))
    })
}

fn parse_u64(section: &str, key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: `{value}` is not an integer")))
}

fn parse_f64(section: &str, key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: `{value}` is not a number")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{section}.{key}: `{value}` is not `true` or `false`"
        ))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse the sectioned format, starting from defaults. Unknown
    /// sections and keys are rejected with the offending name.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "corpus" | "augment" | "model" | "train.pretrain" | "train.finetune"
                    | "decode" | "matrix" | "output" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "unknown section `[{other}]` (line {})",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {} is not `key = value`: `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "key `{key}` appears before any [section] (line {})",
                    lineno + 1
                )));
            }
            cfg.apply(&section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{section}.{key}`"));
        match section {
            "corpus" => {
                let c = &mut self.corpus;
                match key {
                    "feature_dim" => c.feature_dim = parse_usize(section, key, value)?,
                    "lexicon_size" => c.lexicon_size = parse_usize(section, key, value)?,
                    "word_len_min" => c.word_len.0 = parse_usize(section, key, value)?,
                    "word_len_max" => c.word_len.1 = parse_usize(section, key, value)?,
                    "words_per_sentence_min" => {
                        c.words_per_sentence.0 = parse_usize(section, key, value)?
                    }
                    "words_per_sentence_max" => {
                        c.words_per_sentence.1 = parse_usize(section, key, value)?
                    }
                    "train_sentences" => c.train_sentences = parse_usize(section, key, value)?,
                    "val_sentences" => c.val_sentences = parse_usize(section, key, value)?,
                    "test_sentences" => c.test_sentences = parse_usize(section, key, value)?,
                    "train_strength" => c.train_strength = parse_f64(section, key, value)?,
                    "test_strength" => c.test_strength = parse_f64(section, key, value)?,
                    "voice_strength" => c.voice_strength = parse_f64(section, key, value)?,
                    "bias_scale" => c.bias_scale = parse_f64(section, key, value)?,
                    "duration_min" => c.duration_range.0 = parse_usize(section, key, value)?,
                    "duration_max" => c.duration_range.1 = parse_usize(section, key, value)?,
                    "noise_sigma" => c.noise_sigma = parse_f64(section, key, value)?,
                    "master_seed" => c.master_seed = parse_u64(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "augment" => {
                let a = &mut self.augment;
                match key {
                    "noise_prob" => a.noise_prob = parse_f64(section, key, value)?,
                    "noise_scale" => a.noise_scale = parse_f64(section, key, value)?,
                    "specaug_prob" => a.specaug_prob = parse_f64(section, key, value)?,
                    "freq_mask_width" => a.freq_mask_width = parse_usize(section, key, value)?,
                    "time_mask_width" => a.time_mask_width = parse_usize(section, key, value)?,
                    "altvoice_prob" => a.altvoice_prob = parse_f64(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "model" => {
                let m = &mut self.model;
                match key {
                    "feat" => m.feat = parse_usize(section, key, value)?,
                    "hidden" => m.hidden = parse_usize(section, key, value)?,
                    "embed" => m.embed = parse_usize(section, key, value)?,
                    "proj" => m.proj = parse_usize(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "train.pretrain" | "train.finetune" => {
                let s = if section == "train.pretrain" {
                    &mut self.pretrain
                } else {
                    &mut self.finetune
                };
                match key {
                    "learning_rate" => s.learning_rate = parse_f64(section, key, value)?,
                    "batch_size" => s.batch_size = parse_usize(section, key, value)?,
                    "max_epochs" => s.max_epochs = parse_usize(section, key, value)?,
                    "patience" => s.patience = parse_usize(section, key, value)?,
                    "eval_interval" => s.eval_interval = parse_usize(section, key, value)?,
                    "tau" => s.tau = parse_f64(section, key, value)?,
                    "pair_cap" => s.pair_cap = parse_usize(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "decode" => {
                let d = &mut self.decode;
                match key {
                    "beam_size" => d.beam_size = parse_usize(section, key, value)?,
                    "lambda" => d.lambda = parse_f64(section, key, value)?,
                    "max_len" => d.max_len = parse_usize(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "matrix" => {
                let m = &mut self.matrix;
                match key {
                    "modes" => {
                        m.modes = value
                            .split(',')
                            .map(|s| TrainMode::parse(s.trim()))
                            .collect::<Result<_>>()?
                    }
                    "augmentations" => {
                        m.augmentations = value
                            .split(',')
                            .map(|s| AugChoice::parse(s.trim()))
                            .collect::<Result<_>>()?
                    }
                    "shots" => {
                        m.shots = value
                            .split(',')
                            .map(|s| Shot::parse(s.trim()))
                            .collect::<Result<_>>()?
                    }
                    "holdout_per_test_accent" => {
                        m.holdout_per_test_accent = parse_usize(section, key, value)?
                    }
                    "full_shot_max_epochs" => {
                        m.full_shot_max_epochs = parse_usize(section, key, value)?
                    }
                    "parallel" => m.parallel = parse_bool(section, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "output" => match key {
                "dir" => self.output_dir = PathBuf::from(value),
                _ => return Err(unknown()),
            },
            other => return Err(Error::Config(format!("unknown section `[{other}]`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.augment.validate(self.corpus.feature_dim)?;
        self.model.validate()?;
        if self.model.feat != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "model.feat ({}) must equal corpus.feature_dim ({})",
                self.model.feat, self.corpus.feature_dim
            )));
        }
        self.decode.validate()?;
        self.matrix.validate()?;
        Ok(())
    }

    /// Serialize the fully resolved configuration in the same format the
    /// parser accepts. `parse(to_text(cfg)) == cfg`.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let a = &self.augment;
        let m = &self.model;
        let d = &self.decode;
        let x = &self.matrix;
        let stage = |name: &str, s: &StageKeys| {
            format!(
                "[{name}]\nlearning_rate = {}\nbatch_size = {}\nmax_epochs = {}\npatience = {}\neval_interval = {}\ntau = {}\npair_cap = {}\n\n",
                s.learning_rate, s.batch_size, s.max_epochs, s.patience, s.eval_interval, s.tau, s.pair_cap
            )
        };
        let mut out = String::new();
        out.push_str(&format!(
            "[corpus]\nfeature_dim = {}\nlexicon_size = {}\nword_len_min = {}\nword_len_max = {}\nwords_per_sentence_min = {}\nwords_per_sentence_max = {}\ntrain_sentences = {}\nval_sentences = {}\ntest_sentences = {}\ntrain_strength = {}\ntest_strength = {}\nvoice_strength = {}\nbias_scale = {}\nduration_min = {}\nduration_max = {}\nnoise_sigma = {}\nmaster_seed = {}\n\n",
            c.feature_dim, c.lexicon_size, c.word_len.0, c.word_len.1,
            c.words_per_sentence.0, c.words_per_sentence.1,
            c.train_sentences, c.val_sentences, c.test_sentences,
            c.train_strength, c.test_strength, c.voice_strength, c.bias_scale,
            c.duration_range.0, c.duration_range.1, c.noise_sigma, c.master_seed
        ));
        out.push_str(&format!(
            "[augment]\nnoise_prob = {}\nnoise_scale = {}\nspecaug_prob = {}\nfreq_mask_width = {}\ntime_mask_width = {}\naltvoice_prob = {}\n\n",
            a.noise_prob, a.noise_scale, a.specaug_prob, a.freq_mask_width,
            a.time_mask_width, a.altvoice_prob
        ));
        out.push_str(&format!(
            "[model]\nfeat = {}\nhidden = {}\nembed = {}\nproj = {}\n\n",
            m.feat, m.hidden, m.embed, m.proj
        ));
        out.push_str(&stage("train.pretrain", &self.pretrain));
        out.push_str(&stage("train.finetune", &self.finetune));
        out.push_str(&format!(
            "[decode]\nbeam_size = {}\nlambda = {}\nmax_len = {}\n\n",
            d.beam_size, d.lambda, d.max_len
        ));
        out.push_str(&format!(
            "[matrix]\nmodes = {}\naugmentations = {}\nshots = {}\nholdout_per_test_accent = {}\nfull_shot_max_epochs = {}\nparallel = {}\n\n",
            x.modes.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            x.augmentations.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            x.shots.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            x.holdout_per_test_accent, x.full_shot_max_epochs, x.parallel
        ));
        out.push_str(&format!("[output]\ndir = {}\n", self.output_dir.display()));
        out
    }

    /// Output directory, honoring the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var(OUTPUT_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Write the resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.txt"), self.to_text())?;
        Ok(())
    }
}
