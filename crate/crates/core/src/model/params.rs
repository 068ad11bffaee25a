use rand::Rng;

use crate::corpus::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

/// Architecture dimensions: feature input D, recurrent hidden H, character
/// embedding E, contrastive projection P.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub feat: usize,
    pub hidden: usize,
    pub embed: usize,
    pub proj: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat: 20,
            hidden: 64,
            embed: 32,
            proj: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat == 0 || self.hidden == 0 || self.embed == 0 || self.proj == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable weights: encoder cell, decoder cell with attention
/// context, character embeddings, recognition head `g`, projection head `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// D x H input weights of the encoder cell.
    pub enc_in: Tensor,
    /// H x H recurrent weights of the encoder cell.
    pub enc_rec: Tensor,
    /// 1 x H encoder bias.
    pub enc_bias: Tensor,
    /// 33 x E character embedding table.
    pub embed: Tensor,
    /// E x H decoder input weights (consumes the previous character).
    pub dec_in: Tensor,
    /// H x H decoder context weights (consumes attention output).
    pub dec_ctx: Tensor,
    /// H x H decoder recurrent weights.
    pub dec_rec: Tensor,
    /// 1 x H decoder bias.
    pub dec_bias: Tensor,
    /// H x 33 recognition head.
    pub asr_w: Tensor,
    /// 1 x 33 recognition bias.
    pub asr_b: Tensor,
    /// H x P projection head.
    pub proj_w: Tensor,
    /// 1 x P projection bias.
    pub proj_b: Tensor,
}

/// Fixed order of the named weight matrices; checkpoints and optimizer
/// state follow this order.
pub const PARAM_NAMES: [&str; 12] = [
    "enc_in", "enc_rec", "enc_bias", "embed", "dec_in", "dec_ctx", "dec_rec", "dec_bias",
    "asr_w", "asr_b", "proj_w", "proj_b",
];

impl ModelParams {
    /// Expected shape of each named matrix for a given configuration.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(&'static str, [usize; 2])> {
        let (d, h, e, p) = (config.feat, config.hidden, config.embed, config.proj);
        vec![
            ("enc_in", [d, h]),
            ("enc_rec", [h, h]),
            ("enc_bias", [1, h]),
            ("embed", [VOCAB_SIZE, e]),
            ("dec_in", [e, h]),
            ("dec_ctx", [h, h]),
            ("dec_rec", [h, h]),
            ("dec_bias", [1, h]),
            ("asr_w", [h, VOCAB_SIZE]),
            ("asr_b", [1, VOCAB_SIZE]),
            ("proj_w", [h, p]),
            ("proj_b", [1, p]),
        ]
    }

    /// Seeded initialization: matrix entries uniform in (-s, s) with
    /// s = 1/sqrt(fan_in); biases start at zero.
    pub fn init(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h, e, _p) = (config.feat, config.hidden, config.embed, config.proj);
        let make = |name: &str, rows: usize, cols: usize, fan_in: usize| -> Tensor {
            let mut rng = seed::rng(init_seed, &[seed::tag("init"), seed::tag(name)]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-s..s))
                .collect::<Vec<f64>>();
            Tensor::from_vec(&[rows, cols], data).expect("init shape")
        };
        Ok(ModelParams {
            config: *config,
            enc_in: make("enc_in", d, h, d),
            enc_rec: make("enc_rec", h, h, h),
            enc_bias: Tensor::zeros(&[1, h]),
            embed: make("embed", VOCAB_SIZE, e, e),
            dec_in: make("dec_in", e, h, e),
            dec_ctx: make("dec_ctx", h, h, h),
            dec_rec: make("dec_rec", h, h, h),
            dec_bias: Tensor::zeros(&[1, h]),
            asr_w: make("asr_w", h, VOCAB_SIZE, h),
            asr_b: Tensor::zeros(&[1, VOCAB_SIZE]),
            proj_w: make("proj_w", h, config.proj, h),
            proj_b: Tensor::zeros(&[1, config.proj]),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc_in", &self.enc_in),
            ("enc_rec", &self.enc_rec),
            ("enc_bias", &self.enc_bias),
            ("embed", &self.embed),
            ("dec_in", &self.dec_in),
            ("dec_ctx", &self.dec_ctx),
            ("dec_rec", &self.dec_rec),
            ("dec_bias", &self.dec_bias),
            ("asr_w", &self.asr_w),
            ("asr_b", &self.asr_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc_in", &mut self.enc_in),
            ("enc_rec", &mut self.enc_rec),
            ("enc_bias", &mut self.enc_bias),
            ("embed", &mut self.embed),
            ("dec_in", &mut self.dec_in),
            ("dec_ctx", &mut self.dec_ctx),
            ("dec_rec", &mut self.dec_rec),
            ("dec_bias", &mut self.dec_bias),
            ("asr_w", &mut self.asr_w),
            ("asr_b", &mut self.asr_b),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let config = ModelConfig::default();
        let a = ModelParams::init(&config, 3).unwrap();
        let b = ModelParams::init(&config, 3).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&config, 4).unwrap();
        assert_ne!(a.enc_in, c.enc_in);
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let config = ModelConfig::default();
        let p = ModelParams::init(&config, 3).unwrap();
        let bound_enc = 1.0 / (config.feat as f64).sqrt();
        for v in p.enc_in.data() {
            assert!(v.abs() < bound_enc);
        }
        let bound_rec = 1.0 / (config.hidden as f64).sqrt();
        for v in p.dec_rec.data() {
            assert!(v.abs() < bound_rec);
        }
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        let config = ModelConfig {
            feat: 20,
            hidden: 64,
            embed: 32,
            proj: 16,
        };
        let p = ModelParams::init(&config, 0).unwrap();
        let (d, h, e, pr) = (20usize, 64usize, 32usize, 16usize);
        let expected = d * h
            + h * h
            + h
            + VOCAB_SIZE * e
            + e * h
            + h * h
            + h * h
            + h
            + h * VOCAB_SIZE
            + VOCAB_SIZE
            + h * pr
            + pr;
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn shapes_match_declared_expectations() {
        let config = ModelConfig::default();
        let p = ModelParams::init(&config, 1).unwrap();
        for (name, shape) in ModelParams::expected_shapes(&config) {
            let t = p.get(name).unwrap();
            assert_eq!(t.shape(), &shape[..], "matrix {name}");
        }
    }
}
