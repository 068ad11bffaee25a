//! Forward passes of the encoder-decoder, built on the autodiff graph.
//!
//! All paths (training, teacher-forced inspection, single-step inference)
//! run the same graph ops in the same order, so teacher forcing and
//! step-by-step decoding agree bit-exactly on coinciding histories.

use crate::corpus::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::numerics::{Graph, Tensor, Var};

/// The model's weight matrices as graph leaves.
pub struct ParamVars {
    pub enc_in: Var,
    pub enc_rec: Var,
    pub enc_bias: Var,
    pub embed: Var,
    pub dec_in: Var,
    pub dec_ctx: Var,
    pub dec_rec: Var,
    pub dec_bias: Var,
    pub asr_w: Var,
    pub asr_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl ParamVars {
    /// Insert all weights into `g`; `trainable` decides whether backward
    /// reports gradients for them.
    pub fn insert(g: &Graph, params: &ModelParams, trainable: bool) -> Self {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamVars {
            enc_in: leaf(&params.enc_in),
            enc_rec: leaf(&params.enc_rec),
            enc_bias: leaf(&params.enc_bias),
            embed: leaf(&params.embed),
            dec_in: leaf(&params.dec_in),
            dec_ctx: leaf(&params.dec_ctx),
            dec_rec: leaf(&params.dec_rec),
            dec_bias: leaf(&params.dec_bias),
            asr_w: leaf(&params.asr_w),
            asr_b: leaf(&params.asr_b),
            proj_w: leaf(&params.proj_w),
            proj_b: leaf(&params.proj_b),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Var)> {
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
}

/// Outputs of one decoder step.
pub struct StepOut {
    /// 1 x H decoder hidden state; this is the representation `h`.
    pub h: Var,
    /// 1 x 33 log-probabilities from the recognition head.
    pub logprobs: Var,
    /// 1 x P raw projection from the contrastive head.
    pub proj: Var,
}

/// One-layer tanh recurrence over the frames; returns the T x H matrix of
/// encoder states.
pub fn encode_graph(g: &Graph, p: &ParamVars, frames: &Tensor) -> Result<Var> {
    let t = frames.shape()[0];
    if t == 0 {
        return Err(Error::Contract("cannot encode zero frames".into()));
    }
    let frames = g.constant(frames.clone());
    let mut h = g.constant(Tensor::zeros(&[1, p.enc_bias.value().shape()[1]]));
    let mut states = Vec::with_capacity(t);
    for i in 0..t {
        let x = frames.row(i)?;
        let pre = x
            .matmul(&p.enc_in)?
            .add(&h.matmul(&p.enc_rec)?)?
            .add(&p.enc_bias)?;
        h = pre.tanh()?;
        states.push(h.clone());
    }
    g.stack_rows(&states)
}

/// One decoder step: attend over encoder states with the previous hidden
/// state, update the recurrent cell, and apply both heads.
pub fn decode_step_graph(
    p: &ParamVars,
    enc_states: &Var,
    prev_h: &Var,
    prev_token: usize,
) -> Result<StepOut> {
    if prev_token >= VOCAB_SIZE {
        return Err(Error::BadLabelIndex { idx: prev_token });
    }
    let t = enc_states.shape()[0];
    let emb = p.embed.row(prev_token)?;
    // dot-product attention against the previous decoder state
    let scores = enc_states.matmul(&prev_h.transpose()?)?.reshape(&[t])?;
    let weights = scores.softmax_log()?.exp()?.reshape(&[1, t])?;
    let context = weights.matmul(enc_states)?;
    let pre = emb
        .matmul(&p.dec_in)?
        .add(&context.matmul(&p.dec_ctx)?)?
        .add(&prev_h.matmul(&p.dec_rec)?)?
        .add(&p.dec_bias)?;
    let h = pre.tanh()?;
    let logprobs = h.matmul(&p.asr_w)?.add(&p.asr_b)?.softmax_log()?;
    let proj = h.matmul(&p.proj_w)?.add(&p.proj_b)?;
    Ok(StepOut { h, logprobs, proj })
}

/// Teacher-forced pass over a SOS..EOS target. Step `i` consumes ground
/// truth token `i-1`; the outputs have one row per target position after
/// SOS.
pub fn teacher_forced_graph(
    g: &Graph,
    p: &ParamVars,
    frames: &Tensor,
    target: &[usize],
) -> Result<Vec<StepOut>> {
    use crate::corpus::vocab::{EOS, SOS};
    if target.len() < 2 || target[0] != SOS || *target.last().unwrap() != EOS {
        return Err(Error::Contract(
            "target must begin with SOS and end with EOS".into(),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= VOCAB_SIZE) {
        return Err(Error::BadLabelIndex { idx: bad });
    }
    let enc_states = encode_graph(g, p, frames)?;
    let hidden = p.enc_bias.value().shape()[1];
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut steps = Vec::with_capacity(target.len() - 1);
    for &prev in &target[..target.len() - 1] {
        let out = decode_step_graph(p, &enc_states, &h, prev)?;
        h = out.h.clone();
        steps.push(out);
    }
    Ok(steps)
}

/// Value-level outputs of a teacher-forced pass.
pub struct ForwardResult {
    /// L x H decoder hidden states, one per target position after SOS.
    pub h: Tensor,
    /// L x 33 log-probabilities.
    pub asr_logprobs: Tensor,
    /// L x P raw projections (pre-normalization).
    pub proj: Tensor,
}

/// Run a teacher-forced pass outside of training and collect plain tensors.
pub fn forward_teacher_forced(
    frames: &Tensor,
    target: &[usize],
    params: &ModelParams,
) -> Result<ForwardResult> {
    let g = Graph::new();
    let p = ParamVars::insert(&g, params, false);
    let steps = teacher_forced_graph(&g, &p, frames, target)?;
    let hs: Vec<Var> = steps.iter().map(|s| s.h.clone()).collect();
    let lps: Vec<Var> = steps.iter().map(|s| s.logprobs.clone()).collect();
    let prs: Vec<Var> = steps.iter().map(|s| s.proj.clone()).collect();
    Ok(ForwardResult {
        h: g.stack_rows(&hs)?.value(),
        asr_logprobs: g.stack_rows(&lps)?.value(),
        proj: g.stack_rows(&prs)?.value(),
    })
}

/// Encoder states as a plain tensor (inference entry point).
pub fn encode(frames: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let g = Graph::new();
    let p = ParamVars::insert(&g, params, false);
    Ok(encode_graph(&g, &p, frames)?.value())
}

/// Single inference step on plain tensors: identical math to one
/// teacher-forced step.
pub fn decode_step(
    prev_token: usize,
    state: &Tensor,
    encoder_states: &Tensor,
    params: &ModelParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = Graph::new();
    let p = ParamVars::insert(&g, params, false);
    let enc = g.constant(encoder_states.clone());
    let prev_h = g.constant(state.clone());
    let out = decode_step_graph(&p, &enc, &prev_h, prev_token)?;
    Ok((out.h.value(), out.logprobs.value(), out.h.value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{EOS, SOS};
    use crate::model::params::ModelConfig;

    fn tiny() -> (ModelParams, Tensor) {
        let config = ModelConfig {
            feat: 6,
            hidden: 8,
            embed: 5,
            proj: 4,
        };
        let params = ModelParams::init(&config, 7).unwrap();
        let frames = Tensor::from_vec(
            &[3, 6],
            (0..18).map(|v| (v as f64) * 0.05 - 0.4).collect(),
        )
        .unwrap();
        (params, frames)
    }

    #[test]
    fn encode_zero_frame_zero_weights_gives_zero_state() {
        let config = ModelConfig {
            feat: 4,
            hidden: 5,
            embed: 3,
            proj: 2,
        };
        let mut params = ModelParams::init(&config, 0).unwrap();
        for (_, t) in params.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let frames = Tensor::zeros(&[1, 4]);
        let enc = encode(&frames, &params).unwrap();
        assert_eq!(enc.data(), &[0.0; 5]);
    }

    #[test]
    fn encode_output_shape() {
        let (params, frames) = tiny();
        let enc = encode(&frames, &params).unwrap();
        assert_eq!(enc.shape(), &[3, 8]);
    }

    #[test]
    fn encode_matches_hand_unrolled_recurrence() {
        let (params, frames) = tiny();
        let enc = encode(&frames, &params).unwrap();
        // manual unroll with raw loops
        let (d, h) = (6, 8);
        let mut state = vec![0.0f64; h];
        for t in 0..3 {
            let x = frames.row(t);
            let mut pre = vec![0.0f64; h];
            for j in 0..h {
                let mut s = 0.0;
                for i in 0..d {
                    s += x.data()[i] * params.enc_in.at2(i, j);
                }
                for i in 0..h {
                    s += state[i] * params.enc_rec.at2(i, j);
                }
                s += params.enc_bias.data()[j];
                pre[j] = s;
            }
            for j in 0..h {
                state[j] = pre[j].tanh();
            }
            for j in 0..h {
                assert!((enc.at2(t, j) - state[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_forced_shape_contract() {
        let (params, frames) = tiny();
        let target = vec![SOS, 0, 1, 2, EOS];
        let out = forward_teacher_forced(&frames, &target, &params).unwrap();
        assert_eq!(out.h.shape(), &[4, 8]);
        assert_eq!(out.asr_logprobs.shape(), &[4, VOCAB_SIZE]);
        assert_eq!(out.proj.shape(), &[4, 4]);
        // rows are log-distributions
        for r in 0..4 {
            let total: f64 = (0..VOCAB_SIZE)
                .map(|c| out.asr_logprobs.at2(r, c).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn teacher_forced_requires_sos_eos() {
        let (params, frames) = tiny();
        assert!(forward_teacher_forced(&frames, &[0, 1, EOS], &params).is_err());
        assert!(forward_teacher_forced(&frames, &[SOS, 0, 1], &params).is_err());
        assert!(forward_teacher_forced(&frames, &[SOS, 99, EOS], &params).is_err());
    }

    #[test]
    fn attention_uniform_when_state_is_zero() {
        let (params, frames) = tiny();
        let g = Graph::new();
        let p = ParamVars::insert(&g, &params, false);
        let enc = encode_graph(&g, &p, &frames).unwrap();
        let zero_h = g.constant(Tensor::zeros(&[1, 8]));
        let t = 3;
        let scores = enc.matmul(&zero_h.transpose().unwrap()).unwrap();
        let weights = scores
            .reshape(&[t])
            .unwrap()
            .softmax_log()
            .unwrap()
            .exp()
            .unwrap();
        for w in weights.value().data() {
            assert!((w - 1.0 / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_step_reproduces_teacher_forced_rows_exactly() {
        let (params, frames) = tiny();
        let target = vec![SOS, 2, 4, 1, EOS];
        let tf = forward_teacher_forced(&frames, &target, &params).unwrap();
        let enc = encode(&frames, &params).unwrap();
        let mut state = Tensor::zeros(&[1, 8]);
        for (i, &prev) in target[..target.len() - 1].iter().enumerate() {
            let (h, logprobs, new_state) = decode_step(prev, &state, &enc, &params).unwrap();
            for j in 0..8 {
                assert_eq!(h.at2(0, j), tf.h.at2(i, j), "bit-exact h at step {i}");
            }
            for c in 0..VOCAB_SIZE {
                assert_eq!(logprobs.at2(0, c), tf.asr_logprobs.at2(i, c));
            }
            state = new_state;
        }
    }

    #[test]
    fn decode_step_is_pure() {
        let (params, frames) = tiny();
        let enc = encode(&frames, &params).unwrap();
        let state = Tensor::zeros(&[1, 8]);
        let a = decode_step(3, &state, &enc, &params).unwrap();
        let b = decode_step(3, &state, &enc, &params).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn decode_step_matches_manual_unroll() {
        // One step with zero previous state: attention is uniform, so the
        // context is the mean encoder state; verify the cell output.
        let (params, frames) = tiny();
        let enc = encode(&frames, &params).unwrap();
        let state = Tensor::zeros(&[1, 8]);
        let token = 2usize;
        let (h, _, _) = decode_step(token, &state, &enc, &params).unwrap();

        let hdim = 8;
        let mut context = vec![0.0f64; hdim];
        for t in 0..3 {
            for j in 0..hdim {
                context[j] += enc.at2(t, j) / 3.0;
            }
        }
        let emb = params.embed.row(token);
        for j in 0..hdim {
            let mut s = 0.0;
            for i in 0..5 {
                s += emb.data()[i] * params.dec_in.at2(i, j);
            }
            for i in 0..hdim {
                s += context[i] * params.dec_ctx.at2(i, j);
            }
            // prev state is zero so dec_rec contributes nothing
            s += params.dec_bias.data()[j];
            assert!((h.at2(0, j) - s.tanh()).abs() < 1e-12);
        }
    }
}
