//! The small attention encoder-decoder: a tanh recurrent encoder over
//! feature frames, a recurrent decoder with dot-product attention, and
//! two linear heads off the decoder state `h` — recognition (`g`, 33-way)
//! and contrastive projection (`f`, P-way).

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainerExtra};
pub use forward::{
    decode_step, decode_step_graph, encode, encode_graph, forward_teacher_forced,
    teacher_forced_graph, ForwardResult, ParamVars, StepOut,
};
pub use params::{ModelConfig, ModelParams, PARAM_NAMES};
