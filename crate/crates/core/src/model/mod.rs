//! Encoder–decoder transformer with language-ID tokens at position 0 of
//! both the encoder and the decoder input.

mod config;
mod forward;
mod infer;
mod params;

pub use config::ModelConfig;
pub use forward::{
    bind, decoder_forward, encoder_forward, positions, DecoderOut, Dropout, EncoderOut, Padded,
};
pub use infer::{
    decode_step, decode_teacher_forced, encode, DecoderState, EncodedSource, IncrementalDecoder,
    StepOutput,
};
pub use params::{init_params, ModelParams};
