//! The stacked cross-modal encoder/decoder fusion network.

pub mod blocks;
mod config;
mod network;

pub use config::{Activation, ModelConfig, MAX_EMBED_DIM, MAX_STACKS};
pub use network::{
    argmax, param_count, DecoderParams, EncoderParams, FilterParams, ForwardTrace, FusionModel, HeadParams,
    StackOutput, StackParams, Stream, StreamParams,
};
