//! BERT-style encoder `F_θ = P ∘ B_L ∘ … ∘ B_1 ∘ E` with post-layernorm
//! blocks, a tanh pooler over the first token, and task heads.

mod config;
mod head;
mod model;
mod params;

pub use config::ModelConfig;
pub use head::{argmax, HeadKind, TaskHead};
pub use model::{
    attention, bind_params, block_forward, block_graph, encode, encode_hidden, encoder_graph,
    validate_tokens, BoundParams, EncoderNodes,
};
pub use params::{
    block_matrix_name, canonical_layout, init_model, is_layernorm_gain, is_weight_matrix,
    InitScheme, ParameterSet, BLOCK_MATRIX_ROLES,
};
