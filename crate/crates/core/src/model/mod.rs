//! The attention-based encoder-decoder model: stacked LSTMs with global
//! attention, with and without input-feeding.

pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod ops;
pub mod params;

pub use config::{param_count, part_of, tensor_layout, ModelConfig, Part, PartCounts, Precision, Variant};
pub use graph::{build_train_graph, Batch, Side, StepCtx, TrainGraph};
pub use ops::{
    attention_scores, context_decoded, context_vectors, decode_hidden, encode, lstm_cell,
    nll_loss, output_logprobs, output_probs, EncDecStates,
};
pub use params::{LstmLayerParams, ModelParams};
