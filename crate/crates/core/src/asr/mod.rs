//! Speaker-adapted encoder-decoder recognizer: the model under attack.

pub mod cer;
pub mod checkpoint;
pub mod model;
pub mod train;
pub mod vocab;

pub use cer::{cer, corpus_cer};
pub use checkpoint::{load_model, save_model};
pub use model::{
    decode_greedy, encode, first_step_posterior, grad_input, loss, AsrModel, Decoded, FeatureNorm, ModelConfig,
    PositionMask,
};
pub use train::{speaker_token_accuracy, train, train_examples, Example, TrainConfig, TrainReport};
pub use vocab::{LabelSequence, VocabSpec, EOS, PAD, SOS};
