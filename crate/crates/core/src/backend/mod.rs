//! Masked language model backbone: vocabulary, tokenizers, parameter
//! storage, the toy transformer and checkpoint archives.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod transformer;
pub mod vocab;

pub use params::{ArraySpec, ParamId, ParameterStore};
pub use transformer::{HiddenStates, MaskedLanguageModel, ModelConfig, ToyTransformer};
pub use vocab::{TokenId, TokenSequence, Tokenizer, Vocabulary, WhitespaceTokenizer};
