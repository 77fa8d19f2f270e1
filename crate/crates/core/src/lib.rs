//! Diversity-aware exemplar selection for in-context intent and dialogue
//! state prediction.
//!
//! The pipeline encodes the dialogue context, retrieves a hybrid
//! dense/lexical candidate pool from an exemplar memory, selects a
//! label- and text-diverse subset, composes a token-budgeted prompt and
//! decides among the exposed labels with a yes/no verifier.

pub mod budget;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod memory;
pub mod prompt;
pub mod retrieval;
pub mod select;
pub mod text;
pub mod verifier;

pub use encoder::{encode_context, DialogueContext, EncoderWeights, Turn};
pub use error::{Error, Result, Stage};
pub use memory::{Bm25Params, Exemplar, Memory};
pub use prompt::{BudgetConfig, Permutation, Prompt, PromptComposer};
pub use retrieval::{retrieve_pool, Candidate, Pool, RetrievalConfig};
pub use select::{select, Method, SelectedSet, SelectionConfig, SelectionStatus};
pub use verifier::{score_labels, MockVerifier, Verifier, VerifierOutput};
