//! Generative prompt learning for zero-shot cross-domain slot filling.
//!
//! Slot filling is recast as text generation: every slot type is turned into a
//! short question (`what is the <slot type> ?`), optionally followed by the
//! names of all known slot types, followed by the user query. A small
//! encoder-decoder transformer generates the slot values (or `none`). An
//! inverse task, entity span in and slot type out, warms the model up before
//! the main task. Only target-domain utterances are used at test time, so a
//! model trained on source domains is evaluated on a domain it never saw.
//!
//! Modules:
//! - [`corpus`]: utterances, BIO conversion, leave-one-domain-out splits,
//!   synthetic corpora.
//! - [`prompting`]: main and inverse task construction, template deletions,
//!   answer parsing.
//! - [`model`]: the transformer, prefix banks, training, greedy decoding.
//! - [`inference`]: per-utterance prediction and conflict resolution.
//! - [`eval`]: slot F1 and the experiment protocols.
//! - [`experiment`]: declarative experiment runner and report rendering.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod prompting;

pub use error::{Error, Result};
