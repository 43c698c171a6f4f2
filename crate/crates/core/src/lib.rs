//! Document packing toolkit for continual pre-training.
//!
//! The crate is organised around the data flow of a packing run:
//!
//! - [`corpus`] loads pre-tokenized documents and the per-question document
//!   groups that drive packing.
//! - [`packer`] turns groups into packed sequences and per-epoch batch plans.
//! - [`maskgen`] derives attention permissions and loss masks from segment IDs.
//! - [`stats`] accounts for padding, documents per batch and attention cost.
//! - [`evalharness`] parses structured recall generations and scores them.
//! - [`judgeclient`] asks a chat-completions endpoint whether an answer is correct.

pub mod corpus;
pub mod evalharness;
pub mod judgeclient;
pub mod maskgen;
pub mod packer;
pub mod stats;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use corpus::{Corpus, Document, DocumentGroup, VocabConfig};
pub use packer::{EpochMode, EpochPlan, PackedSequence, PackingStrategy};
