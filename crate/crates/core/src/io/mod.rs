//! Hidden-state interchange format and corpus loaders.

pub mod corpus;
pub mod hidden;
pub mod tedh;

pub use corpus::{load_pairs, load_pairs_with, load_ted6k, load_ted6k_with, write_jsonl, CaptionPair, Category, FieldMap, Ted6kInstance};
pub use hidden::HiddenStates;
pub use tedh::{read_tedh, write_tedh, TedhError};
