//! Core library: event-sequence ingestion and serialization, text enrichment
//! through a chat-completion gateway, a byte-level transformer language model,
//! pooled user embeddings and the holdout + cross-validation probe harness.

pub mod dataset;
pub mod embedder;
pub mod enrichment;
pub mod evaluator;
pub mod gateway;
pub mod schema;
pub mod serializer;
pub mod synthetic;
pub mod tensor;
pub mod tinylm;

pub use dataset::{load_dataset, validate_dataset, Dataset, Decimal, EventRecord, Label, UserSequence, Value};
pub use schema::{map_code, CodeDictionary, Dictionaries, FieldKind, FieldSchema, Schema, SchemaConfig, Task};
pub use serializer::{parse_pipe, serialize_pipe, serialize_variant, Format, SerializedDoc};
