//! Long-context retrieval-augmented question answering.
//!
//! Paragraphs are cut into sentence-aligned chunks and retrieved in two
//! stages. Retrieved chunks can be mapped back to their source paragraphs for
//! an extractor call, filtered one by one under a guiding chain of thought,
//! or both, before the generator answers. Every model call goes through
//! [`gateway::Gateway`], so the whole pipeline runs offline against scripted
//! responses.

pub mod chunker;
pub mod corpus;
pub mod cot_filter;
pub mod evalkit;
pub mod extractor;
pub mod gateway;
pub mod instruct;
pub mod orchestrator;
pub mod retriever;
pub mod scalar;
pub mod text;

pub use scalar::Scalar;

/// Default score precision.
pub type Score = f32;
pub type Index = retriever::VectorIndex<Score>;
pub type Hits = retriever::RetrievalResult<Score>;
pub type Mapped = extractor::MappedContext<Score>;
pub type Trace = orchestrator::PipelineTrace<Score>;
