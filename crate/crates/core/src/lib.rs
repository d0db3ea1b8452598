pub mod corpus;
pub mod index;
pub mod text;
pub mod retrieval;
pub mod llm;
pub mod trace;
pub mod prompts;
pub mod query_tools;
pub mod postprocess;
pub mod generation;
pub mod refinement;
pub mod orchestrator;
pub mod eval;
#[cfg(feature = "testkit")]
pub mod testkit;
