//! Taxonomy construction: prompting a language model for class groupings and
//! assembling them, with shape clusters, into a semantic tree.

pub mod llm_client;
pub mod tree_builder;
