//! Engine for hierarchical, block-based code generation.
//!
//! A programmer decomposes a task into a tree of mixed-mode prompt blocks.
//! Each block owns one contiguous code segment; the segments compose into a
//! single program. The engine keeps tree and code in sync through block
//! operations, model-driven generation chains and direct code edits.

pub mod codegen;
pub mod error;
pub mod gen_cache;
pub mod llm_gateway;
pub mod executor;
pub mod fsutil;
pub mod mixed_mode;
pub mod prompt_tree;
pub mod segment_map;
pub mod script;
pub mod semantic_link;
pub mod session;
pub mod session_doc;
pub mod text;

pub use error::{LadderError, Result};
pub use prompt_tree::{NodeId, PromptBlock, PromptTree, Relation};
