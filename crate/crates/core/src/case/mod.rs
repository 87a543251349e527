pub mod dict;
pub mod plan;
pub mod state;

pub use dict::{parse_dictionary, serialize_dictionary, Dict, DictNode, Entry, ParseError};
pub use plan::{
    default_priority, topological_indices, topological_order, DependencyGraph, GraphError, Plan,
    Task, Tier,
};
pub use state::{
    apply_patch, load_case_tree, validate_case_path, write_case_tree, CaseError, CaseFile,
    CaseMetadata, CaseState, ConfigPatch, FileKind, PatchEntry, PatchProvenance,
};
