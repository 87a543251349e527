pub mod agents;
pub mod case;
pub mod cli;
pub mod kb;
pub mod llm;
pub mod mcp;
pub mod orchestrator;
pub mod retrieval;
