pub mod engine;
pub mod ensemble;
pub mod llm_client;
pub mod metrics;
pub mod objective;
pub mod proposer_bo;
pub mod proposer_llm;
pub mod report;
pub mod selector;
pub mod space;
pub mod surrogate;
pub mod tree;
