//! Dataset ingestion and bookkeeping: capture-file parsing, manifest CSVs
//! with split rules, and the synthetic desk-scale generator.

pub mod manifest;
pub mod ntu;
pub mod synthetic;
