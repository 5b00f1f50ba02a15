//! Dynamic external-memory priority search tree with buffered updates,
//! simulated over an IO-counting block store.
//!
//! The tree supports point insertion and deletion in amortized
//! `O((1/(ε·B^(1-ε)))·log_B N)` IOs and 3-sided range reporting plus top-k
//! queries in amortized `O((1/ε)·log_B N + K/B)` IOs, for a configurable
//! block size `B` and exponent `ε ∈ (0, 1/2]`. Every block access is routed
//! through [`store::BlockStore`], whose counters are the measurement ground
//! truth for all cost claims, and [`oracle::OracleSet`] provides the
//! brute-force reference for differential testing.

pub mod child;
pub mod model;
pub mod oracle;
pub mod extsort;
pub mod pst;
pub mod record;
pub mod store;

pub use model::{Config, Epsilon, Point, ThreeSidedQuery, TopKQuery};
pub use oracle::OracleSet;
pub use store::{BlockId, BlockStore, IOStats};
