//! Missing-data speech recognition workbench.
//!
//! Builds a synthetic noisy small-vocabulary corpus, computes classical SNR
//! oracle masks, trains per-state linear SVM mask estimators, and compares
//! recognition accuracy of a bounded-marginalisation GMM-HMM decoder under
//! classical and state-dependent oracle masks.

pub mod corpus;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod kv;
pub mod mask_estimator;
pub mod mask;
pub mod mdt_hmm;
pub mod seed;

pub use error::{Error, Result};
