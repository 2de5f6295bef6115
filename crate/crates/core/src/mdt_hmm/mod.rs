//! Word-level left-to-right GMM-HMM recognizer with missing-data
//! observation likelihoods.

pub mod decoder;
pub mod gmm;
pub mod model;
pub mod score;
pub mod train;

pub use decoder::{
    build_graph, decode_state_conditioned, decode_with, forced_align, stack_mask, viterbi,
    viterbi_decode, DecodeGraph, Decoded, Grammar, StateAlignment, StateConditionedDecode,
    StateMaskSource, ViterbiPath,
};
pub use gmm::{gaussian_marginal_loglik, log_phi, state_loglik, DeltaMarginalization, Gaussian, GaussianMixture};
pub use model::{HmmConfig, HmmSet, HmmState, StateOwner};
pub use score::{align_words, word_accuracy, EditCounts};
pub use train::{train_hmm, TrainReport, TrainUtterance};
