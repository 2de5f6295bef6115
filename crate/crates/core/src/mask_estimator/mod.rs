//! State-dependent mask estimation: per-frame features, linear SVMs and the
//! per-(state, band) estimator bank.

pub mod bank;
pub mod features;
pub mod svm;

pub use bank::{
    predict_mask_pooled, predict_mask_state_dependent, train_estimator_bank, BankMaskSource, BankStats,
    BankTrainItem, EstimatorBank, Slot,
};
pub use features::{
    build_feature_matrix, flatness_feature, harmonic_decomposition, noise_floor_estimate, subband_snr_feature,
    FeatureConfig, HarmonicConfig, HarmonicSplit, Standardizer,
};
pub use svm::{objective, train_svm, training_accuracy, LinearSvm, SvmData, SvmFit, SvmTrainConfig};
