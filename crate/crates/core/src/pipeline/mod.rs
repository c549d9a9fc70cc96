//! Desk-scale experiments: data loading, masking, feature extraction, classification,
//! metrics and timing.

pub mod bench;
pub mod classifier;
pub mod config;
pub mod experiment;
pub mod features;
pub mod idx;
pub mod mask;
pub mod metrics;
pub mod threads;

pub use bench::{bench_layer, latency_ratios, BenchConfig, TimingRow};
pub use classifier::{train_linear_classifier, ClassifierConfig, LinearClassifier};
pub use config::ExperimentConfig;
pub use experiment::{
    run_experiment, ExperimentOutcome, MetricRow, EM_REPORT_FILE, KERNELS_FILE, MANIFEST_FILE,
    METRICS_FILE, MODEL_FILE,
};
pub use features::{
    extract_features, read_features, write_features, ArmInputs, FeatureArm, FeatureMatrix,
};
pub use idx::{load_idx, load_idx_limit, write_idx, Dataset};
pub use mask::{apply_mask, MaskPattern, MaskSpec};
pub use metrics::{evaluate_imputation, ClassificationMetrics, ImputationMetrics};
pub use threads::{configured_threads, with_threads, THREADS_ENV};
