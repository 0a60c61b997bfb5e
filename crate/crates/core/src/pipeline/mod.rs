//! Datasets, evaluation metrics, run configuration and the command-line front end.

mod data;
mod metrics;

pub use data::{
    gaussian_process, ingest_pairs, load_latent_dataset, make_synthetic, random_nonempty_subset, save_latent_dataset, Pair,
    PairedDataset, Rule, RuleKind, SyntheticSpec,
};
pub use metrics::{
    coherence, cosine_distance, euclidean_distance, eval_conditional_coherence, eval_style_distance, frechet_distance,
    latent_features, mel_features, pearson, Coherence, FEATURE_MELS,
};

mod cli;
mod config;

pub use cli::{cli_main, exit_code, random_crop};
pub use config::{AeTrainConfig, DiffTrainConfig, RunConfig, SampleSettings};
