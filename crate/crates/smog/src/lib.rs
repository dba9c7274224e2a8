//! IO, configuration, and run orchestration around `smog-core`: dataset and
//! checkpoint file formats, TOML run configs, the pretraining loop with CSV
//! metrics, evaluation commands, and the ablation suites.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod run;
