//! Toxic-prompt moderation from first-response-token logits.
//!
//! An aligned chat model tends to start its answer to a toxic prompt with a
//! refusal. The distribution over the *first* response token already carries
//! that signal, so a sparse logistic regression head over the (transformed)
//! first-token logits makes a cheap and accurate detector.
//!
//! Module map:
//!
//! * [`datamodel`]: prompts, datasets, logit records, backend descriptors.
//! * [`ingest`]: prompt files, baseline score files, the binary logit dump.
//! * [`acquisition`]: fetching first-token logits and sampled responses.
//! * [`transform`]: softmax, log-odds and the feature maps fed to the head.
//! * [`trainer`]: the SLR head, its training loop and model files.
//! * [`toymodels`]: refusal-probability detectors used as baselines.
//! * [`metrics`]: threshold sweeps, AUPRC, TPR at a capped FPR.
//! * [`synthetic`]: planted generators and mock backends for tests and demos.
//! * [`app`]: CLI workflows and the HTTP moderation service.

pub mod acquisition;
pub mod app;
pub mod datamodel;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod synthetic;
pub mod toymodels;
pub mod trainer;
pub mod transform;
mod util;

pub use error::{Error, Result};
