//! Unsupervised ego/exo view adaptation for dense procedural activity
//! captioning.
//!
//! The pipeline pairs a first-person (source) and third-person (target)
//! recording of the same activity. A shared feature converter and a
//! gaze-guided calibration cascade align the two views without target
//! annotations; a query-based decoding head turns the calibrated features
//! into timestamped, captioned events. Everything runs on a small
//! tape-based autodiff engine over `ndarray` matrices, so the whole stack
//! is testable on synthetic data at desk scale.
//!
//! Module map: [`autodiff`] (tape, ops, gradient checks), [`params`]
//! (parameter store, Adam, checkpoints), [`data`] (feature files,
//! manifests, gaze geometry), [`synthgen`] (synthetic paired benchmark),
//! [`salm`] (converter, adversarial scorer, gaze predictor), [`gccm`]
//! (calibration cascade), [`dvchead`] (event decoding, matching, task
//! loss), [`metrics`] (BLEU, CIDEr-D, temporal IoU protocols), [`trainer`]
//! (training loop, ablations, reports), [`cli`] (command-line entry).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dvchead;
pub mod gccm;
pub mod metrics;
pub mod params;
pub mod salm;
pub mod synthgen;
pub mod trainer;
