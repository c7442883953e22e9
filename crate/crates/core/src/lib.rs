//! Adaptive similarity-threshold token merging for a frozen transformer encoder
//! that ships its final tokens over an AWGN channel, plus a multi-objective
//! Bayesian optimizer that searches per-layer merge thresholds trading accuracy
//! against compute and communication cost.
//!
//! The pipeline, end to end:
//!
//! ```text
//! image -> patch_embed -> [attention -> merge(tau_l) -> MLP] x L -> codec -> power norm
//!       -> AWGN -> decode -> prototype head
//! ```
//!
//! Module map:
//!
//! * [`encoder`]: synthetic data, frozen random encoder, prototype classifier.
//! * [`merging`]: threshold merge operator, fixed-ratio and random-drop baselines.
//! * [`channel`]: token codecs, power normalization, AWGN.
//! * [`objectives`]: FLOPs accounting and end-to-end policy evaluation.
//! * [`pareto`]: dominance, non-dominated filtering, exact 3-D hypervolume.
//! * [`surrogate`]: Matérn-5/2 ARD Gaussian processes.
//! * [`optimizer`]: EHVI-driven search loop and search baselines.
//! * [`privacy`]: linear model-inversion probe and SSIM leakage.
//! * [`experiment`]: config, artifacts and the command implementations behind the CLI.

pub mod channel;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod merging;
pub mod objectives;
pub mod optimizer;
pub mod pareto;
pub mod privacy;
pub mod seed;
pub mod sobol;
pub mod surrogate;

pub use error::{Error, Result};
pub use exec::Execution;
