//! Prompt-guided action disentanglement over spatio-temporal scene graphs.
//!
//! The crate splits into a data layer (`ssg`, `actionspec`, `synth`), a
//! model layer built on the `gradtape` autodiff tape (`dpm`, `vgpnn`,
//! `objective`, `model`), a two-stage training loop (`train`), evaluation
//! and localization metrics (`eval`), and the command-line front end
//! (`config`, `cli`).

pub mod actionspec;
pub mod cli;
pub mod config;
pub mod dpm;
pub mod eval;
pub mod model;
pub mod objective;
pub mod ssg;
pub mod synth;
pub mod train;
pub mod vgpnn;
