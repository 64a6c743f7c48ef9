//! Multi-speaker localization from pairwise relative phase ratios (PRPs).
//!
//! The pipeline runs room simulation, STFT analysis, PRP extraction,
//! complex-Gaussian-mixture batch EM with grid-search localization, and an
//! unfolded EM network trained end to end.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod container;
pub mod em;
pub mod prp;
pub mod room;
pub mod stft;
pub mod unfolded;

pub use audio::MultichannelAudio;
pub use error::{Error, Result};
pub use geometry::Position;
pub use room::{ArrayGeometry, Condition, ProtocolConfig, RoomSpec, Scene};
