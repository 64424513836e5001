//! Multichannel speaker separation with relative transfer matrices.
//!
//! The crate covers the whole chain: STFT analysis and synthesis
//! ([`signal`]), complex linear algebra ([`numerics`]), shoebox-room
//! simulation ([`room`]), ReTM estimation and separation ([`retm`]) and
//! BSS-style evaluation ([`metrics`]).

pub mod error;
pub mod metrics;
pub mod numerics;
pub mod retm;
pub mod room;
pub mod serde_util;
pub mod signal;
pub mod stimuli;

pub use error::{Error, Result};
pub use metrics::{bss_decompose, evaluate_scenario, sir_sdr, BssDecomposition, SeparationReport};
pub use numerics::{condition_number, cross_covariance, pseudoinverse, ComplexMatrix, CovariancePair};
pub use retm::{
    apply_separation, estimate_retm, separate_all, separate_speaker, GroupAssignment, ReTMStack,
    SegmentSpec,
};
pub use room::{render_scene, simulate_rir, RenderedScene, RoomModel, SceneConfig, SourceConfig, SourceRole};
pub use signal::{istft, stft, AudioBuffer, Spectrogram, StftParams, WindowKind};
