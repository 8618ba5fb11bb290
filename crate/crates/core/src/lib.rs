//! Algorithmic core of a multi-modal 3D masked autoencoder that accepts any
//! subset of {T1, T2, FLAIR, PET}.
//!
//! Everything in this crate is pure computation over in-memory data: volume
//! patching, the synthetic cohort generator, atlas-guided curriculum masking,
//! a small reverse-mode autodiff engine with the transformer built on top of
//! it, the training objectives, the pretraining step, finetuning, and the
//! evaluation protocols. File formats, configuration files and the command
//! line live in the `anymod` companion crate.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. The `parallel` feature spreads per-sample work of a batch over
//! rayon; results do not depend on it because per-sample gradients are
//! reduced in batch order.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod autograd;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod masking;
pub mod math;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use modality::{Modality, ModalitySet};
