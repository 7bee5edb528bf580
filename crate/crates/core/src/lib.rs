//! Mask-conditioned diffusion inpainting for face-forgery data augmentation.
//!
//! The crate covers the whole pipeline: free-form mask generation
//! ([`masks`]), the masked forward/reverse diffusion process ([`diffusion`]),
//! the conditional noise predictor ([`model`]) trained with a pixel plus
//! feature objective ([`losses`], [`features`]), evaluation metrics
//! ([`evalmetrics`]) and dataset plumbing ([`datapipe`]).
//!
//! Gradients come from the small tape in [`graph`]. Batch-level loops run
//! through [`Exec`], which uses rayon when the `parallel` feature is on.

pub mod checkpoint;
pub mod datapipe;
pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod features;
pub mod graph;
pub mod losses;
pub mod masks;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use diffusion::{NoiseSchedule, ScheduleKind};
pub use error::{Error, Result};
pub use exec::Exec;
pub use features::{ConvFeatureExtractor, FeatureExtractor};
pub use losses::TrainingConfig;
pub use masks::{Mask, MaskGenParams};
pub use model::{Denoiser, DenoiserConfig};
pub use tensor::ImageTensor;
