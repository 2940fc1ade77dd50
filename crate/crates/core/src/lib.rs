//! Similarity-aware point affiliation (SAPA) feature upsampling.
//!
//! A decoder feature map is upsampled by reassembling each output point
//! from a `K x K` window of decoder points. The window weights come from
//! the similarity between the co-located high-resolution encoder point and
//! each decoder point in the window, normalized over the window. Inside a
//! window of identical decoder vectors the weights are exactly uniform,
//! whatever the encoder holds; across a boundary the encoder steers weight
//! toward the matching side.
//!
//! Modules:
//! - [`tensor`]: HWC feature maps and window geometry
//! - [`io`]: SAPT tensor files, PGM export
//! - [`similarity`]: LayerNorm, projections, similarity scorers
//! - [`kernel`]: kernel normalization and generation
//! - [`upsample`]: assembly, forward pass, nearest/bilinear baselines
//! - [`grad`]: analytic backward pass and finite-difference checks
//! - [`complexity`]: FLOP/parameter model and instrumented counts
//! - [`synth`]: two-cluster fixtures

pub mod complexity;
mod dd;
pub mod error;
pub mod grad;
pub mod io;
pub mod kernel;
pub mod params_io;
pub mod reference;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod upsample;

pub use complexity::{cost, measure_sapa, CostReport, Operator};
pub use error::{Result, SapaError};
pub use grad::{finite_diff, gradcheck, sapa_backward, GradBundle};
pub use kernel::{generate_kernels, normalize_window, KernelField, NormKind};
pub use similarity::{Matrix, SapaParams, SimilarityKind};
pub use tensor::{project_location, Real, Tensor, Window};
pub use upsample::{assemble, sapa_forward, upsample_bilinear, upsample_nearest, UpsamplerConfig};
