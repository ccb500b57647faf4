//! Single-image adversarial patch synthesis: sensitivity-driven location
//! selection, a coarse-to-fine pyramid of generator/critic pairs trained
//! against a victim classifier, and evaluation of the resulting patches.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod figures;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod rng;
pub mod saliency;
pub mod sensitivity;
pub mod trainer;
pub mod victim;

pub use error::{CoreError, Result};
pub use generator::{GeneratorStack, NoiseMode};
pub use imaging::{ImageTensor, PatchRegion, ScalePyramid};
pub use losses::{LossWeights, PrintablePalette};
