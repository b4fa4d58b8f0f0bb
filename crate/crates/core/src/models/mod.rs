//! The structure generator, the color correction generator, the shared
//! patch discriminator and the mask composition rule.

pub mod archive;
mod bundle;
mod composite;
mod discriminator;
mod generator;
mod layers;
mod nonlocal;
mod pipeline;

pub use bundle::{ModelBundle, ModelConfig, ARCHIVE_FORMAT_VERSION};
pub use composite::{composite, composite_u8, composite_var};
pub use discriminator::{Activation, DLayer, Discriminator, DiscriminatorConfig, DiscriminatorNorm, MIN_DISCRIMINATOR_SIDE};
pub use generator::{Generator, GeneratorConfig, GeneratorOutput, GeneratorRole, Norm};
pub use layers::{add_conv, Bind};
pub use nonlocal::NonLocalBlock;
pub use pipeline::InpaintOutput;
