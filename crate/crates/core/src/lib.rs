//! Line-drawing guided two-stage mural inpainting.
//!
//! A structure reconstruction generator (G1) turns a masked mural plus its
//! line drawing into a full-frame prediction; a color correction generator
//! (G2) with non-local attention adds a global residual; a single spectral
//! norm PatchGAN discriminator scores both stages. The crate covers data
//! preparation, the three networks, every loss, the two-stage trainer and the
//! evaluation harness.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
pub use raster::{ImageTensor, LineDrawing, LineProvenance, Mask, MuralSource, RatioBin, RawMural};

/// Hex SHA-256 of arbitrary bytes; used for every fingerprint in the crate.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
