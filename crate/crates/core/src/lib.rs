//! Contact-guided flow matching over voxel occupancy grids.
//!
//! A mixture-of-Gaussians latent model stands in for a trained velocity
//! network, a fixed trilinear decoder maps latents to occupancy, and a
//! local drag energy at contact points steers sampling toward shapes that
//! agree with sparse evidence on the hidden side of an object.

pub mod contact;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod guidance;
pub mod harness;
pub mod scenario;
pub mod voxel;

pub use error::{Error, Result};
