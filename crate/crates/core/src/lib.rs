//! Neurogeometric models of perception on the roto-translation group.
//!
//! The crate lifts grayscale images to orientation scores on R²×S¹, builds
//! connectivity kernels (Fokker–Planck, logarithmic, and kernels learned from
//! edge co-occurrence statistics), groups lifted points into perceptual units
//! by spectral analysis, and completes contours and brightness with a staged
//! variational solver.
//!
//! Interchangeable algorithms (eigen-solvers, completion modes, activation
//! nonlinearities, experiments) sit behind small traits and are looked up by
//! name at runtime through their registries.

pub mod completion;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod registry;
pub mod spectral;
pub mod statistics;
pub mod stimuli;

pub use error::{Error, Result};
pub use grid::{LiftedField3D, ScalarField2D, VectorField2D};
