//! Common and personalized prompting over a frozen dual encoder for
//! domain-incremental learning, at desk scale.

pub mod backbone;
pub mod config;
pub mod data;
pub mod dil;
pub mod error;
pub mod io;
pub mod numerics;
pub mod par;
pub mod prompting;

pub use backbone::{Backbone, BackboneConfig};
pub use config::RunConfig;
pub use data::{Dataset, DomainTransform, Manifest, Split};
pub use error::{Error, Result};
pub use numerics::{Tape, Tensor};
