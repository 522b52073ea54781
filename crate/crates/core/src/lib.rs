//! Principal adversarial domain identification and adaptation on
//! feature-space data.
//!
//! The identification stage trains a contrastive encoder ([`advscl`]), embeds
//! every attack into a domain ([`domains`]), clusters the domains over a
//! reciprocal-JSD similarity graph ([`divergence`], [`clustering`]) and picks
//! one domain per cluster by coverage score ([`selection`]). The adaptation
//! stage ([`pada`]) trains per-source aligners and classifiers against a proxy
//! domain and detects adversarial inputs.

pub mod advscl;
pub mod clustering;
pub mod divergence;
pub mod domains;
pub mod error;
pub mod nnkit;
pub mod numerics;
pub mod pada;
pub mod pef;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
