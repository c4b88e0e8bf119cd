//! Trans-dimensional random field (TRF) language models.
//!
//! A TRF scores a sentence `x` of length `l` as
//!
//! ```text
//! p(l, x) = pi_l * q(x) * exp(phi(x; theta) - zeta_l)
//! ```
//!
//! where `q` is a fixed reference distribution, `phi` a neural potential and
//! `zeta_l` a learned per-length log-normalizer. Parameters and normalizers
//! are estimated jointly with noise-contrastive estimation against an n-gram
//! noise distribution.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod nce;
pub mod ngram;
pub mod noise;
pub mod optim;
pub mod seqnet;
pub mod trf;
pub mod util;

pub use error::{Error, Result};
