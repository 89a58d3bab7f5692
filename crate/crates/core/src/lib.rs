//! Feature-subtraction face representations.
//!
//! A face image `X` is mapped into a high-dimensional channel stack
//! `x = encode(X)`, regenerated by a generator `x' = g(x)`, and subtracted
//! into a residue `r = x - x'` whose spatial decoding is trained to be blank
//! while `r` itself stays recognizable. Shuffling the residue's channels with a
//! per-sample seed and decoding yields the shareable protective image
//! `X_p = decode(shuffle(r, θ))`.

pub mod attack;
pub mod codec;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod pipeline;
pub mod train;

pub use codec::{decode, encode, HighDimRep, MappingKind, MappingSpec, Planes, SpatialImage};
pub use error::{Error, Result};
pub use perturb::{ChannelPermutation, ShuffleSeed};
