//! Deterministic synthetic bundles and brute-force reference implementations.

pub mod fixture;
pub mod oracle;

pub use fixture::{gen_fixture, generate, Blob, BlobKind, Fixture, FixtureSpec, NoiseLevels, Rect, PRNG_NAME};
