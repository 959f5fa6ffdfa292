//! Aligned-bundle Spectre hardening for a toy fixed-width ISA.
//!
//! The pipeline is `isa` (parse) → `cfg` → `transform` (mask, SFI, fence,
//! bundle, layout) → `verifier`, with `specsim` providing a speculative
//! simulator to check that hardened images resist BTB/RSB poisoning.

pub mod isa;
pub mod image;
pub mod cfg;
pub mod transform;
pub mod verifier;
pub mod specsim;
pub mod corpus;
