//! Evidence-grounded video reasoning at desk scale.
//!
//! The pipeline: a query-guided cross-attention grounding module ([`egm`])
//! condenses N frame features into K evidence rows; a small conditional
//! decoder ([`decoder`]) writes a three-section response (temporal anchors,
//! reasoning draft, answer) in the [`protocol`] grammar; a composite
//! [`reward`] scores anchors, draft citations and answer; and [`grpo`]
//! refines the supervised policy with pairwise preferences. [`datagen`]
//! builds the synthetic event worlds everything trains on and [`trainer`]
//! wires the two phases together.

pub mod checkpoint;
pub mod datagen;
pub mod decoder;
pub mod diagnostics;
pub mod egm;
pub mod error;
pub mod grpo;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod reward;
pub mod trainer;

pub use error::{CoeError, Result};
