//! Collision-resistant unsupervised hashing.
//!
//! Binary codes are learned with losses on normalized Hamming distances,
//! a per-sample memory bank, collision-sensitive attention and pseudo labels
//! from affinity propagation. See the guide in `book/` for a walkthrough.

pub mod codebook;
pub mod csa;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feature;
pub mod format;
pub mod gradcheck;
pub mod hamming;
pub mod losses;
pub mod matrix;
pub mod pseudo_labels;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// The guide's code samples, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            struct $name;
        };
    }
    chapter!(Intro, "intro.md");
    chapter!(Codes, "codes.md");
    chapter!(Saturation, "saturation.md");
    chapter!(Losses, "losses.md");
    chapter!(Attention, "attention.md");
    chapter!(PseudoLabels, "pseudo_labels.md");
    chapter!(Training, "training.md");
    chapter!(Codebook, "codebook.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
    chapter!(Results, "results.md");
}
