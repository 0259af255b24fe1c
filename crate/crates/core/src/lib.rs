//! Interactive clustering driven by accept/reject feedback.
//!
//! A diagonal Gaussian mixture is refit after every round of analyst
//! feedback. Each round adds a penalty on the mutual information between
//! the new clustering and the one that was judged: rejected clusters push
//! the new clustering away from the old one, accepted clusters pull it
//! closer. Because the penalty only sees the joint distribution of new and
//! old labels, it is unaffected by how either clustering numbers its
//! clusters.
//!
//! ```no_run
//! use veto_core::{evaluation, feedback::FeedbackRecord, optimizer, synth};
//!
//! let data = synth::four_gaussians(400, synth::DEFAULT_SEPARATION, 1)?;
//! let cfg = optimizer::FitConfig::default();
//! let first = optimizer::fit_with_feedback(&data, 2, &[], &cfg)?;
//! let history = vec![FeedbackRecord::reject_all(0, &first.clustering)];
//! let second = optimizer::fit_with_feedback(&data, 2, &history, &cfg)?;
//! let ars = evaluation::adjusted_rand_score(
//!     &evaluation::hard_assign(&first.clustering),
//!     &evaluation::hard_assign(&second.clustering),
//! )?;
//! println!("agreement between rounds: {ars:.3}");
//! # Ok::<(), veto_core::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod feedback;
pub mod mixture;
pub mod optimizer;
pub mod synth;

pub use data::{load_csv, Dataset};
pub use error::{Error, Result};
pub use feedback::FeedbackRecord;
pub use mixture::{FitResult, MixtureModel, MixtureParams, SoftClustering};
pub use optimizer::{fit_with_feedback, FitConfig};

/// Independent seed for stream `stream` of a run seeded with `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
