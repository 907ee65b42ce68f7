//! Group inference via data comparison (GIC).
//!
//! A spurious-attribute classifier is trained on learned representations with
//! two terms: a cross-entropy *correlation* term that ties its predictions to
//! the class label on the training set, and a *spurious* term that rewards
//! predictions whose class-conditional relationship differs between the
//! training set and a comparison set. The spurious term is a conditional KL
//! divergence written as joint-minus-marginal KL and estimated with
//! Donsker-Varadhan statistics networks (MINE).
//!
//! The inferred groups `(y, predicted spurious attribute)` then drive a
//! group-robust learner (subsample, upsample, GroupDRO or selective mixup),
//! evaluated by worst-group accuracy.
//!
//! Module map:
//!
//! | module | role |
//! |--------|------|
//! | [`nn`] | dense networks, losses, SGD, checkpoints |
//! | [`data`] | datasets, file formats, synthetic generators |
//! | [`erm`] | stage 1: ERM training, feature extraction, error sets |
//! | [`kl`] | discrete/Gaussian KL oracles and the MINE estimator |
//! | [`gic`] | stage 2: spurious-attribute classifier and grid search |
//! | [`comparison`] | building comparison data from the training set |
//! | [`invariant`] | stage 3: robust training on inferred groups |
//! | [`eval`] | worst-group accuracy, minority precision/recall, reports, plots |
//! | [`pipeline`] | end-to-end runs, manifests and studies |

pub mod comparison;
pub mod data;
pub mod erm;
pub mod error;
pub mod eval;
pub mod gic;
pub mod invariant;
pub mod kl;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{GicError, Result};
