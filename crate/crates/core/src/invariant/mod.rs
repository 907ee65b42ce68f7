//! Stage 3: group-robust training on inferred groups.

mod groups;
mod robust;

pub use groups::GroupAssignment;
pub use robust::{
    first_best_epoch, groupdro_update, subsample_balanced, subsample_indices, train_robust, upsample_indices,
    upsample_to_majority, RobustMethod, RobustOutcome, RobustTrainConfig,
};
