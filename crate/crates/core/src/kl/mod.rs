//! KL divergences: exact discrete and Gaussian values, and neural estimation.

mod discrete;
mod mine;

pub use discrete::{
    cross_entropy_dist, entropy, kl_conditional_discrete, kl_discrete, kl_gaussian, mutual_information, ConditionalKl,
    DiscreteJoint,
};
pub use mine::{
    mine_estimate, onehot, spurious_term, DvOutput, MineConfig, MineEstimator, SpuriousTerm, TermInputs, TermMode,
};
