//! Training losses: label-smoothed MLE on positive pairs and unlikelihood on
//! negatives built by swapping the target language ID.

mod batch;
mod loss;

pub use batch::{is_coupled, make_negative, NegativeBatch, NegativeMode, PositiveBatch};
pub use loss::{
    mean_target_prob, mle_batch_loss, mle_loss, unions_step_loss, unlikelihood_loss, StepLoss,
    UL_FLOOR,
};

#[cfg(test)]
mod tests;
