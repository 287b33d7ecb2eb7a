//! Pieces shared by the four training loops.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

/// Failure of a training run. A diverged run hands back the model as it was
/// after the last step whose loss was finite.
#[derive(Debug)]
pub enum TrainError<M> {
    Invalid(Error),
    Diverged {
        epoch: usize,
        last_finite: Box<M>,
        message: String,
    },
}

impl<M> From<Error> for TrainError<M> {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl<M> fmt::Display for TrainError<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged { epoch, message, .. } => {
                write!(f, "training diverged at epoch {epoch}: {message}")
            }
        }
    }
}

impl<M: fmt::Debug> std::error::Error for TrainError<M> {}

impl<M> From<TrainError<M>> for Error {
    fn from(e: TrainError<M>) -> Self {
        match e {
            TrainError::Invalid(e) => e,
            TrainError::Diverged { epoch, message, .. } => Error::Diverged { epoch, message },
        }
    }
}

/// Independent generator streams derived from one seed.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const AUX_STREAM: u64 = 2;

/// Index batches for one epoch, shuffled.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
