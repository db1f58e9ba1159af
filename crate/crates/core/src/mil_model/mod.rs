//! Bag-level multiple-instance relation classifier.
//!
//! Each sentence is encoded to token states `H`; the start-sentinel row and
//! mean-pooled entity spans pass through `tanh` maps and are concatenated
//! into a `3d` relation representation. A bag is aggregated by averaging or
//! by selective attention against a relation row, then classified with a
//! softmax over the relation matrix.

pub mod checkpoint;
pub mod encoding;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub use checkpoint::EncoderKind;
pub use encoding::{EmbeddingArchive, Encoding, TokenVocab};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{
    aggregate, bag_loss, bag_probs, encode, probs_from_reps, relation_rep, sentence_reps, Aggregation, BagRep,
    EncodedBag, EncodedSentence, SentenceInput,
};
pub use params::{Dims, ModelParams};
pub use train::{mean_loss, train, StepLog, TrainConfig, TrainOutcome};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + LinalgScalar + ScalarOperand + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}
