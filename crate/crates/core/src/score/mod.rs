//! Conditional score estimators.
//!
//! Two implementations share the [`ScoreEstimator`] interface: the exact
//! [`AnalyticEstimator`] over a finite template mixture, and the small
//! trainable [`ToyScoreNet`] whose cross-attention block supplies real
//! attention maps.

mod analytic;
mod attention;
mod checkpoint;
mod network;
mod tokens;
mod train;

pub use analytic::{analytic_attention, analytic_score, AnalyticEstimator, OracleDomain, TemplateDistribution};
pub use attention::{average_blocks, extract_attention, AttentionMap};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{Example, NetworkConfig, NetworkGradients, ToyNetwork};
pub use tokens::{TokenId, TokenSequence, Vocabulary};
pub use train::{train_toy_score, ToyScoreNet, TrainConfig, TrainReport};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

/// Conditional score `s(x, t, c) ≈ ∇_x log p_t(x | c)`.
///
/// Implementations are immutable after construction and safe to share.
pub trait ScoreEstimator: Send + Sync {
    fn shape(&self) -> Shape;

    fn vocabulary(&self) -> &Vocabulary;

    fn score(&self, x: &Grid, t: usize, cond: &TokenSequence, sched: &Schedule) -> Result<Grid>;

    fn attention_capable(&self) -> bool {
        false
    }

    /// Per-block cross-attention maps of `cond` at `(x, t)`.
    fn attention_blocks(
        &self,
        _x: &Grid,
        _t: usize,
        _cond: &TokenSequence,
        _sched: &Schedule,
    ) -> Result<Vec<AttentionMap>> {
        Err(Error::Capability(
            "estimator does not expose cross-attention maps".into(),
        ))
    }
}

impl<E: ScoreEstimator + ?Sized> ScoreEstimator for &E {
    fn shape(&self) -> Shape {
        (**self).shape()
    }
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn score(&self, x: &Grid, t: usize, cond: &TokenSequence, sched: &Schedule) -> Result<Grid> {
        (**self).score(x, t, cond, sched)
    }
    fn attention_capable(&self) -> bool {
        (**self).attention_capable()
    }
    fn attention_blocks(
        &self,
        x: &Grid,
        t: usize,
        cond: &TokenSequence,
        sched: &Schedule,
    ) -> Result<Vec<AttentionMap>> {
        (**self).attention_blocks(x, t, cond, sched)
    }
}
