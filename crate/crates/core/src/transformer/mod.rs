//! Encoder building blocks shared by module networks and the monolithic
//! baselines.

mod config;
mod embed;
mod layer;

pub use config::ModelConfig;
pub use embed::{grid_position_encoding, Embeddings, GridEncoder};
pub use layer::{multi_head_attention, EncoderLayer, LayerOutput};

use rand::RngCore;

use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransformerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{table} id {id} is outside the table of size {size}")]
    OutOfVocabulary {
        table: &'static str,
        id: usize,
        size: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TransformerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Head,
    Visual,
    ProgramWord,
}

/// One input sequence for an encoder stack.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn head_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == TokenKind::Head).count()
    }

    /// Index range of the visual block, which must be contiguous.
    pub fn visual_span(&self) -> Option<std::ops::Range<usize>> {
        let first = self.kinds.iter().position(|k| *k == TokenKind::Visual)?;
        let len = self.kinds[first..]
            .iter()
            .take_while(|k| **k == TokenKind::Visual)
            .count();
        let total = self.kinds.iter().filter(|k| **k == TokenKind::Visual).count();
        (len == total).then_some(first..first + len)
    }
}

/// Dropout settings for one forward pass. Evaluation and gradient checks
/// use [`Dropout::off`].
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub(crate) fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match (&mut self.rng, self.p > 0.0) {
            (Some(rng), true) => tape.dropout(x, self.p, rng),
            _ => x,
        }
    }
}
