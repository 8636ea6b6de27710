//! Transformer module networks and the monolithic baselines.
//!
//! A module network runs one K-layer encoder stack per program node, picked
//! by the module library, over `[head, visual..., op word, arg word]`. The
//! baselines run a single shared stack over the visual tokens and either
//! the question words or the flattened program.

mod example;
mod forward;
mod manifest;

pub use example::Example;
pub use forward::{init_head, predict, ForwardTrace, StepTrace};
pub use manifest::{load_model, save_model, ModelManifest, MANIFEST_SUFFIX};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocab, DataError, Vocabulary, FEATURE_DIM};
use crate::library::{LibraryError, ModuleLibrary, Strategy, SubTaskCatalog};
use crate::program::{ProgramError, Structure};
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor, TensorError};
use crate::transformer::{Embeddings, EncoderLayer, GridEncoder, ModelConfig, TransformerError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("module {module} out of range for a library of {count}")]
    ModuleOutOfRange { module: usize, count: usize },
    #[error("merge inputs differ: {0} vs {1} visual tokens")]
    MergeMismatch(usize, usize),
    #[error("unknown model kind {0}")]
    UnknownKind(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Transformer module network.
    Tmn,
    /// Shared stack over visual tokens and question words.
    Transformer,
    /// Question words replaced by program tokens.
    TransformerPr,
    /// As many layers as the program has nodes, cycling the shared stack.
    TransformerPrVl,
    /// Layer `t` sees only step `t`'s program tokens.
    TransformerPrVlSt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Tmn,
        ModelKind::Transformer,
        ModelKind::TransformerPr,
        ModelKind::TransformerPrVl,
        ModelKind::TransformerPrVlSt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tmn => "tmn",
            ModelKind::Transformer => "transformer",
            ModelKind::TransformerPr => "transformer_pr",
            ModelKind::TransformerPrVl => "transformer_pr_vl",
            ModelKind::TransformerPrVlSt => "transformer_pr_vl_st",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

/// Everything needed to build a network, minus the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub library_seed: u64,
    pub structure: Structure,
    pub height: usize,
    pub width: usize,
}

impl NetworkSpec {
    pub fn tmn(config: ModelConfig, strategy: Strategy, structure: Structure) -> Self {
        Self {
            kind: ModelKind::Tmn,
            config,
            strategy,
            library_seed: 0,
            structure,
            height: 5,
            width: 5,
        }
    }

    pub fn baseline(kind: ModelKind, config: ModelConfig) -> Self {
        Self {
            kind,
            config,
            strategy: Strategy::Individual,
            library_seed: 0,
            structure: Structure::Stack,
            height: 5,
            width: 5,
        }
    }
}

/// Parameter layout of a model. Forward passes read weights from the tape's
/// store, so the same network runs on any store with this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub library: ModuleLibrary,
    pub vocab: Vocabulary,
    pub answers: AnswerVocab,
    pub embeddings: Embeddings,
    pub grid: GridEncoder,
    /// TMN: `stacks[module]` holds its K layers. Baselines: one stack of
    /// `n_layers_monolithic` layers.
    pub stacks: Vec<Vec<EncoderLayer>>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn num_modules(&self) -> usize {
        self.stacks.len()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }
}

/// A network with its weights.
#[derive(Debug, Clone)]
pub struct TmnModel<T: Scalar> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TmnModel<T> {
    /// Builds and randomly initializes a model. Parameter creation order
    /// (and so every draw from the seeded generator) is fixed.
    pub fn new(spec: NetworkSpec, catalog: &SubTaskCatalog, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        let library = ModuleLibrary::build(spec.strategy, catalog, spec.library_seed)?;
        let vocab = Vocabulary::build(catalog);
        let answers = AnswerVocab::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg = &spec.config;
        let embeddings = Embeddings::init(&mut params, "embed", vocab.len(), cfg, &mut rng)?;
        let grid = GridEncoder::init(&mut params, "grid", FEATURE_DIM, cfg, &mut rng)?;
        let mut stacks = Vec::new();
        match spec.kind {
            ModelKind::Tmn => {
                for m in 0..library.num_modules() {
                    let mut layers = Vec::with_capacity(cfg.k_layers);
                    for k in 0..cfg.k_layers {
                        layers.push(EncoderLayer::init(
                            &mut params,
                            &format!("module{m}.layer{k}"),
                            cfg,
                            &mut rng,
                        )?);
                    }
                    stacks.push(layers);
                }
            }
            _ => {
                let mut layers = Vec::with_capacity(cfg.n_layers_monolithic);
                for k in 0..cfg.n_layers_monolithic {
                    layers.push(EncoderLayer::init(
                        &mut params,
                        &format!("encoder.layer{k}"),
                        cfg,
                        &mut rng,
                    )?);
                }
                stacks.push(layers);
            }
        }
        let c = answers.len();
        let classifier_w = params.add("classifier.w", Tensor::randn(&[cfg.d_model, c], cfg.init_std, &mut rng))?;
        let classifier_b = params.add("classifier.b", Tensor::zeros(&[c]))?;
        Ok(Self {
            net: Network {
                spec,
                library,
                vocab,
                answers,
                embeddings,
                grid,
                stacks,
                classifier_w,
                classifier_b,
            },
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.net.kind()
    }

    pub fn cast<U: Scalar>(&self) -> TmnModel<U> {
        TmnModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Scalar count of all encoder layers.
    pub fn encoder_param_count(&self) -> usize {
        let prefix = match self.kind() {
            ModelKind::Tmn => "module",
            _ => "encoder.",
        };
        self.params.num_elements_with_prefix(prefix)
    }
}
