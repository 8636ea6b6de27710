//! Synthetic grid-world question answering: scenes, the symbolic
//! executor that labels them, question template families and the
//! generalization splits.

mod exec;
mod families;
mod scene;
mod splits;
mod text;

pub use exec::{exec_node, exec_program_symbolic, exec_values, Value};
pub use families::{op_positions, Family};
pub use scene::{generate_scene, Attribute, ColorConstraint, Object, Scene, SceneConstraints, FEATURE_DIM};
pub use splits::{
    audit, build_splits, encode_samples, generate_family, generate_split, label_mismatches, read_manifest,
    read_samples, write_dataset, yes_no_balance, AuditCheck, AuditReport, FileEntry, Sample, Split, SplitKind,
    SplitManifest, SplitSpec, SCHEMA, SCHEMA_VERSION,
};
pub use text::{question_text, AnswerVocab, Vocabulary, QUESTION_WORDS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("unsatisfiable constraints: {0}")]
    Unsatisfiable(String),
    #[error("execution failed: {0}")]
    Exec(String),
    #[error("unique() applied to a set of {0} objects")]
    NotUnique(usize),
    #[error("data audit failed: {0}")]
    Audit(String),
    #[error("io: {0}")]
    Io(String),
}
