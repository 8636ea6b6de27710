use std::fmt;

use serde::Serialize;

use super::Program;
use crate::library::{SubTaskCatalog, ValueType};

/// Strict violations make a program unexecutable; advisory ones flag
/// programs no template would generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Strict,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownOp,
    Arity {
        expected: usize,
        found: usize,
    },
    MissingArgument,
    UnexpectedArgument {
        arg: String,
    },
    ArgumentVocabulary {
        arg: String,
    },
    InputType {
        slot: usize,
        expected: ValueType,
        found: ValueType,
    },
    RootNotAnswer {
        found: ValueType,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub position: usize,
    pub op: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    pub fn severity(&self) -> Severity {
        match self.kind {
            ViolationKind::InputType { .. } | ViolationKind::RootNotAnswer { .. } => Severity::Advisory,
            _ => Severity::Strict,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {} ({}): ", self.position, self.op)?;
        match &self.kind {
            ViolationKind::UnknownOp => write!(f, "unknown sub-task"),
            ViolationKind::Arity { expected, found } => {
                write!(f, "arity violation: expected {expected} input(s), found {found}")
            }
            ViolationKind::MissingArgument => write!(f, "missing argument"),
            ViolationKind::UnexpectedArgument { arg } => write!(f, "unexpected argument {arg}"),
            ViolationKind::ArgumentVocabulary { arg } => {
                write!(f, "argument {arg} is outside the vocabulary")
            }
            ViolationKind::InputType { slot, expected, found } => {
                write!(f, "input {slot} has type {found:?}, expected {expected:?}")
            }
            ViolationKind::RootNotAnswer { found } => {
                write!(f, "program ends in {found:?}, not an answer type")
            }
        }
    }
}

/// Every arity, argument and typing problem in the program. Empty means
/// well formed.
pub fn validate(program: &Program, catalog: &SubTaskCatalog) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut types: Vec<Option<ValueType>> = Vec::with_capacity(program.len());
    for (position, node) in program.nodes().iter().enumerate() {
        let mut push = |kind| {
            out.push(Violation {
                position,
                op: node.op.clone(),
                kind,
            })
        };
        let Some(spec) = catalog.get(&node.op) else {
            push(ViolationKind::UnknownOp);
            types.push(None);
            continue;
        };
        if spec.arity() != node.inputs.len() {
            push(ViolationKind::Arity {
                expected: spec.arity(),
                found: node.inputs.len(),
            });
        }
        match &node.arg {
            None if spec.takes_argument() => push(ViolationKind::MissingArgument),
            Some(a) if !spec.takes_argument() => push(ViolationKind::UnexpectedArgument { arg: a.clone() }),
            Some(a) if !spec.accepts(a) => push(ViolationKind::ArgumentVocabulary { arg: a.clone() }),
            _ => {}
        }
        for (slot, (&c, &expected)) in node.inputs.iter().zip(&spec.inputs).enumerate() {
            if let Some(found) = types[c] {
                if found != expected {
                    push(ViolationKind::InputType { slot, expected, found });
                }
            }
        }
        types.push(Some(spec.output));
    }
    if let Some(Some(found)) = types.last() {
        if !found.is_answer() {
            out.push(Violation {
                position: program.root(),
                op: program.node(program.root()).op.clone(),
                kind: ViolationKind::RootNotAnswer { found: *found },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_syntax;

    fn check(text: &str) -> Vec<Violation> {
        validate(&parse_syntax(text).unwrap(), &SubTaskCatalog::clevr())
    }

    #[test]
    fn chain_with_scene_is_clean() {
        assert!(check("count(filter_color[red](filter_shape[cube](scene())))").is_empty());
    }

    #[test]
    fn empty_count_is_an_arity_violation() {
        let v = check("count()");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].op, "count");
        assert_eq!(v[0].kind, ViolationKind::Arity { expected: 1, found: 0 });
        assert_eq!(v[0].severity(), Severity::Strict);
        assert!(v[0].to_string().contains("expected 1"));
    }

    #[test]
    fn teal_is_outside_the_color_vocabulary() {
        let v = check("filter_color[teal](scene())");
        assert!(v
            .iter()
            .any(|x| x.kind == ViolationKind::ArgumentVocabulary { arg: "teal".into() } && x.op == "filter_color"));
        // a set-valued root is additionally flagged as advisory
        assert!(v.iter().any(|x| x.severity() == Severity::Advisory));
    }

    #[test]
    fn typing_is_advisory() {
        let v = check("filter_color[red](count(scene()))");
        let typing: Vec<_> = v
            .iter()
            .filter(|x| matches!(x.kind, ViolationKind::InputType { .. }))
            .collect();
        assert_eq!(typing.len(), 1);
        assert_eq!(typing[0].severity(), Severity::Advisory);
    }

    #[test]
    fn unknown_and_argument_errors_are_reported_together() {
        let v = check("equal_integer[red](frobnicate(), count(scene()))");
        assert!(v.iter().any(|x| x.kind == ViolationKind::UnknownOp));
        assert!(v
            .iter()
            .any(|x| matches!(x.kind, ViolationKind::UnexpectedArgument { .. })));
        assert!(check("relate(unique(scene()))")
            .iter()
            .any(|x| x.kind == ViolationKind::MissingArgument));
    }
}
