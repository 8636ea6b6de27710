//! Question programs: a tree of sub-task calls stored in post-order.
//!
//! Text syntax is nested calls, `op[arg](child, ...)`:
//!
//! ```text
//! count(filter_color[red](filter_shape[cube](scene())))
//! ```
//!
//! The structured form used in dataset records is the post-order node list,
//! each node `{"op": .., "arg": .., "input_positions": [..]}` with `arg`
//! omitted when absent.

mod parser;
mod plan;
mod random;
mod validate;

pub use parser::{parse_program, parse_syntax, serialize};
pub use plan::{plan, ExecutionPlan, PlanStep, StepInput, Structure, TreeThreads};
pub use random::random_program;
pub use validate::{validate, Severity, Violation, ViolationKind};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown sub-task {op} at byte {offset}")]
    UnknownOp { op: String, offset: usize },
    #[error("{op} expects {expected} input(s), found {found}")]
    Arity { op: String, expected: usize, found: usize },
    #[error("{op} requires an argument")]
    MissingArgument { op: String },
    #[error("{op} takes no argument, found {arg}")]
    ExtraArgument { op: String, arg: String },
    #[error("malformed program: {0}")]
    Structure(String),
    #[error("tree structure needs at most one binary sub-task, found {0}")]
    UnsupportedTree(usize),
}

/// One sub-task call. `inputs` are positions of earlier nodes in the
/// post-order list, left to right.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubTaskNode {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
    #[serde(rename = "input_positions")]
    pub inputs: Vec<usize>,
}

impl SubTaskNode {
    pub fn new(op: impl Into<String>, arg: Option<&str>, inputs: Vec<usize>) -> Self {
        Self {
            op: op.into(),
            arg: arg.map(str::to_string),
            inputs,
        }
    }
}

/// A program tree in left-to-right post-order. The root is the last node;
/// a node's position in `nodes` is its execution order `n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<SubTaskNode>", into = "Vec<SubTaskNode>")]
pub struct Program {
    nodes: Vec<SubTaskNode>,
}

impl Program {
    /// Checks that `nodes` is the post-order listing of a single tree.
    pub fn from_nodes(nodes: Vec<SubTaskNode>) -> Result<Self, ProgramError> {
        if nodes.is_empty() {
            return Err(ProgramError::Structure("empty program".into()));
        }
        // start[i]: first position of the subtree rooted at i
        let mut start = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            let mut expected_end = i;
            for &c in node.inputs.iter().rev() {
                if c + 1 != expected_end {
                    return Err(ProgramError::Structure(format!(
                        "node {i} ({}) input {c} breaks post-order",
                        node.op
                    )));
                }
                expected_end = start[c];
            }
            start[i] = expected_end;
        }
        if start[nodes.len() - 1] != 0 {
            return Err(ProgramError::Structure(format!(
                "nodes before position {} are not reachable from the root",
                start[nodes.len() - 1]
            )));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[SubTaskNode] {
        &self.nodes
    }

    pub fn node(&self, position: usize) -> &SubTaskNode {
        &self.nodes[position]
    }

    /// Program length L.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Positions of nodes with two inputs.
    pub fn binary_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].inputs.len() == 2)
            .collect()
    }

    /// Positions of the subtree rooted at `position`, in post-order.
    pub fn subtree(&self, position: usize) -> std::ops::Range<usize> {
        let mut first = position;
        while let Some(&c) = self.nodes[first].inputs.first() {
            first = c;
        }
        first..position + 1
    }

    pub fn ops(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.op.as_str())
    }
}

impl TryFrom<Vec<SubTaskNode>> for Program {
    type Error = ProgramError;

    fn try_from(nodes: Vec<SubTaskNode>) -> Result<Self, Self::Error> {
        Self::from_nodes(nodes)
    }
}

impl From<Program> for Vec<SubTaskNode> {
    fn from(p: Program) -> Self {
        p.nodes
    }
}

impl std::fmt::Display for Program {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&serialize(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(op: &str, arg: Option<&str>, inputs: &[usize]) -> SubTaskNode {
        SubTaskNode::new(op, arg, inputs.to_vec())
    }

    #[test]
    fn accepts_post_order_trees() {
        let p = Program::from_nodes(vec![
            n("scene", None, &[]),
            n("filter_color", Some("red"), &[0]),
            n("scene", None, &[]),
            n("filter_shape", Some("cube"), &[2]),
            n("intersect", None, &[1, 3]),
            n("count", None, &[4]),
        ])
        .unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.binary_nodes(), vec![4]);
        assert_eq!(p.subtree(3), 2..4);
        assert_eq!(p.subtree(1), 0..2);
        assert_eq!(p.subtree(5), 0..6);
    }

    #[test]
    fn rejects_shared_and_dangling_nodes() {
        // node 0 referenced twice
        assert!(Program::from_nodes(vec![n("scene", None, &[]), n("union", None, &[0, 0])]).is_err());
        // two roots
        assert!(Program::from_nodes(vec![n("scene", None, &[]), n("scene", None, &[])]).is_err());
        // forward reference
        assert!(Program::from_nodes(vec![n("count", None, &[1]), n("scene", None, &[])]).is_err());
        // children out of order
        assert!(Program::from_nodes(vec![
            n("scene", None, &[]),
            n("scene", None, &[]),
            n("union", None, &[1, 0]),
        ])
        .is_err());
        assert!(Program::from_nodes(vec![]).is_err());
    }

    #[test]
    fn structured_form_uses_input_positions() {
        let p = Program::from_nodes(vec![n("scene", None, &[]), n("filter_size", Some("small"), &[0])]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"[{"op":"scene","input_positions":[]},{"op":"filter_size","arg":"small","input_positions":[0]}]"#
        );
        assert_eq!(serde_json::from_str::<Program>(&json).unwrap(), p);
        assert!(serde_json::from_str::<Program>(r#"[{"op":"count","input_positions":[3]}]"#).is_err());
    }
}
