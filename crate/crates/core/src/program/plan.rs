use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Program, ProgramError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Stack,
    Tree,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Stack => "stack",
            Structure::Tree => "tree",
        })
    }
}

impl FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stack" => Ok(Structure::Stack),
            "tree" => Ok(Structure::Tree),
            _ => Err(format!("unknown structure {s} (expected stack or tree)")),
        }
    }
}

/// Where a step's head and visual tokens come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepInput {
    /// Encoded grid plus a freshly initialized head.
    Fresh,
    /// Output of the previous step on the same thread.
    Previous,
    /// Last outputs of thread 0 and thread 1.
    Merge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanStep {
    /// Post-order position of the node this step executes.
    pub position: usize,
    pub thread: usize,
    pub input: StepInput,
}

/// Thread decomposition of a tree plan, as node positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeThreads {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub merge: usize,
    pub tail: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub structure: Structure,
    pub steps: Vec<PlanStep>,
    pub threads: Option<TreeThreads>,
}

impl ExecutionPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.position).collect()
    }
}

/// Compiles a program into a schedule.
///
/// Stack runs every node in post-order on one thread. Tree runs the two
/// subtrees of the single binary node as threads 0 and 1, each from fresh
/// visual tokens, merges them at the binary node and continues on thread 0.
/// Tree on a program without a binary node is the stack plan.
pub fn plan(program: &Program, structure: Structure) -> Result<ExecutionPlan, ProgramError> {
    let stack = || ExecutionPlan {
        structure,
        steps: (0..program.len())
            .map(|position| PlanStep {
                position,
                thread: 0,
                input: if position == 0 {
                    StepInput::Fresh
                } else {
                    StepInput::Previous
                },
            })
            .collect(),
        threads: None,
    };
    if structure == Structure::Stack {
        return Ok(stack());
    }
    let binary = program.binary_nodes();
    let merge = match binary.as_slice() {
        [] => return Ok(stack()),
        [b] => *b,
        _ => return Err(ProgramError::UnsupportedTree(binary.len())),
    };
    let node = program.node(merge);
    let first: Vec<usize> = program.subtree(node.inputs[0]).collect();
    let second: Vec<usize> = program.subtree(node.inputs[1]).collect();
    let tail: Vec<usize> = (merge + 1..program.len()).collect();

    let mut steps = Vec::with_capacity(program.len());
    for (thread, chain) in [(0, &first), (1, &second)] {
        for (k, &position) in chain.iter().enumerate() {
            steps.push(PlanStep {
                position,
                thread,
                input: if k == 0 { StepInput::Fresh } else { StepInput::Previous },
            });
        }
    }
    steps.push(PlanStep {
        position: merge,
        thread: 0,
        input: StepInput::Merge,
    });
    steps.extend(tail.iter().map(|&position| PlanStep {
        position,
        thread: 0,
        input: StepInput::Previous,
    }));
    debug_assert_eq!(steps.len(), program.len());
    Ok(ExecutionPlan {
        structure,
        steps,
        threads: Some(TreeThreads {
            first,
            second,
            merge,
            tail,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_syntax;

    #[test]
    fn stack_is_post_order() {
        let p = parse_syntax("count(filter_color[red](filter_shape[cube](scene())))").unwrap();
        let s = plan(&p, Structure::Stack).unwrap();
        assert_eq!(s.positions(), vec![0, 1, 2, 3]);
        assert_eq!(s.steps[0].input, StepInput::Fresh);
        assert!(s.steps[1..]
            .iter()
            .all(|x| x.input == StepInput::Previous && x.thread == 0));
    }

    #[test]
    fn tree_splits_threads_at_the_binary_node() {
        let p = parse_syntax("exist(intersect(filter_color[red](scene()),filter_shape[cube](scene())))").unwrap();
        let t = plan(&p, Structure::Tree).unwrap();
        let th = t.threads.clone().unwrap();
        assert_eq!(th.first, vec![0, 1]);
        assert_eq!(th.second, vec![2, 3]);
        assert_eq!(th.merge, 4);
        assert_eq!(th.tail, vec![5]);
        let threads: Vec<usize> = t.steps.iter().map(|s| s.thread).collect();
        assert_eq!(threads, vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(t.steps[2].input, StepInput::Fresh);
        assert_eq!(t.steps[4].input, StepInput::Merge);
    }

    #[test]
    fn tree_without_binary_node_equals_stack() {
        let p = parse_syntax("query_color(unique(filter_size[large](scene())))").unwrap();
        let t = plan(&p, Structure::Tree).unwrap();
        let s = plan(&p, Structure::Stack).unwrap();
        assert_eq!(t.steps, s.steps);
        assert!(t.threads.is_none());
    }

    #[test]
    fn two_binary_nodes_are_rejected_for_tree_only() {
        let p = parse_syntax("count(union(intersect(scene(),scene()),scene()))").unwrap();
        assert_eq!(plan(&p, Structure::Tree), Err(ProgramError::UnsupportedTree(2)));
        assert_eq!(plan(&p, Structure::Stack).unwrap().len(), p.len());
    }
}
