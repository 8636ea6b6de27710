use rand::seq::SliceRandom;
use rand::Rng;

use super::{Program, ProgramError, SubTaskNode};
use crate::library::{SubTaskCatalog, SubTaskSpec, ValueType};

const HARD_DEPTH: usize = 64;

/// Samples a well-typed program ending in an answer type.
///
/// Nodes deeper than `max_depth` only use sub-tasks that shrink toward a
/// leaf. At most `max_binary` two-input nodes are used.
pub fn random_program<R: Rng + ?Sized>(
    rng: &mut R,
    catalog: &SubTaskCatalog,
    max_depth: usize,
    max_binary: usize,
) -> Result<Program, ProgramError> {
    let answers = [ValueType::Integer, ValueType::Boolean, ValueType::Attribute];
    let target = *answers.choose(rng).expect("non-empty");
    let mut g = Gen {
        catalog,
        max_depth,
        binary_left: max_binary,
        nodes: Vec::new(),
    };
    g.expand(rng, target, 0)?;
    Program::from_nodes(g.nodes)
}

struct Gen<'c> {
    catalog: &'c SubTaskCatalog,
    max_depth: usize,
    binary_left: usize,
    nodes: Vec<SubTaskNode>,
}

impl Gen<'_> {
    fn expand<R: Rng + ?Sized>(&mut self, rng: &mut R, ty: ValueType, depth: usize) -> Result<(), ProgramError> {
        if depth > HARD_DEPTH {
            return Err(ProgramError::Structure(format!(
                "catalog cannot close a {ty:?} program within {HARD_DEPTH} levels"
            )));
        }
        let produces: Vec<&SubTaskSpec> = self
            .catalog
            .entries()
            .iter()
            .filter(|e| e.output == ty && (e.arity() < 2 || self.binary_left > 0))
            .collect();
        let candidates: Vec<&SubTaskSpec> = if depth >= self.max_depth {
            let min = produces.iter().map(|e| e.arity()).min().unwrap_or(0);
            produces.iter().copied().filter(|e| e.arity() == min).collect()
        } else {
            produces
        };
        let spec = *candidates
            .choose(rng)
            .ok_or_else(|| ProgramError::Structure(format!("no sub-task produces {ty:?}")))?;
        if spec.arity() == 2 {
            self.binary_left -= 1;
        }
        let mut inputs = Vec::with_capacity(spec.arity());
        for &input_ty in &spec.inputs {
            self.expand(rng, input_ty, depth + 1)?;
            inputs.push(self.nodes.len() - 1);
        }
        let arg = spec
            .args
            .as_ref()
            .map(|words| words.choose(rng).expect("non-empty args").clone());
        self.nodes.push(SubTaskNode {
            op: spec.op.clone(),
            arg,
            inputs,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::validate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_are_valid_and_bounded() {
        let cat = SubTaskCatalog::clevr();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let p = random_program(&mut rng, &cat, 5, 1).unwrap();
            assert!(validate(&p, &cat).is_empty(), "{p}");
            assert!(p.binary_nodes().len() <= 1);
        }
    }
}
