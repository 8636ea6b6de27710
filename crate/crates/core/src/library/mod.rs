//! Sub-task catalog and the mapping from sub-tasks to parameterized
//! modules.
//!
//! Four assignment strategies are supported:
//!
//! * `Individual`: one module per sub-task (26 for the default catalog).
//! * `SemanticGroup`: 12 modules, sub-tasks grouped by meaning.
//! * `RandomGroup`: 12 modules with the same group sizes as the semantic
//!   grouping, membership drawn from a seed.
//! * `Order`: 12 modules picked by position, `i = n mod M`, ignoring the
//!   sub-task entirely.

mod catalog;

pub use catalog::{SubTaskCatalog, SubTaskSpec, ValueType, COLORS, MATERIALS, RELATIONS, SHAPES, SIZES};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LibraryError {
    #[error("unknown sub-task {0}")]
    UnknownSubTask(String),
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("invalid grouping: {0}")]
    Grouping(String),
    #[error("unknown library strategy {0}")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Individual,
    SemanticGroup,
    RandomGroup,
    Order,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Individual,
        Strategy::SemanticGroup,
        Strategy::RandomGroup,
        Strategy::Order,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Individual => "individual",
            Strategy::SemanticGroup => "semantic_group",
            Strategy::RandomGroup => "random_group",
            Strategy::Order => "order",
        }
    }

    /// True when module parameters are tied to sub-task identity.
    pub fn is_specialized(self) -> bool {
        self != Strategy::Order
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = LibraryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| LibraryError::UnknownStrategy(s.to_string()))
    }
}

/// Module count of the grouped and positional libraries.
pub const GROUPED_MODULES: usize = 12;

/// Semantic grouping of the default catalog, indexed by module.
pub const SEMANTIC_GROUPS: [&[&str]; GROUPED_MODULES] = [
    &["scene"],
    &["count"],
    &["exist"],
    &["intersect"],
    &["relate"],
    &["union"],
    &["unique"],
    &["greater_than", "less_than", "equal_integer"],
    &["equal_color", "equal_material", "equal_shape", "equal_size"],
    &["filter_color", "filter_material", "filter_shape", "filter_size"],
    &["query_color", "query_material", "query_shape", "query_size"],
    &["same_color", "same_material", "same_shape", "same_size"],
];

/// Grouping table as stored in a config file:
/// `{"groups": [["scene"], ["count"], ...]}`, one list per module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingTable {
    pub groups: Vec<Vec<String>>,
}

impl GroupingTable {
    pub fn semantic() -> Self {
        Self {
            groups: SEMANTIC_GROUPS
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        serde_json::from_str(text).map_err(|e| LibraryError::Grouping(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grouping serializes")
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Sub-task → module assignment under one strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleLibrary {
    strategy: Strategy,
    num_modules: usize,
    /// Module per catalog entry; empty for `Order`.
    assignment: Vec<usize>,
    catalog: SubTaskCatalog,
    seed: u64,
}

impl ModuleLibrary {
    /// Builds a library over `catalog`. `seed` only matters for
    /// `RandomGroup`.
    pub fn build(strategy: Strategy, catalog: &SubTaskCatalog, seed: u64) -> Result<Self, LibraryError> {
        match strategy {
            Strategy::Individual => Ok(Self {
                strategy,
                num_modules: catalog.len(),
                assignment: (0..catalog.len()).collect(),
                catalog: catalog.clone(),
                seed,
            }),
            Strategy::SemanticGroup => Self::from_groups(strategy, catalog, &GroupingTable::semantic(), seed),
            Strategy::RandomGroup => {
                let sizes = GroupingTable::semantic().sizes();
                if sizes.iter().sum::<usize>() != catalog.len() {
                    return Err(LibraryError::Grouping(format!(
                        "random grouping needs {} sub-tasks, catalog has {}",
                        sizes.iter().sum::<usize>(),
                        catalog.len()
                    )));
                }
                let mut ops: Vec<String> = catalog.entries().iter().map(|e| e.op.clone()).collect();
                ops.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let mut groups = Vec::with_capacity(sizes.len());
                let mut it = ops.into_iter();
                for s in sizes {
                    groups.push(it.by_ref().take(s).collect());
                }
                Self::from_groups(strategy, catalog, &GroupingTable { groups }, seed)
            }
            Strategy::Order => Ok(Self {
                strategy,
                num_modules: GROUPED_MODULES,
                assignment: Vec::new(),
                catalog: catalog.clone(),
                seed,
            }),
        }
    }

    /// Builds a grouped library from an explicit table; the groups must
    /// partition the catalog.
    pub fn from_groups(
        strategy: Strategy,
        catalog: &SubTaskCatalog,
        table: &GroupingTable,
        seed: u64,
    ) -> Result<Self, LibraryError> {
        if strategy == Strategy::Order {
            return Err(LibraryError::Grouping("order libraries have no groups".into()));
        }
        let mut assignment = vec![usize::MAX; catalog.len()];
        for (module, group) in table.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(LibraryError::Grouping(format!("module {module} has no sub-task")));
            }
            for op in group {
                let i = catalog
                    .index_of(op)
                    .ok_or_else(|| LibraryError::UnknownSubTask(op.clone()))?;
                if assignment[i] != usize::MAX {
                    return Err(LibraryError::Grouping(format!("{op} appears in two groups")));
                }
                assignment[i] = module;
            }
        }
        if let Some(i) = assignment.iter().position(|&m| m == usize::MAX) {
            return Err(LibraryError::Grouping(format!(
                "{} is not assigned to any module",
                catalog.entries()[i].op
            )));
        }
        Ok(Self {
            strategy,
            num_modules: table.groups.len(),
            assignment,
            catalog: catalog.clone(),
            seed,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn num_modules(&self) -> usize {
        self.num_modules
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn catalog(&self) -> &SubTaskCatalog {
        &self.catalog
    }

    /// Module executing `op` at post-order position `position`.
    pub fn assign(&self, op: &str, position: usize) -> Result<usize, LibraryError> {
        let i = self
            .catalog
            .index_of(op)
            .ok_or_else(|| LibraryError::UnknownSubTask(op.to_string()))?;
        Ok(match self.strategy {
            Strategy::Order => position % self.num_modules,
            _ => self.assignment[i],
        })
    }

    /// Sub-tasks per module; `None` for `Order`.
    pub fn groups(&self) -> Option<Vec<Vec<String>>> {
        if self.strategy == Strategy::Order {
            return None;
        }
        let mut groups = vec![Vec::new(); self.num_modules];
        for (i, &m) in self.assignment.iter().enumerate() {
            groups[m].push(self.catalog.entries()[i].op.clone());
        }
        Some(groups)
    }
}

/// Parameter counts of a module network, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBudget {
    /// All module encoder layers.
    pub encoder: usize,
    /// Embedding tables, grid projection and classifier.
    pub shared: usize,
}

impl ParameterBudget {
    pub fn total(&self) -> usize {
        self.encoder + self.shared
    }
}

/// Sizes of the components every model kind shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedDims {
    pub vocab_size: usize,
    pub n_answers: usize,
    pub feat_dim: usize,
}

pub fn shared_param_count(cfg: &ModelConfig, dims: SharedDims) -> usize {
    let d = cfg.d_model;
    let embeddings = (dims.vocab_size + cfg.n_segments + cfg.max_positions) * d;
    let grid = dims.feat_dim * d + d;
    let classifier = d * dims.n_answers + dims.n_answers;
    embeddings + grid + classifier
}

pub fn parameter_budget(library: &ModuleLibrary, cfg: &ModelConfig, dims: SharedDims) -> ParameterBudget {
    ParameterBudget {
        encoder: library.num_modules() * cfg.k_layers * cfg.layer_param_count(),
        shared: shared_param_count(cfg, dims),
    }
}

/// Same accounting for a monolithic encoder of `n_layers_monolithic`.
pub fn monolithic_budget(cfg: &ModelConfig, dims: SharedDims) -> ParameterBudget {
    ParameterBudget {
        encoder: cfg.n_layers_monolithic * cfg.layer_param_count(),
        shared: shared_param_count(cfg, dims),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib(s: Strategy, seed: u64) -> ModuleLibrary {
        ModuleLibrary::build(s, &SubTaskCatalog::clevr(), seed).unwrap()
    }

    #[test]
    fn individual_is_a_bijection_matching_the_table_order() {
        let l = lib(Strategy::Individual, 0);
        assert_eq!(l.num_modules(), 26);
        let mut seen: Vec<usize> = SubTaskCatalog::clevr()
            .entries()
            .iter()
            .map(|e| l.assign(&e.op, 0).unwrap())
            .collect();
        seen.sort();
        assert_eq!(seen, (0..26).collect::<Vec<_>>());
        assert_eq!(l.assign("filter_color", 0).unwrap(), 14);
        assert_eq!(l.assign("filter_size", 0).unwrap(), 17);
        assert_ne!(l.assign("filter_color", 0), l.assign("filter_size", 0));
    }

    #[test]
    fn semantic_group_puts_attribute_equality_in_module_8() {
        let l = lib(Strategy::SemanticGroup, 0);
        assert_eq!(l.num_modules(), 12);
        for op in ["equal_color", "equal_material", "equal_shape", "equal_size"] {
            assert_eq!(l.assign(op, 5).unwrap(), 8, "{op}");
        }
        for op in ["greater_than", "less_than", "equal_integer"] {
            assert_eq!(l.assign(op, 0).unwrap(), 7, "{op}");
        }
        assert_eq!(l.assign("scene", 3).unwrap(), 0);
    }

    #[test]
    fn random_group_is_a_seeded_partition_with_semantic_sizes() {
        let a = lib(Strategy::RandomGroup, 11);
        let b = lib(Strategy::RandomGroup, 11);
        assert_eq!(a, b);
        let groups = a.groups().unwrap();
        let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let mut want = GroupingTable::semantic().sizes();
        sizes.sort();
        want.sort();
        assert_eq!(sizes, want);
        let mut all: Vec<String> = groups.into_iter().flatten().collect();
        all.sort();
        let mut cat: Vec<String> = SubTaskCatalog::clevr().entries().iter().map(|e| e.op.clone()).collect();
        cat.sort();
        assert_eq!(all, cat);
        assert_ne!(lib(Strategy::RandomGroup, 12).groups(), a.groups());
    }

    #[test]
    fn order_uses_position_modulo_twelve() {
        let l = lib(Strategy::Order, 0);
        assert_eq!(l.assign("count", 12).unwrap(), 0);
        assert_eq!(l.assign("count", 3).unwrap(), 3);
        assert_eq!(l.assign("count", 11).unwrap(), 11);
        assert_eq!(l.assign("filter_color", 3).unwrap(), l.assign("exist", 3).unwrap());
        assert!(l.assign("teleport", 0).is_err());
    }

    #[test]
    fn grouping_tables_must_partition_the_catalog() {
        let cat = SubTaskCatalog::clevr();
        let mut t = GroupingTable::semantic();
        t.groups[0].push("count".into());
        assert!(ModuleLibrary::from_groups(Strategy::SemanticGroup, &cat, &t, 0).is_err());
        let mut t = GroupingTable::semantic();
        t.groups.pop();
        assert!(ModuleLibrary::from_groups(Strategy::SemanticGroup, &cat, &t, 0).is_err());
        let t = GroupingTable::from_json(&GroupingTable::semantic().to_json()).unwrap();
        assert_eq!(t, GroupingTable::semantic());
    }

    #[test]
    fn budgets_scale_with_module_count() {
        let cfg = ModelConfig {
            n_layers_monolithic: 12,
            ..ModelConfig::default()
        };
        let dims = SharedDims {
            vocab_size: 50,
            n_answers: 22,
            feat_dim: 12,
        };
        let cat = SubTaskCatalog::clevr();
        let sem = parameter_budget(
            &ModuleLibrary::build(Strategy::SemanticGroup, &cat, 0).unwrap(),
            &cfg,
            dims,
        );
        let ind = parameter_budget(
            &ModuleLibrary::build(Strategy::Individual, &cat, 0).unwrap(),
            &cfg,
            dims,
        );
        let mono = monolithic_budget(&cfg, dims);
        assert_eq!(sem.encoder, mono.encoder);
        assert_eq!(ind.encoder * 12, mono.encoder * 26);
        assert!(ind.total() > sem.total());
        assert_eq!(sem.shared, ind.shared);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("modular".parse::<Strategy>().is_err());
    }
}
