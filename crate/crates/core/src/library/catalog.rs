use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LibraryError;

/// Kind of value flowing along a program edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Set,
    Object,
    Integer,
    Boolean,
    Attribute,
}

impl ValueType {
    /// Types a question may end in.
    pub fn is_answer(self) -> bool {
        matches!(self, Self::Integer | Self::Boolean | Self::Attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskSpec {
    pub op: String,
    pub inputs: Vec<ValueType>,
    pub output: ValueType,
    /// Allowed argument words; `None` when the sub-task takes no argument.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<Vec<String>>,
}

impl SubTaskSpec {
    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    pub fn takes_argument(&self) -> bool {
        self.args.is_some()
    }

    pub fn accepts(&self, arg: &str) -> bool {
        self.args.as_ref().is_some_and(|a| a.iter().any(|w| w == arg))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CatalogFile {
    name: String,
    entries: Vec<SubTaskSpec>,
}

/// Ordered set of sub-task definitions.
///
/// Stored on disk as JSON:
///
/// ```json
/// {"name": "clevr-26",
///  "entries": [{"op": "filter_color", "inputs": ["set"], "output": "set",
///               "args": ["red", "blue", "green", "yellow"]}, ...]}
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTaskCatalog {
    name: String,
    entries: Vec<SubTaskSpec>,
    index: HashMap<String, usize>,
}

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["metal", "rubber"];
pub const RELATIONS: [&str; 4] = ["left", "right", "above", "below"];

impl SubTaskCatalog {
    pub fn new(name: impl Into<String>, entries: Vec<SubTaskSpec>) -> Result<Self, LibraryError> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.op.clone(), i).is_some() {
                return Err(LibraryError::Catalog(format!("duplicate sub-task {}", e.op)));
            }
            if e.arity() > 2 {
                return Err(LibraryError::Catalog(format!(
                    "sub-task {} has arity {} (max 2)",
                    e.op,
                    e.arity()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
            index,
        })
    }

    /// The 26 CLEVR-style sub-tasks, ordered like the Individual library.
    pub fn clevr() -> Self {
        use ValueType::*;
        let words = |w: &[&str]| Some(w.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let spec = |op: &str, inputs: &[ValueType], output, args| SubTaskSpec {
            op: op.into(),
            inputs: inputs.to_vec(),
            output,
            args,
        };
        let entries = vec![
            spec("scene", &[], Set, None),
            spec("count", &[Set], Integer, None),
            spec("exist", &[Set], Boolean, None),
            spec("intersect", &[Set, Set], Set, None),
            spec("relate", &[Object], Set, words(&RELATIONS)),
            spec("union", &[Set, Set], Set, None),
            spec("unique", &[Set], Object, None),
            spec("greater_than", &[Integer, Integer], Boolean, None),
            spec("less_than", &[Integer, Integer], Boolean, None),
            spec("equal_color", &[Object, Object], Boolean, None),
            spec("equal_integer", &[Integer, Integer], Boolean, None),
            spec("equal_material", &[Object, Object], Boolean, None),
            spec("equal_shape", &[Object, Object], Boolean, None),
            spec("equal_size", &[Object, Object], Boolean, None),
            spec("filter_color", &[Set], Set, words(&COLORS)),
            spec("filter_material", &[Set], Set, words(&MATERIALS)),
            spec("filter_shape", &[Set], Set, words(&SHAPES)),
            spec("filter_size", &[Set], Set, words(&SIZES)),
            spec("query_color", &[Object], Attribute, None),
            spec("query_material", &[Object], Attribute, None),
            spec("query_shape", &[Object], Attribute, None),
            spec("query_size", &[Object], Attribute, None),
            spec("same_color", &[Object], Set, None),
            spec("same_material", &[Object], Set, None),
            spec("same_shape", &[Object], Set, None),
            spec("same_size", &[Object], Set, None),
        ];
        Self::new("clevr-26", entries).expect("built-in catalog is well formed")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SubTaskSpec] {
        &self.entries
    }

    pub fn get(&self, op: &str) -> Option<&SubTaskSpec> {
        self.index.get(op).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, op: &str) -> Option<usize> {
        self.index.get(op).copied()
    }

    /// Every distinct argument word, in catalog order.
    pub fn argument_words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            for w in e.args.iter().flatten() {
                if !out.contains(w) {
                    out.push(w.clone());
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CatalogFile {
            name: self.name.clone(),
            entries: self.entries.clone(),
        })
        .expect("catalog serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        let file: CatalogFile = serde_json::from_str(text).map_err(|e| LibraryError::Catalog(e.to_string()))?;
        Self::new(file.name, file.entries)
    }

    /// SHA-256 of the compact JSON form; recorded in checkpoint manifests.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(&CatalogFile {
            name: self.name.clone(),
            entries: self.entries.clone(),
        })
        .expect("catalog serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

impl Default for SubTaskCatalog {
    fn default() -> Self {
        Self::clevr()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clevr_catalog_has_26_unique_entries() {
        let c = SubTaskCatalog::clevr();
        assert_eq!(c.len(), 26);
        let mut names: Vec<_> = c.entries().iter().map(|e| e.op.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 26);
    }

    #[test]
    fn arities_follow_sub_task_kind() {
        let c = SubTaskCatalog::clevr();
        assert_eq!(c.get("scene").unwrap().arity(), 0);
        for op in [
            "count",
            "exist",
            "unique",
            "relate",
            "filter_size",
            "query_color",
            "same_shape",
        ] {
            assert_eq!(c.get(op).unwrap().arity(), 1, "{op}");
        }
        for op in [
            "intersect",
            "union",
            "equal_color",
            "equal_integer",
            "greater_than",
            "less_than",
        ] {
            assert_eq!(c.get(op).unwrap().arity(), 2, "{op}");
        }
        assert!(c.get("relate").unwrap().takes_argument());
        assert!(c.get("filter_color").unwrap().accepts("red"));
        assert!(!c.get("filter_color").unwrap().accepts("teal"));
        assert!(!c.get("count").unwrap().takes_argument());
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let c = SubTaskCatalog::clevr();
        let back = SubTaskCatalog::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let mut e = SubTaskCatalog::clevr().entries().to_vec();
        e.push(e[0].clone());
        assert!(SubTaskCatalog::new("dup", e).is_err());
    }
}
