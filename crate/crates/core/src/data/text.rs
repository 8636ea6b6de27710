use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::library::{SubTaskCatalog, COLORS, MATERIALS, SHAPES, SIZES};
use crate::program::Program;

/// Function words used by [`question_text`]; attribute and relation words
/// come from the catalog.
pub const QUESTION_WORDS: [&str; 29] = [
    "how", "many", "are", "there", "any", "things", "the", "what", "is", "of", "do", "and", "have", "same", "as",
    "both", "either", "or", "number", "equal", "to", "greater", "less", "than", "with", "color", "shape", "size",
    "material",
];

/// Deterministic English-like rendering of a program, used as the
/// question for the text-input baseline.
pub fn question_text(program: &Program) -> String {
    fn set(p: &Program, i: usize) -> String {
        let n = p.node(i);
        let arg = n.arg.as_deref().unwrap_or("");
        match n.op.as_str() {
            "scene" => "things".into(),
            op if op.starts_with("filter_") => format!("{arg} {}", set(p, n.inputs[0])),
            "relate" => format!("things {arg} of {}", obj(p, n.inputs[0])),
            op if op.starts_with("same_") => {
                format!("things with same {} as {}", &op[5..], obj(p, n.inputs[0]))
            }
            "intersect" => format!("both {} and {}", set(p, n.inputs[0]), set(p, n.inputs[1])),
            "union" => format!("either {} or {}", set(p, n.inputs[0]), set(p, n.inputs[1])),
            _ => value(p, i),
        }
    }
    fn obj(p: &Program, i: usize) -> String {
        let n = p.node(i);
        match n.op.as_str() {
            "unique" => format!("the {}", set(p, n.inputs[0])),
            _ => value(p, i),
        }
    }
    fn value(p: &Program, i: usize) -> String {
        let n = p.node(i);
        let a = |k: usize| n.inputs[k];
        match n.op.as_str() {
            "count" => format!("how many {}", set(p, a(0))),
            "exist" => format!("are there any {}", set(p, a(0))),
            op if op.starts_with("query_") => format!("what {} is {}", &op[6..], obj(p, a(0))),
            "equal_integer" => format!("is {} equal to {}", number(p, a(0)), number(p, a(1))),
            "greater_than" => format!("is {} greater than {}", number(p, a(0)), number(p, a(1))),
            "less_than" => format!("is {} less than {}", number(p, a(0)), number(p, a(1))),
            op if op.starts_with("equal_") => {
                format!("do {} and {} have same {}", obj(p, a(0)), obj(p, a(1)), &op[6..])
            }
            "unique" => obj(p, i),
            _ => set(p, i),
        }
    }
    fn number(p: &Program, i: usize) -> String {
        let n = p.node(i);
        match n.op.as_str() {
            "count" => format!("number of {}", set(p, n.inputs[0])),
            _ => value(p, i),
        }
    }
    value(program, program.root())
}

/// Shared word table for program tokens and question words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Sub-task names, argument words, then question words.
    pub fn build(catalog: &SubTaskCatalog) -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut add = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for e in catalog.entries() {
            add(&e.op);
        }
        for w in catalog.argument_words() {
            add(&w);
        }
        for w in COLORS.iter().chain(&SHAPES).chain(&SIZES).chain(&MATERIALS) {
            add(w);
        }
        for w in QUESTION_WORDS.iter() {
            add(w);
        }
        Self::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Closed answer set: yes/no, 0..8 and every attribute value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    inner: Vocabulary,
}

impl From<Vec<String>> for AnswerVocab {
    fn from(words: Vec<String>) -> Self {
        Self {
            inner: Vocabulary::from(words),
        }
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.inner.words
    }
}

impl Default for AnswerVocab {
    fn default() -> Self {
        let mut words = vec!["yes".to_string(), "no".to_string()];
        words.extend((0..=8).map(|n| n.to_string()));
        for w in COLORS.iter().chain(&SHAPES).chain(&SIZES).chain(&MATERIALS) {
            words.push(w.to_string());
        }
        Self::from(words)
    }
}

impl AnswerVocab {
    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.inner.id(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.inner.word(id)
    }

    pub fn words(&self) -> &[String] {
        self.inner.words()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_syntax;

    #[test]
    fn renders_nested_questions() {
        let p = parse_syntax("count(filter_color[red](filter_shape[cube](scene())))").unwrap();
        assert_eq!(question_text(&p), "how many red cube things");
        let p =
            parse_syntax("query_size(unique(filter_shape[sphere](relate[left](unique(filter_color[blue](scene()))))))")
                .unwrap();
        assert_eq!(
            question_text(&p),
            "what size is the sphere things left of the blue things"
        );
        let p = parse_syntax("less_than(count(scene()),count(same_material(unique(scene()))))").unwrap();
        assert_eq!(
            question_text(&p),
            "is number of things less than number of things with same material as the things"
        );
    }

    #[test]
    fn answer_vocab_has_22_entries() {
        let a = AnswerVocab::default();
        assert_eq!(a.len(), 22);
        assert_eq!(a.id("yes"), Some(0));
        assert_eq!(a.id("8"), Some(10));
        assert_eq!(a.word(21), Some("rubber"));
    }

    #[test]
    fn vocabulary_starts_with_the_catalog() {
        let cat = SubTaskCatalog::clevr();
        let v = Vocabulary::build(&cat);
        assert_eq!(v.id("scene"), Some(0));
        assert_eq!(v.id("same_size"), Some(25));
        assert!(v.id("red").is_some() && v.id("how").is_some() && v.id("material").is_some());
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
