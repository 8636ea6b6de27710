use super::{ModelError, Network, Result};
use crate::data::Sample;
use crate::program::Program;
use crate::tensor::Tensor;

/// A sample converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[H, W, FEATURE_DIM]`.
    pub features: Tensor<f32>,
    pub program: Program,
    /// Word ids per program node: the op, then the argument if any.
    pub node_tokens: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub answer: usize,
    pub family: String,
}

impl Example {
    pub fn from_sample(sample: &Sample, net: &Network) -> Result<Self> {
        let word = |w: &str| {
            net.vocab
                .id(w)
                .ok_or_else(|| ModelError::Mismatch(format!("word {w} is not in the vocabulary")))
        };
        let node_tokens = sample
            .program
            .nodes()
            .iter()
            .map(|n| {
                let mut t = vec![word(&n.op)?];
                if let Some(a) = &n.arg {
                    t.push(word(a)?);
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let question = sample
            .question
            .split_whitespace()
            .map(word)
            .collect::<Result<Vec<_>>>()?;
        let answer = net
            .answers
            .id(&sample.answer)
            .ok_or_else(|| ModelError::Mismatch(format!("answer {} is not in the answer set", sample.answer)))?;
        if (sample.scene.height, sample.scene.width) != (net.spec.height, net.spec.width) {
            return Err(ModelError::Mismatch(format!(
                "scene is {}x{}, model expects {}x{}",
                sample.scene.height, sample.scene.width, net.spec.height, net.spec.width
            )));
        }
        Ok(Self {
            id: sample.id.clone(),
            features: sample.scene.featurize(),
            program: sample.program.clone(),
            node_tokens,
            question,
            answer,
            family: sample.family.clone(),
        })
    }

    pub fn many(samples: &[Sample], net: &Network) -> Result<Vec<Self>> {
        samples.iter().map(|s| Self::from_sample(s, net)).collect()
    }

    /// Program tokens flattened in post-order.
    pub fn program_tokens(&self) -> Vec<usize> {
        self.node_tokens.iter().flatten().copied().collect()
    }
}
