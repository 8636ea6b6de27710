use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{thread_count, HarnessError, Result};
use crate::data::{exec_program_symbolic, read_manifest, read_samples, Sample};
use crate::model::{load_model, predict, Example, ModelError, TmnModel};
use crate::tensor::Tape;
use crate::transformer::Dropout;

/// Exact-match counts, overall and per family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub correct: usize,
    pub total: usize,
    /// family -> (correct, total)
    pub per_family: BTreeMap<String, (usize, usize)>,
}

impl SplitMetrics {
    pub fn record(&mut self, family: &str, ok: bool) {
        let e = self.per_family.entry(family.to_string()).or_default();
        e.1 += 1;
        self.total += 1;
        if ok {
            e.0 += 1;
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn family_accuracy(&self) -> BTreeMap<String, f64> {
        self.per_family
            .iter()
            .map(|(f, &(c, t))| (f.clone(), c as f64 / t as f64))
            .collect()
    }
}

/// Anything that answers a sample with an answer word.
pub trait Answerer: Sync {
    fn answer(&self, sample: &Sample) -> Result<String>;
}

/// Answers by executing the program on the scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleShim;

impl Answerer for OracleShim {
    fn answer(&self, sample: &Sample) -> Result<String> {
        Ok(exec_program_symbolic(&sample.program, &sample.scene)?)
    }
}

/// Always gives the same answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantShim(pub String);

impl ConstantShim {
    /// The most frequent answer in `samples`; ties go to the smallest word.
    pub fn majority(samples: &[Sample]) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            *counts.entry(&s.answer).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for (w, c) in counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((w, c));
            }
        }
        Self(best.map(|(w, _)| w.to_string()).unwrap_or_default())
    }
}

impl Answerer for ConstantShim {
    fn answer(&self, _: &Sample) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// A trained model as an [`Answerer`].
pub struct ModelAnswerer<'a>(pub &'a TmnModel<f32>);

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, sample: &Sample) -> Result<String> {
        let net = &self.0.net;
        let ex = Example::from_sample(sample, net)?;
        let (id, _) = run_one(self.0, &ex)?;
        Ok(net.answers.word(id).unwrap_or_default().to_string())
    }
}

/// Predicted answer id and executed layer count; fails on a layer-budget
/// violation.
fn run_one(model: &TmnModel<f32>, ex: &Example) -> Result<(usize, usize)> {
    let mut tape = Tape::with_params(&model.params);
    let trace = model.net.forward(&mut tape, ex, &mut Dropout::off())?;
    let expected = model.net.expected_layers(ex);
    if trace.layers != expected {
        return Err(HarnessError::LayerBudget {
            sample: ex.id.clone(),
            expected,
            found: trace.layers,
        });
    }
    Ok((predict(tape.data(trace.logits)), trace.layers))
}

/// Runs `f` over `items` on [`thread_count`] threads; results keep input
/// order.
fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = thread_count().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_answerer(answerer: &dyn Answerer, samples: &[Sample]) -> Result<SplitMetrics> {
    let answers = parallel_map(samples, |s| answerer.answer(s))?;
    let mut m = SplitMetrics::default();
    for (s, a) in samples.iter().zip(answers) {
        m.record(&s.family, a == s.answer);
    }
    Ok(m)
}

/// Accuracy of `model` on prepared examples, checking the executed-layer
/// count of every forward pass. Returns the metrics and the number of
/// passes audited.
pub fn evaluate_model(model: &TmnModel<f32>, examples: &[Example]) -> Result<(SplitMetrics, usize)> {
    let preds = parallel_map(examples, |ex| run_one(model, ex))?;
    let mut m = SplitMetrics::default();
    for (ex, (p, _)) in examples.iter().zip(&preds) {
        m.record(&ex.family, *p == ex.answer);
    }
    Ok((m, preds.len()))
}

/// Loads a checkpoint and scores it on a split file. When the split's
/// directory holds a dataset manifest, its catalog hash must match the
/// checkpoint's.
pub fn evaluate_checkpoint(ckpt: &Path, split_file: &Path) -> Result<SplitMetrics> {
    let (model, manifest) = load_model::<f32>(ckpt)?;
    let dir = split_file.parent().unwrap_or(Path::new("."));
    if dir.join("manifest.json").exists() {
        let data = read_manifest(dir)?;
        if data.catalog_hash != manifest.catalog_hash {
            return Err(ModelError::Mismatch(format!(
                "dataset catalog {} does not match checkpoint catalog {}",
                data.catalog_hash, manifest.catalog_hash
            ))
            .into());
        }
    }
    let samples = read_samples(split_file)?;
    let examples = Example::many(&samples, &model.net)?;
    Ok(evaluate_model(&model, &examples)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_splits, Split, SplitKind, SplitSpec};

    #[test]
    fn shims_score_as_expected() {
        let spec = SplitSpec::new(SplitKind::Closure, 1, 200, 40, 40);
        let (splits, _) = build_splits(&spec).unwrap();
        for samples in splits.values() {
            let m = evaluate_answerer(&OracleShim, samples).unwrap();
            assert_eq!(m.correct, m.total);
        }
        let train = &splits[&Split::Train];
        let c = ConstantShim::majority(train);
        let n = train.iter().filter(|s| s.answer == c.0).count();
        assert!(train
            .iter()
            .all(|s| train.iter().filter(|t| t.answer == s.answer).count() <= n));
        let m = evaluate_answerer(&c, train).unwrap();
        assert_eq!(m.correct, n);
        let weighted: f64 = m
            .per_family
            .values()
            .map(|&(c, t)| c as f64 / t as f64 * t as f64)
            .sum::<f64>()
            / m.total as f64;
        assert!((weighted - m.accuracy()).abs() < 1e-9);
    }

    #[test]
    fn majority_breaks_ties_by_word() {
        let spec = SplitSpec::new(SplitKind::Closure, 1, 30, 10, 10);
        let (splits, _) = build_splits(&spec).unwrap();
        let mut two = vec![splits[&Split::Train][0].clone(), splits[&Split::Train][1].clone()];
        two[0].answer = "yes".into();
        two[1].answer = "no".into();
        assert_eq!(ConstantShim::majority(&two).0, "no");
    }
}
