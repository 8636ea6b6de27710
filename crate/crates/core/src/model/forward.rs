use super::{Example, ModelError, ModelKind, Network, Result};
use crate::program::{plan, ExecutionPlan, StepInput};
use crate::tensor::{Scalar, Tape, TensorError, Var};
use crate::transformer::Dropout;

/// One executed module (or baseline layer group).
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Post-order node position; for whole-program baselines, 0.
    pub position: usize,
    pub op: String,
    /// Module index, or the layer index for baselines.
    pub module: usize,
    pub thread: usize,
    /// Word ids appended after the head and visual tokens.
    pub tokens: Vec<usize>,
    /// Attention node of each executed layer.
    pub attention: Vec<Var>,
    /// Index of the first visual token in the layer input.
    pub visual_start: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[1, C]`.
    pub logits: Var,
    /// Encoder layers executed.
    pub layers: usize,
    pub steps: Vec<StepTrace>,
    pub visual_tokens: usize,
}

/// Mean of the visual tokens `[n, d]` as a `[1, d]` head token.
pub fn init_head<T: Scalar>(tape: &mut Tape<'_, T>, visual: Var) -> Result<Var> {
    if tape.shape(visual).first().copied().unwrap_or(0) == 0 {
        return Err(TensorError::Invalid("head initialization needs at least one visual token".into()).into());
    }
    Ok(tape.mean_rows(visual)?)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

struct Io {
    head: Var,
    visual: Var,
}

impl Network {
    fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, words: &[usize], segment: usize) -> Result<Var> {
        let segs = vec![segment; words.len()];
        let pos: Vec<usize> = (0..words.len()).collect();
        Ok(self.embeddings.embed_program_tokens(tape, words, &segs, &pos)?)
    }

    /// Runs `layers` of stack `stack` on `x`, in order.
    fn run_layers<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        stack: usize,
        layers: &[usize],
        mut x: Var,
        dropout: &mut Dropout<'_>,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let cfg = &self.spec.config;
        for &l in layers {
            let out = self.stacks[stack][l].forward(tape, x, cfg, dropout)?;
            attention.push(out.attention);
            x = out.out;
        }
        Ok(x)
    }

    fn check_module(&self, module: usize) -> Result<()> {
        if module >= self.stacks.len() {
            return Err(ModelError::ModuleOutOfRange {
                module,
                count: self.stacks.len(),
            });
        }
        Ok(())
    }

    fn split_output<T: Scalar>(&self, tape: &mut Tape<'_, T>, out: Var, n_visual: usize) -> Result<Io> {
        let head = tape.slice_rows(out, 0, 1)?;
        let visual = tape.slice_rows(out, 1, n_visual)?;
        Ok(Io { head, visual })
    }

    /// `[head, visual..., tokens...]` through the module's K layers; returns
    /// the transformed head and visual tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn run_module<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        module: usize,
        head: Var,
        visual: Var,
        tokens: &[usize],
        segment: usize,
        dropout: &mut Dropout<'_>,
        trace: &mut StepTrace,
    ) -> Result<(Var, Var)> {
        self.check_module(module)?;
        let n_visual = tape.shape(visual)[0];
        let mut parts = vec![head, visual];
        if !tokens.is_empty() {
            parts.push(self.embed_tokens(tape, tokens, segment)?);
        }
        let x = tape.concat_rows(&parts)?;
        trace.visual_start = 1;
        trace.seq_len = tape.shape(x)[0];
        let layers: Vec<usize> = (0..self.stacks[module].len()).collect();
        let out = self.run_layers(tape, module, &layers, x, dropout, &mut trace.attention)?;
        let io = self.split_output(tape, out, n_visual)?;
        Ok((io.head, io.visual))
    }

    /// `[head0, visual0..., head1, visual1..., tokens...]` with segment
    /// embeddings 0 and 1 marking the two threads; returns the transformed
    /// first set.
    #[allow(clippy::too_many_arguments)]
    pub fn run_merge<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        module: usize,
        first: (Var, Var),
        second: (Var, Var),
        tokens: &[usize],
        dropout: &mut Dropout<'_>,
        trace: &mut StepTrace,
    ) -> Result<(Var, Var)> {
        self.check_module(module)?;
        let (n0, n1) = (tape.shape(first.1)[0], tape.shape(second.1)[0]);
        if n0 != n1 {
            return Err(ModelError::MergeMismatch(n0, n1));
        }
        let seg = tape.param(self.embeddings.segment);
        let mut parts = Vec::with_capacity(3);
        for (s, (h, v)) in [first, second].into_iter().enumerate() {
            let set = tape.concat_rows(&[h, v])?;
            let rows = tape.gather(seg, &vec![s; n0 + 1])?;
            parts.push(tape.add(set, rows)?);
        }
        if !tokens.is_empty() {
            parts.push(self.embed_tokens(tape, tokens, 0)?);
        }
        let x = tape.concat_rows(&parts)?;
        trace.visual_start = 1;
        trace.seq_len = tape.shape(x)[0];
        let layers: Vec<usize> = (0..self.stacks[module].len()).collect();
        let out = self.run_layers(tape, module, &layers, x, dropout, &mut trace.attention)?;
        let io = self.split_output(tape, out, n0)?;
        Ok((io.head, io.visual))
    }

    fn classify<T: Scalar>(&self, tape: &mut Tape<'_, T>, head: Var) -> Result<Var> {
        let w = tape.param(self.classifier_w);
        let b = tape.param(self.classifier_b);
        let logits = tape.matmul(head, w)?;
        Ok(tape.add_row(logits, b)?)
    }

    fn encode_visual<T: Scalar>(&self, tape: &mut Tape<'_, T>, ex: &Example) -> Result<Var> {
        Ok(self.grid.encode_grid_features(tape, &ex.features.cast())?)
    }

    /// Executes `plan` as a module network.
    pub fn forward_tmn<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ex: &Example,
        plan: &ExecutionPlan,
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardTrace> {
        let visual = self.encode_visual(tape, ex)?;
        let n_visual = tape.shape(visual)[0];
        let head = init_head(tape, visual)?;
        let mut threads: [Option<(Var, Var)>; 2] = [None, None];
        let mut steps = Vec::with_capacity(plan.len());
        let mut layers = 0;
        for step in &plan.steps {
            let node = ex.program.node(step.position);
            let module = self.library.assign(&node.op, step.position)?;
            let tokens = &ex.node_tokens[step.position];
            let mut trace = StepTrace {
                position: step.position,
                op: node.op.clone(),
                module,
                thread: step.thread,
                tokens: tokens.clone(),
                attention: Vec::new(),
                visual_start: 1,
                seq_len: 0,
            };
            let missing = || ModelError::Mismatch(format!("step {} has no input on its thread", step.position));
            let out = match step.input {
                StepInput::Fresh => {
                    self.run_module(tape, module, head, visual, tokens, step.thread, dropout, &mut trace)?
                }
                StepInput::Previous => {
                    let (h, v) = threads[step.thread].ok_or_else(missing)?;
                    self.run_module(tape, module, h, v, tokens, step.thread, dropout, &mut trace)?
                }
                StepInput::Merge => {
                    let a = threads[0].ok_or_else(missing)?;
                    let b = threads[1].take().ok_or_else(missing)?;
                    self.run_merge(tape, module, a, b, tokens, dropout, &mut trace)?
                }
            };
            layers += trace.attention.len();
            threads[step.thread] = Some(out);
            steps.push(trace);
        }
        let (head, _) = threads[0].ok_or_else(|| ModelError::Mismatch("empty plan".into()))?;
        let logits = self.classify(tape, head)?;
        Ok(ForwardTrace {
            logits,
            layers,
            steps,
            visual_tokens: n_visual,
        })
    }

    /// Monolithic baselines.
    pub fn forward_baseline<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ex: &Example,
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardTrace> {
        let visual = self.encode_visual(tape, ex)?;
        let n_visual = tape.shape(visual)[0];
        let head = init_head(tape, visual)?;
        let depth = self.stacks[0].len();
        let mut steps = Vec::new();
        let (head, layers) = match self.kind() {
            ModelKind::Transformer | ModelKind::TransformerPr | ModelKind::TransformerPrVl => {
                let tokens = match self.kind() {
                    ModelKind::Transformer => ex.question.clone(),
                    _ => ex.program_tokens(),
                };
                let n_layers = match self.kind() {
                    ModelKind::TransformerPrVl => ex.program.len(),
                    _ => depth,
                };
                let mut trace = StepTrace {
                    position: 0,
                    op: self.kind().as_str().to_string(),
                    module: 0,
                    thread: 0,
                    tokens: tokens.clone(),
                    attention: Vec::new(),
                    visual_start: 1,
                    seq_len: 0,
                };
                let mut parts = vec![head, visual];
                if !tokens.is_empty() {
                    parts.push(self.embed_tokens(tape, &tokens, 0)?);
                }
                let x = tape.concat_rows(&parts)?;
                trace.seq_len = tape.shape(x)[0];
                let order: Vec<usize> = (0..n_layers).map(|i| i % depth).collect();
                let out = self.run_layers(tape, 0, &order, x, dropout, &mut trace.attention)?;
                let head = tape.slice_rows(out, 0, 1)?;
                steps.push(trace);
                (head, n_layers)
            }
            ModelKind::TransformerPrVlSt => {
                let (mut h, mut v) = (head, visual);
                for (t, tokens) in ex.node_tokens.iter().enumerate() {
                    let mut trace = StepTrace {
                        position: t,
                        op: ex.program.node(t).op.clone(),
                        module: t % depth,
                        thread: 0,
                        tokens: tokens.clone(),
                        attention: Vec::new(),
                        visual_start: 1,
                        seq_len: 0,
                    };
                    let emb = self.embed_tokens(tape, tokens, 0)?;
                    let x = tape.concat_rows(&[h, v, emb])?;
                    trace.seq_len = tape.shape(x)[0];
                    let out = self.run_layers(tape, 0, &[t % depth], x, dropout, &mut trace.attention)?;
                    let io = self.split_output(tape, out, n_visual)?;
                    (h, v) = (io.head, io.visual);
                    steps.push(trace);
                }
                (h, ex.node_tokens.len())
            }
            ModelKind::Tmn => unreachable!("handled by forward_tmn"),
        };
        let logits = self.classify(tape, head)?;
        Ok(ForwardTrace {
            logits,
            layers,
            steps,
            visual_tokens: n_visual,
        })
    }

    /// Forward pass for any model kind; TMN plans with the configured
    /// structure.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ex: &Example,
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardTrace> {
        match self.kind() {
            ModelKind::Tmn => {
                let p = plan(&ex.program, self.spec.structure)?;
                self.forward_tmn(tape, ex, &p, dropout)
            }
            _ => self.forward_baseline(tape, ex, dropout),
        }
    }

    /// Mean cross-entropy over `batch`, built on one tape.
    pub fn batch_loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &[&Example],
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<ForwardTrace>)> {
        let mut traces = Vec::with_capacity(batch.len());
        for ex in batch {
            traces.push(self.forward(tape, ex, dropout)?);
        }
        let logits: Vec<Var> = traces.iter().map(|t| t.logits).collect();
        let all = tape.concat_rows(&logits)?;
        let labels: Vec<usize> = batch.iter().map(|e| e.answer).collect();
        Ok((tape.cross_entropy(all, &labels)?, traces))
    }

    /// Executed-layer count the layer-budget law predicts for `ex`.
    pub fn expected_layers(&self, ex: &Example) -> usize {
        let cfg = &self.spec.config;
        match self.kind() {
            ModelKind::Tmn => cfg.k_layers * ex.program.len(),
            ModelKind::TransformerPrVl | ModelKind::TransformerPrVlSt => ex.program.len(),
            ModelKind::Transformer | ModelKind::TransformerPr => cfg.n_layers_monolithic,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.0f32, 1.0, 0.0]), 1);
        assert_eq!(predict(&[2.0f32; 5]), 0);
        assert_eq!(predict(&[0.5f64, 3.0, 3.0]), 1);
        let shifted: Vec<f64> = [0.5f64, 3.0, 1.0].iter().map(|x| x + 100.0).collect();
        assert_eq!(predict(&shifted), 1);
    }

    #[test]
    fn head_is_the_visual_mean() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., -1., -2., -3.]).unwrap());
        let h = init_head(&mut tape, v).unwrap();
        assert_eq!(tape.data(h), &[0.0, 0.0, 0.0]);
        let one = tape.constant(Tensor::from_f64(&[1, 2], &[4., 5.]).unwrap());
        let h = init_head(&mut tape, one).unwrap();
        assert_eq!(tape.data(h), &[4., 5.]);
    }
}
