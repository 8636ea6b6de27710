use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, Result};
use crate::data::{exec_values, Sample, Value};
use crate::model::{load_model, Example, ModelKind, TmnModel};
use crate::tensor::Tape;
use crate::transformer::Dropout;

/// Head-token attention of one module step (or one baseline layer), averaged
/// over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// `step03_filter_color_red` for module steps, `layer02` for baselines.
    pub label: String,
    pub position: Option<usize>,
    pub op: String,
    pub arg: Option<String>,
    /// Module index (TMN) or shared-stack layer index (baselines).
    pub module: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` attention on the visual tokens.
    pub cells: Vec<f64>,
    /// Total head-token attention on visual tokens.
    pub visual_mass: f64,
    /// Total head-token attention over the whole sequence.
    pub row_sum: f64,
}

impl AttentionMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            let row: Vec<String> = self.cells[r * self.width..(r + 1) * self.width]
                .iter()
                .map(|x| format!("{x:.8}"))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Head-averaged row 0 of a recorded attention node.
fn head_row(tape: &Tape<'_, f32>, attention: crate::tensor::Var) -> Result<Vec<f64>> {
    let (heads, t, probs) = tape
        .attention_probs(attention)
        .ok_or_else(|| HarnessError::Usage("trace holds no attention weights".into()))?;
    let mut row = vec![0.0; t];
    for h in 0..heads {
        for (j, r) in row.iter_mut().enumerate() {
            *r += probs[h * t * t + j] as f64 / heads as f64;
        }
    }
    Ok(row)
}

/// One map per module step for module networks (from the step's last
/// layer), one per executed layer for baselines.
pub fn attention_maps(model: &TmnModel<f32>, sample: &Sample) -> Result<Vec<AttentionMap>> {
    let net = &model.net;
    let ex = Example::from_sample(sample, net)?;
    let mut tape = Tape::with_params(&model.params);
    let trace = net.forward(&mut tape, &ex, &mut Dropout::off())?;
    let (h, w) = (net.spec.height, net.spec.width);
    let n = trace.visual_tokens;
    let mut maps = Vec::new();
    let mut push = |label: String,
                    position: Option<usize>,
                    op: String,
                    arg: Option<String>,
                    module: usize,
                    start: usize,
                    row: Vec<f64>| {
        let cells = row[start..start + n].to_vec();
        maps.push(AttentionMap {
            label,
            position,
            op,
            arg,
            module,
            height: h,
            width: w,
            visual_mass: cells.iter().sum(),
            row_sum: row.iter().sum(),
            cells,
        });
    };
    if net.kind() == ModelKind::Tmn {
        for (i, step) in trace.steps.iter().enumerate() {
            let last = *step
                .attention
                .last()
                .ok_or_else(|| HarnessError::Usage("module step ran no layer".into()))?;
            let node = ex.program.node(step.position);
            let mut label = format!("step{i:02}_{}", node.op);
            if let Some(a) = &node.arg {
                label.push('_');
                label.push_str(a);
            }
            let row = head_row(&tape, last)?;
            push(
                label,
                Some(step.position),
                node.op.clone(),
                node.arg.clone(),
                step.module,
                step.visual_start,
                row,
            );
        }
    } else {
        let mut layer = 0;
        for step in &trace.steps {
            for &a in &step.attention {
                let row = head_row(&tape, a)?;
                let module = match net.kind() {
                    ModelKind::TransformerPrVlSt => step.module,
                    _ => layer % net.stacks[0].len(),
                };
                push(
                    format!("layer{layer:02}"),
                    None,
                    step.op.clone(),
                    None,
                    module,
                    step.visual_start,
                    row,
                );
                layer += 1;
            }
        }
    }
    Ok(maps)
}

/// Writes one CSV per map plus `summary.csv` into `dir`.
pub fn write_attention_maps(dir: &Path, maps: &[AttentionMap]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut summary = String::from("label,position,op,arg,module,visual_mass,row_sum\n");
    for m in maps {
        let p = dir.join(format!("{}.csv", m.label));
        fs::write(&p, m.to_csv()).map_err(|e| io_err(&p, e))?;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{:.8},{:.8}",
            m.label,
            m.position.map(|p| p.to_string()).unwrap_or_default(),
            m.op,
            m.arg.as_deref().unwrap_or(""),
            m.module,
            m.visual_mass,
            m.row_sum
        );
    }
    let p = dir.join("summary.csv");
    fs::write(&p, summary).map_err(|e| io_err(&p, e))
}

/// Loads a checkpoint, finds `sample_id` in `samples` and dumps its maps.
pub fn dump_attention(ckpt: &Path, samples: &[Sample], sample_id: &str, out: &Path) -> Result<Vec<AttentionMap>> {
    let (model, _) = load_model::<f32>(ckpt)?;
    let sample = samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| HarnessError::Usage(format!("no sample with id {sample_id}")))?;
    let maps = attention_maps(&model, sample)?;
    write_attention_maps(out, &maps)?;
    Ok(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Samples probed.
    pub scenes: usize,
    /// Samples whose filter step put more mean head attention on cells in
    /// the filter's output than on the other cells.
    pub wins: usize,
    pub mean_matching: f64,
    pub mean_other: f64,
}

impl ProbeReport {
    pub fn fraction(&self) -> f64 {
        if self.scenes == 0 {
            0.0
        } else {
            self.wins as f64 / self.scenes as f64
        }
    }
}

/// Over the first `limit` samples having a `filter_*` step whose output
/// set is neither empty nor every object, compares the first such step's
/// head attention on the output cells with the rest. Module networks only.
pub fn attention_probe(model: &TmnModel<f32>, samples: &[Sample], limit: usize) -> Result<ProbeReport> {
    if model.kind() != ModelKind::Tmn {
        return Err(HarnessError::Usage("the attention probe needs a module network".into()));
    }
    let mut report = ProbeReport {
        scenes: 0,
        wins: 0,
        mean_matching: 0.0,
        mean_other: 0.0,
    };
    for s in samples {
        if report.scenes == limit {
            break;
        }
        let occupied = s.scene.occupied();
        let values = exec_values(&s.program, &s.scene)?;
        let target =
            s.program
                .nodes()
                .iter()
                .enumerate()
                .find_map(|(i, n)| match (&values[i], n.op.starts_with("filter_")) {
                    (Value::Set(set), true) if *set != 0 && *set != occupied => Some((i, *set)),
                    _ => None,
                });
        let Some((position, set)) = target else { continue };
        let maps = attention_maps(model, s)?;
        let map = maps
            .iter()
            .find(|m| m.position == Some(position))
            .expect("every node has a step");
        let (mut on, mut off) = ((0.0, 0), (0.0, 0));
        for (c, &a) in map.cells.iter().enumerate() {
            if set >> c & 1 == 1 {
                on = (on.0 + a, on.1 + 1);
            } else {
                off = (off.0 + a, off.1 + 1);
            }
        }
        let (m_on, m_off) = (on.0 / on.1 as f64, off.0 / off.1 as f64);
        report.scenes += 1;
        report.wins += (m_on > m_off) as usize;
        report.mean_matching += m_on;
        report.mean_other += m_off;
    }
    if report.scenes > 0 {
        report.mean_matching /= report.scenes as f64;
        report.mean_other /= report.scenes as f64;
    }
    Ok(report)
}
