use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::evaluate_model;
use super::train::{load_dataset, train_on, Dataset};
use super::{io_err, ExperimentConfig, HarnessError, Result};
use crate::data::{build_splits, write_dataset, SplitKind, SplitSpec};
use crate::library::{Strategy, SubTaskCatalog};
use crate::model::{Example, ModelKind};
use crate::program::Structure;
use crate::transformer::ModelConfig;

pub const SUITES: [&str; 4] = ["main", "specialization", "ablation", "structure"];

/// Scale of a suite: dataset sizes, training schedule and model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sgl_per_type: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub model: ModelConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            data_seed: 7,
            n_train: 16000,
            n_val: 2000,
            n_test: 2000,
            sgl_per_type: 50,
            lr: 1e-3,
            batch_size: 64,
            epochs: 30,
            patience: None,
            model: ModelConfig {
                d_model: 32,
                d_ff: 64,
                dropout: 0.0,
                ..ModelConfig::default()
            },
        }
    }
}

impl SuiteOptions {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    InDist,
    Sysgen,
    /// Held-out samples whose program has a binary node.
    SysgenBinary,
}

struct Column {
    name: &'static str,
    split: SplitKind,
    metric: Metric,
}

struct Row {
    name: &'static str,
    kind: ModelKind,
    strategy: Strategy,
    structure: Structure,
}

const fn tmn(name: &'static str, strategy: Strategy, structure: Structure) -> Row {
    Row {
        name,
        kind: ModelKind::Tmn,
        strategy,
        structure,
    }
}

const fn baseline(name: &'static str, kind: ModelKind) -> Row {
    Row {
        name,
        kind,
        strategy: Strategy::Individual,
        structure: Structure::Stack,
    }
}

fn layout(name: &str) -> Result<(Vec<Row>, Vec<Column>)> {
    let col = |name, split, metric| Column { name, split, metric };
    let closure = |with_binary: bool| {
        let mut c = vec![
            col("in_dist", SplitKind::Closure, Metric::InDist),
            col("sysgen", SplitKind::Closure, Metric::Sysgen),
        ];
        if with_binary {
            c.push(col("sysgen_binary", SplitKind::Closure, Metric::SysgenBinary));
        }
        c
    };
    Ok(match name {
        "main" => (
            vec![
                baseline("transformer", ModelKind::Transformer),
                baseline("transformer_pr", ModelKind::TransformerPr),
                tmn("tmn_stack", Strategy::Individual, Structure::Stack),
                tmn("tmn_tree", Strategy::Individual, Structure::Tree),
            ],
            vec![
                col("cogent", SplitKind::Cogent, Metric::Sysgen),
                col("closure", SplitKind::Closure, Metric::Sysgen),
                col("sgl", SplitKind::Sgl, Metric::Sysgen),
            ],
        ),
        "specialization" => (
            Strategy::ALL
                .iter()
                .map(|&s| tmn(s.as_str(), s, Structure::Stack))
                .collect(),
            closure(false),
        ),
        "ablation" => (
            vec![
                baseline("transformer_pr", ModelKind::TransformerPr),
                baseline("transformer_pr_vl", ModelKind::TransformerPrVl),
                baseline("transformer_pr_vl_st", ModelKind::TransformerPrVlSt),
                tmn("tmn_stack", Strategy::Individual, Structure::Stack),
            ],
            closure(false),
        ),
        "structure" => (
            vec![
                tmn("tmn_stack", Strategy::Individual, Structure::Stack),
                tmn("tmn_tree", Strategy::Individual, Structure::Tree),
            ],
            closure(true),
        ),
        other => {
            return Err(HarnessError::Usage(format!(
                "unknown suite {other}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    })
}

fn split_name(k: SplitKind) -> &'static str {
    match k {
        SplitKind::Cogent => "cogent",
        SplitKind::Closure => "closure",
        SplitKind::Sgl => "sgl",
    }
}

/// Mean and sample standard deviation of one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CellStats {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    /// One entry per column; `None` when every seed failed.
    pub cells: Vec<Option<CellStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<SuiteRow>,
    /// `(row, split, seed, message)` for runs that failed.
    pub failures: Vec<(String, String, u64, String)>,
}

impl SuiteResult {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("row,column,mean,std,n\n");
        for r in &self.rows {
            for (c, cell) in self.columns.iter().zip(&r.cells) {
                match cell {
                    Some(x) => {
                        let _ = writeln!(s, "{},{c},{:.6},{:.6},{}", r.name, x.mean, x.std, x.n);
                    }
                    None => {
                        let _ = writeln!(s, "{},{c},,,0", r.name);
                    }
                }
            }
        }
        s
    }

    /// Accuracies in percent as `mean ± std`.
    pub fn render(&self) -> String {
        let mut head = vec![format!("{} suite", self.name)];
        head.extend(self.columns.iter().cloned());
        let mut lines = vec![head];
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            for cell in &r.cells {
                line.push(match cell {
                    Some(x) => format!("{:.1} ± {:.1}", 100.0 * x.mean, 100.0 * x.std),
                    None => "failed".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "\n{} failed runs, see runs.csv", self.failures.len());
        }
        out
    }
}

fn prepare_data(kind: SplitKind, opts: &SuiteOptions, dir: &Path) -> Result<Dataset> {
    let mut spec = SplitSpec::new(kind, opts.data_seed, opts.n_train, opts.n_val, opts.n_test);
    spec.sgl_per_type = opts.sgl_per_type;
    let (splits, report) = build_splits(&spec)?;
    write_dataset(dir, &spec, &splits, &report, &SubTaskCatalog::clevr().hash())?;
    load_dataset(dir)
}

/// Trains every row on every split the columns need, for every seed, and
/// writes `runs.csv`, `table.csv` and `table.txt` into `out`. A failed run
/// is recorded and the suite carries on.
pub fn run_suite(name: &str, out: &Path, opts: &SuiteOptions) -> Result<SuiteResult> {
    let (rows, columns) = layout(name)?;
    if opts.seeds.is_empty() {
        return Err(HarnessError::Usage("a suite needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut splits: Vec<SplitKind> = Vec::new();
    for c in &columns {
        if !splits.contains(&c.split) {
            splits.push(c.split);
        }
    }
    let mut data = BTreeMap::new();
    for &k in &splits {
        data.insert(
            split_name(k),
            prepare_data(k, opts, &out.join("data").join(split_name(k)))?,
        );
    }

    let mut runs = String::from("row,split,seed,status,best_epoch,val_accuracy,test_accuracy,test_binary_accuracy\n");
    let mut failures = Vec::new();
    // (row, split, metric) -> per-seed values
    let mut values: BTreeMap<(&str, &str, u8), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        for &k in &splits {
            let dataset = &data[split_name(k)];
            for &seed in &opts.seeds {
                let run_name = format!("{}-{}-s{seed}", row.name, split_name(k));
                let dir = out.join("runs").join(&run_name);
                let mut cfg = ExperimentConfig::new(&run_name, row.kind, out.join("data").join(split_name(k)), &dir);
                cfg.strategy = row.strategy;
                cfg.structure = row.structure;
                cfg.seed = seed;
                cfg.lr = opts.lr;
                cfg.batch_size = opts.batch_size;
                cfg.epochs = opts.epochs;
                cfg.patience = opts.patience;
                cfg.model = opts.model.clone();
                let outcome = train_on(&cfg, dataset, Some(&dir)).and_then(|o| {
                    let binary: Vec<_> = dataset
                        .test
                        .iter()
                        .filter(|s| !s.program.binary_nodes().is_empty())
                        .cloned()
                        .collect();
                    let ex = Example::many(&binary, &o.model.net)?;
                    let bin = if ex.is_empty() {
                        None
                    } else {
                        Some(evaluate_model(&o.model, &ex)?.0.accuracy())
                    };
                    Ok((o, bin))
                });
                match outcome {
                    Ok((o, bin)) => {
                        let val = o.metrics.val.accuracy();
                        let test = o.metrics.test.as_ref().map_or(0.0, |t| t.accuracy());
                        let _ = writeln!(
                            runs,
                            "{},{},{seed},ok,{},{val:.6},{test:.6},{}",
                            row.name,
                            split_name(k),
                            o.metrics.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                            bin.map(|b| format!("{b:.6}")).unwrap_or_default()
                        );
                        let key = |m: Metric| (row.name, split_name(k), m as u8);
                        values.entry(key(Metric::InDist)).or_default().push(val);
                        values.entry(key(Metric::Sysgen)).or_default().push(test);
                        if let Some(b) = bin {
                            values.entry(key(Metric::SysgenBinary)).or_default().push(b);
                        }
                    }
                    Err(e) => {
                        let msg = e.to_string().replace([',', '\n'], ";");
                        let _ = writeln!(runs, "{},{},{seed},failed: {msg},,,,", row.name, split_name(k));
                        failures.push((row.name.to_string(), split_name(k).to_string(), seed, e.to_string()));
                    }
                }
            }
        }
    }

    let mut names: Vec<String> = columns.iter().map(|c| c.name.to_string()).collect();
    let overall = name == "main";
    if overall {
        names.push("overall".into());
    }
    let table_rows = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<Option<CellStats>> = columns
                .iter()
                .map(|c| {
                    values
                        .get(&(r.name, split_name(c.split), c.metric as u8))
                        .and_then(|v| CellStats::of(v))
                })
                .collect();
            if overall {
                // Per-seed mean of the two attribute/composition splits.
                let a = values.get(&(r.name, "cogent", Metric::Sysgen as u8));
                let b = values.get(&(r.name, "closure", Metric::Sysgen as u8));
                let per_seed: Vec<f64> = match (a, b) {
                    (Some(a), Some(b)) if a.len() == b.len() => a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect(),
                    _ => Vec::new(),
                };
                cells.push(CellStats::of(&per_seed));
            }
            SuiteRow {
                name: r.name.to_string(),
                cells,
            }
        })
        .collect();
    let result = SuiteResult {
        name: name.to_string(),
        columns: names,
        rows: table_rows,
        failures,
    };
    let write = |file: &str, text: String| -> Result<()> {
        let p = out.join(file);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("runs.csv", runs)?;
    write("table.csv", result.table_csv())?;
    write("table.txt", result.render())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_have_the_expected_shape() {
        let shape = |n: &str| {
            let (r, c) = layout(n).unwrap();
            (r.len(), c.len())
        };
        assert_eq!(shape("main"), (4, 3));
        assert_eq!(shape("specialization"), (4, 2));
        assert_eq!(shape("ablation"), (4, 2));
        assert_eq!(shape("structure"), (2, 3));
        assert!(layout("nope").is_err());
    }

    #[test]
    fn stats_use_the_sample_deviation() {
        let s = CellStats::of(&[0.5, 0.7, 0.9]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.std - 0.2).abs() < 1e-12);
        assert_eq!(CellStats::of(&[0.3]).unwrap().std, 0.0);
        assert!(CellStats::of(&[]).is_none());
    }
}
