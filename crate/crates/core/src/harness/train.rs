use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::{evaluate_model, SplitMetrics};
use super::{io_err, ExperimentConfig, HarnessError, Result};
use crate::data::{read_manifest, read_samples, Sample, Split, SplitManifest};
use crate::library::SubTaskCatalog;
use crate::model::{save_model, Example, ModelError, TmnModel};
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Tape};
use crate::transformer::Dropout;

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Reads a dataset written by `write_dataset`, refusing it when its audit
/// failed, a file hash differs, or it was built for another catalog.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if !manifest.audit.passed() {
        let names: Vec<&str> = manifest.audit.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(HarnessError::Audit(names.join(", ")));
    }
    let catalog = SubTaskCatalog::clevr();
    if manifest.catalog_hash != catalog.hash() {
        return Err(ModelError::Mismatch(format!(
            "dataset catalog {} does not match {}",
            manifest.catalog_hash,
            catalog.hash()
        ))
        .into());
    }
    let load = |split: Split| -> Result<Vec<Sample>> {
        let entry = manifest
            .files
            .get(&split)
            .ok_or_else(|| HarnessError::Audit(format!("manifest lists no {} file", split.name())))?;
        let path = dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256 {
            return Err(HarnessError::Audit(format!(
                "{} hash {digest} differs from manifest",
                path.display()
            )));
        }
        Ok(read_samples(&path)?)
    };
    let (train, val, test) = (load(Split::Train)?, load(Split::Val)?, load(Split::TestSysgen)?);
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    /// Forward passes whose executed-layer count was audited.
    pub layer_checks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    /// Best model's scores.
    pub val: SplitMetrics,
    pub test: Option<SplitMetrics>,
    pub initial_loss: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    /// `epoch,train_loss,val_accuracy,test_accuracy,layer_checks`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy,test_accuracy,layer_checks\n");
        let acc = |m: &Option<SplitMetrics>| m.as_ref().map(|m| format!("{:.6}", m.accuracy())).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{}",
                e.epoch,
                e.train_loss,
                acc(&e.val),
                acc(&e.test),
                e.layer_checks
            );
        }
        s
    }

    /// `epoch,split,family,correct,total,accuracy`; epoch `best` holds the
    /// retained model.
    pub fn families_csv(&self) -> String {
        let mut s = String::from("epoch,split,family,correct,total,accuracy\n");
        let mut rows = |epoch: &str, split: &str, m: &SplitMetrics| {
            for (f, &(c, t)) in &m.per_family {
                let _ = writeln!(s, "{epoch},{split},{f},{c},{t},{:.6}", c as f64 / t as f64);
            }
        };
        for e in &self.epochs {
            let ep = e.epoch.to_string();
            if let Some(m) = &e.val {
                rows(&ep, "val", m);
            }
            if let Some(m) = &e.test {
                rows(&ep, "test_sysgen", m);
            }
        }
        rows("best", "val", &self.val);
        if let Some(m) = &self.test {
            rows("best", "test_sysgen", m);
        }
        s
    }
}

pub struct TrainOutcome {
    /// Weights of the best-val epoch.
    pub model: TmnModel<f32>,
    pub metrics: MetricsRecord,
    pub checkpoint: Option<PathBuf>,
}

fn grad_norm(grads: &Gradients<f32>, params: &ParamStore<f32>) -> f64 {
    params
        .ids()
        .filter_map(|id| grads.get(id))
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Loads `cfg.data_dir` and trains, writing artifacts to `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.data_dir)?;
    train_on(cfg, &data, Some(&cfg.out_dir))
}

/// Mini-batch Adam on `data.train`, keeping the weights with the best val
/// accuracy. With `out`, writes `config.toml`, `metrics.csv`,
/// `families.csv`, `timing.json` and `best.ckpt` there.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.network_spec(data.manifest.spec.height, data.manifest.spec.width);
    let catalog = SubTaskCatalog::clevr();
    let mut model = TmnModel::<f32>::new(spec, &catalog, cfg.seed)?;
    let n_train = cfg.max_train.map_or(data.train.len(), |m| m.min(data.train.len()));
    let train_ex = Example::many(&data.train[..n_train], &model.net)?;
    let val_ex = Example::many(&data.val, &model.net)?;
    let test_ex = if cfg.eval_test {
        Example::many(&data.test, &model.net)?
    } else {
        Vec::new()
    };
    if train_ex.is_empty() || val_ex.is_empty() {
        return Err(HarnessError::Usage(
            "training needs non-empty train and val splits".into(),
        ));
    }

    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    let initial_loss = {
        let batch: Vec<&Example> = train_ex.iter().take(cfg.batch_size).collect();
        let mut tape = Tape::with_params(&model.params);
        let (loss, _) = model.net.batch_loss(&mut tape, &batch, &mut Dropout::off())?;
        tape.data(loss)[0] as f64
    };

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::with_params(&model.params);
                let mut dropout = Dropout::train(cfg.model.dropout, &mut drop_rng);
                let (loss, _) = model.net.batch_loss(&mut tape, &batch, &mut dropout)?;
                let value = tape.data(loss)[0] as f64;
                tape.backward(loss).map_err(ModelError::from)?;
                (value, tape.param_gradients())
            };
            let norm = grad_norm(&grads, &model.params);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(HarnessError::NonFinite {
                    epoch,
                    step,
                    loss,
                    lr: cfg.lr,
                    grad_norm: norm,
                });
            }
            adam_step(&mut model.params, &grads, &mut adam).map_err(ModelError::from)?;
            total += loss;
            batches += 1;
            step += 1;
        }
        let mut record = EpochMetrics {
            epoch,
            train_loss: total / batches as f64,
            val: None,
            test: None,
            layer_checks: 0,
        };
        let last = epoch + 1 == cfg.epochs;
        let mut stop = false;
        if (epoch + 1) % cfg.eval_every == 0 || last {
            let (val, n) = evaluate_model(&model, &val_ex)?;
            record.layer_checks += n;
            if !test_ex.is_empty() {
                let (test, n) = evaluate_model(&model, &test_ex)?;
                record.layer_checks += n;
                record.test = Some(test);
            }
            let acc = val.accuracy();
            record.val = Some(val);
            if best.as_ref().is_none_or(|b| acc > b.1) {
                best = Some((epoch, acc, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            if cfg.patience.is_some_and(|p| stale >= p) || cfg.target_val_accuracy.is_some_and(|t| acc >= t) {
                stop = true;
            }
        }
        epochs.push(record);
        if stop {
            break;
        }
    }

    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    let (val, _) = evaluate_model(&model, &val_ex)?;
    let test = if test_ex.is_empty() {
        None
    } else {
        Some(evaluate_model(&model, &test_ex)?.0)
    };
    let metrics = MetricsRecord {
        epochs,
        best_epoch,
        val,
        test,
        initial_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    };

    let mut checkpoint = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| io_err(&p, e))
        };
        write("config.toml", cfg.to_toml())?;
        write("metrics.csv", metrics.epochs_csv())?;
        write("families.csv", metrics.families_csv())?;
        write(
            "timing.json",
            format!("{{\"wall_seconds\": {:.3}, \"steps\": {step}}}\n", metrics.wall_seconds),
        )?;
        let path = dir.join("best.ckpt");
        save_model(&path, &model)?;
        checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoint,
    })
}
