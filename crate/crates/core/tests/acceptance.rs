//! One pass/fail line per acceptance criterion. Lines go straight to stdout
//! so they show up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmn::data::{
    build_splits, exec_program_symbolic, generate_scene, question_text, Sample, SceneConstraints, Split, SplitKind,
    SplitSpec,
};
use tmn::harness::{
    attention_probe, evaluate_answerer, run_suite, train_on, Dataset, ExperimentConfig, OracleShim, SuiteOptions,
    TrainOutcome,
};
use tmn::library::{Strategy, SubTaskCatalog};
use tmn::model::{Example, ModelKind, NetworkSpec, TmnModel};
use tmn::program::{parse_program, plan, random_program, serialize, Structure};
use tmn::tensor::{grad_check, ParamStore, Tape, Tensor};
use tmn::transformer::{multi_head_attention, Dropout, EncoderLayer, ModelConfig};

fn report(id: &str, passed: bool, detail: &str) {
    let line = format!("{id} {} {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn catalog() -> SubTaskCatalog {
    SubTaskCatalog::clevr()
}

fn tiny(d: usize, init_std: f64) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 2,
        d_ff: 2 * d,
        n_layers_monolithic: 2,
        dropout: 0.0,
        init_std,
        max_positions: 256,
        ..ModelConfig::default()
    }
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(&[rows, cols], &data).unwrap()
}

// A1: finite differences at 64-bit, 20 seeds per case.
#[test]
fn a1_gradient_integrity() {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    let tol = [1e-6, 1e-4, 1e-3, 1e-3];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();

        // (i) linear layer
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", random_input(&mut rng, 5, 3)).unwrap();
        let b = store
            .add("b", Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap())
            .unwrap();
        let x = random_input(&mut rng, 4, 5);
        let r = grad_check(
            &store,
            |t: &mut Tape<'_, f64>| {
                let xv = t.constant(x.clone());
                let (wv, bv) = (t.param(w), t.param(b));
                let y = t.matmul(xv, wv)?;
                let y = t.add_row(y, bv)?;
                t.cross_entropy(y, &labels)
            },
            1e-5,
            tol[0],
        )
        .unwrap();
        worst[0] = worst[0].max(r.max_rel_error());

        // (ii) one attention head, (iii) a full encoder layer
        let cfg1 = ModelConfig {
            n_heads: 1,
            ..tiny(8, 0.5)
        };
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayer::init(&mut store, "l", &cfg1, &mut rng).unwrap();
        let head = store.add("head", random_input(&mut rng, 8, 3)).unwrap();
        let x = random_input(&mut rng, 4, 8);
        let attn_ids = [layer.wq, layer.bq, layer.wk, layer.wv, layer.bv, layer.wo, layer.bo];
        let r = grad_check(
            &store,
            |t: &mut Tape<'_, f64>| {
                let xv = t.constant(x.clone());
                let (y, _) = multi_head_attention(t, xv, &layer, 1)
                    .map_err(|e| tmn::tensor::TensorError::Invalid(e.to_string()))?;
                let hv = t.param(head);
                let y = t.matmul(y, hv)?;
                t.cross_entropy(y, &labels)
            },
            1e-5,
            tol[1],
        )
        .unwrap();
        let attn_err = r
            .params
            .iter()
            .filter(|p| attn_ids.iter().any(|&id| store.name(id) == p.name) || p.name == "head")
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max);
        worst[1] = worst[1].max(attn_err);

        let cfg2 = tiny(8, 0.5);
        let mut store = ParamStore::<f64>::new();
        let layer = EncoderLayer::init(&mut store, "l", &cfg2, &mut rng).unwrap();
        let head = store.add("head", random_input(&mut rng, 8, 3)).unwrap();
        let r = grad_check(
            &store,
            |t: &mut Tape<'_, f64>| {
                let xv = t.constant(x.clone());
                let out = layer
                    .forward(t, xv, &cfg2, &mut Dropout::off())
                    .map_err(|e| tmn::tensor::TensorError::Invalid(e.to_string()))?;
                let hv = t.param(head);
                let y = t.matmul(out.out, hv)?;
                t.cross_entropy(y, &labels)
            },
            1e-5,
            tol[2],
        )
        .unwrap();
        worst[2] = worst[2].max(r.max_rel_error());

        // (iv) a 2-module network
        let mut spec = NetworkSpec::tmn(tiny(8, 0.3), Strategy::Individual, Structure::Stack);
        spec.height = 2;
        spec.width = 2;
        let model = TmnModel::<f64>::new(spec, &catalog(), seed).unwrap();
        let c = SceneConstraints {
            height: 2,
            width: 2,
            min_objects: 1,
            max_objects: 3,
            colors: None,
        };
        let scene = generate_scene(&mut rng, &c).unwrap();
        let program = parse_program("count(scene())", &catalog()).unwrap();
        let answer = exec_program_symbolic(&program, &scene).unwrap();
        let sample = Sample {
            id: "g".into(),
            question: question_text(&program),
            scene,
            program,
            answer,
            family: "count".into(),
            split: Split::Train,
        };
        let ex = Example::from_sample(&sample, &model.net).unwrap();
        let r = grad_check(
            &model.params,
            |t: &mut Tape<'_, f64>| {
                Ok::<_, tmn::model::ModelError>(model.net.batch_loss(t, &[&ex], &mut Dropout::off())?.0)
            },
            1e-5,
            tol[3],
        )
        .unwrap();
        worst[3] = worst[3].max(r.max_rel_error());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.iter().zip(&tol).all(|(w, t)| w <= t) && secs < 120.0;
    report(
        "A1",
        ok,
        &format!(
            "max rel err linear {:.1e} (<= 1e-6) attention {:.1e} (<= 1e-4) layer {:.1e} (<= 1e-3) 2-module {:.1e} (<= 1e-3), {secs:.1}s (< 120s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(ok);
}

fn sample_for(program: tmn::program::Program, rng: &mut ChaCha8Rng) -> Sample {
    let scene = generate_scene(rng, &SceneConstraints::default()).unwrap();
    Sample {
        id: String::new(),
        question: question_text(&program),
        scene,
        program,
        answer: "yes".into(),
        family: "random".into(),
        split: Split::Train,
    }
}

// A2: executed-layer counter against K·L, L and n_layers_monolithic.
#[test]
fn a2_layer_budget_law() {
    let cat = catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut models = Vec::new();
    for k in [1, 2] {
        for structure in [Structure::Stack, Structure::Tree] {
            let cfg = ModelConfig {
                k_layers: k,
                ..tiny(8, 0.02)
            };
            models.push(TmnModel::<f32>::new(NetworkSpec::tmn(cfg, Strategy::Individual, structure), &cat, 0).unwrap());
        }
    }
    for kind in [
        ModelKind::Transformer,
        ModelKind::TransformerPr,
        ModelKind::TransformerPrVl,
        ModelKind::TransformerPrVlSt,
    ] {
        models.push(TmnModel::<f32>::new(NetworkSpec::baseline(kind, tiny(8, 0.02)), &cat, 0).unwrap());
    }
    let mut violations = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let program = random_program(&mut rng, &cat, 6, 1).unwrap();
        let s = sample_for(program, &mut rng);
        for m in &models {
            let ex = Example::from_sample(&s, &m.net).unwrap();
            let mut tape = Tape::with_params(&m.params);
            let trace = m.net.forward(&mut tape, &ex, &mut Dropout::off()).unwrap();
            let cfg = &m.net.spec.config;
            let l = ex.program.len();
            let law = match m.kind() {
                ModelKind::Tmn => cfg.k_layers * l,
                ModelKind::TransformerPrVl | ModelKind::TransformerPrVlSt => l,
                _ => cfg.n_layers_monolithic,
            };
            checked += 1;
            violations += (trace.layers != law) as usize;
        }
    }
    let ok = violations == 0;
    report(
        "A2",
        ok,
        &format!(
            "{violations} violations over {checked} forward passes (1000 random programs, K in {{1,2}}, 4 baselines)"
        ),
    );
    assert!(ok);
}

// A3: executor vs stored labels, oracle shim, split hygiene.
#[test]
fn a3_oracle_soundness() {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut total = 0;
    let mut shim_perfect = true;
    let mut audits = true;
    let mut failed = Vec::new();
    for (kind, n_train, n_val, n_test) in [
        (SplitKind::Closure, 8000, 1000, 1000),
        (SplitKind::Cogent, 8000, 1000, 1000),
    ] {
        let spec = SplitSpec::new(kind, 20_000, n_train, n_val, n_test);
        let (splits, audit) = build_splits(&spec).unwrap();
        if !audit.passed() {
            audits = false;
            failed.extend(audit.failures().iter().map(|c| c.name.clone()));
        }
        for samples in splits.values() {
            total += samples.len();
            mismatches += samples
                .iter()
                .filter(|s| exec_program_symbolic(&s.program, &s.scene).as_deref().ok() != Some(s.answer.as_str()))
                .count();
            let m = evaluate_answerer(&OracleShim, samples).unwrap();
            shim_perfect &= m.correct == m.total;
        }
    }
    let sgl = SplitSpec::new(SplitKind::Sgl, 20_000, 2000, 500, 0);
    let (splits, audit) = build_splits(&sgl).unwrap();
    if !audit.passed() {
        audits = false;
        failed.extend(audit.failures().iter().map(|c| c.name.clone()));
    }
    for samples in splits.values() {
        let m = evaluate_answerer(&OracleShim, samples).unwrap();
        shim_perfect &= m.correct == m.total;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && total >= 20_000 && shim_perfect && audits && secs < 300.0;
    report(
        "A3",
        ok,
        &format!(
            "{mismatches}/{total} label mismatches, oracle shim 100% on every split: {shim_perfect}, audits pass: {audits} {failed:?}, {secs:.1}s (< 300s)"
        ),
    );
    assert!(ok);
}

// A4: parse/serialize identity and planner laws.
#[test]
fn a4_parser_planner_laws() {
    let cat = catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut round_trip = 0;
    let mut stack_post_order = 0;
    let mut same_multiset = 0;
    let mut bitwise = 0;
    let mut linear = 0;
    let model = TmnModel::<f64>::new(
        NetworkSpec::tmn(tiny(8, 0.3), Strategy::Individual, Structure::Stack),
        &cat,
        4,
    )
    .unwrap();
    for _ in 0..1000 {
        let p = random_program(&mut rng, &cat, 7, 1).unwrap();
        let text = serialize(&p);
        if parse_program(&text, &cat)
            .map(|q| q == p && serialize(&q) == text)
            .unwrap_or(false)
        {
            round_trip += 1;
        }
        let stack = plan(&p, Structure::Stack).unwrap();
        let tree = plan(&p, Structure::Tree).unwrap();
        if stack.steps.iter().map(|s| s.position).eq(0..p.len()) {
            stack_post_order += 1;
        }
        let mut a: Vec<usize> = stack.steps.iter().map(|s| s.position).collect();
        let mut b: Vec<usize> = tree.steps.iter().map(|s| s.position).collect();
        a.sort_unstable();
        b.sort_unstable();
        same_multiset += (a == b) as usize;
        if p.binary_nodes().is_empty() {
            linear += 1;
            let s = sample_for(p.clone(), &mut rng);
            let ex = Example::from_sample(&s, &model.net).unwrap();
            let run = |pl: &tmn::program::ExecutionPlan| {
                let mut tape = Tape::with_params(&model.params);
                let tr = model.net.forward_tmn(&mut tape, &ex, pl, &mut Dropout::off()).unwrap();
                tape.data(tr.logits).iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
            };
            bitwise += (run(&stack) == run(&tree)) as usize;
        }
    }
    let ok = round_trip == 1000 && stack_post_order == 1000 && same_multiset == 1000 && bitwise == linear && linear > 0;
    report(
        "A4",
        ok,
        &format!(
            "round trip {round_trip}/1000, stack = post-order {stack_post_order}/1000, equal step multisets {same_multiset}/1000, tree = stack bitwise on {bitwise}/{linear} linear programs"
        ),
    );
    assert!(ok);
}

fn closure_dataset(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Dataset {
    let spec = SplitSpec::new(SplitKind::Closure, seed, n_train, n_val, n_test);
    let (splits, audit) = build_splits(&spec).unwrap();
    assert!(audit.passed(), "{:?}", audit.failures());
    let manifest = tmn::data::SplitManifest {
        schema: "tmn-samples".into(),
        version: 1,
        spec,
        catalog_hash: catalog().hash(),
        answers: tmn::data::AnswerVocab::default().words().to_vec(),
        files: BTreeMap::new(),
        audit,
    };
    let mut splits = splits;
    Dataset {
        manifest,
        train: splits.remove(&Split::Train).unwrap(),
        val: splits.remove(&Split::Val).unwrap(),
        test: splits.remove(&Split::TestSysgen).unwrap(),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Desk-scale recipe shared by A5 and A6.
fn desk_config(name: &str, kind: ModelKind, strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(name, kind, "unused", "unused");
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg.lr = 1e-3;
    cfg.batch_size = 32;
    cfg.epochs = 16;
    cfg.eval_every = 1;
    cfg.model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    cfg
}

// A5 and A6 share the TMN-Stack Individual runs.
#[test]
fn a5_a6_desk_scale_generalization() {
    let start = Instant::now();
    let data = closure_dataset(16000, 2000, 2000, 7);
    let run = |name: &str, kind, strategy, seed| -> TrainOutcome {
        let cfg = desk_config(name, kind, strategy, seed);
        train_on(&cfg, &data, None).unwrap()
    };
    let mut results: BTreeMap<&str, Vec<TrainOutcome>> = BTreeMap::new();
    for seed in 0..3u64 {
        results
            .entry("tmn")
            .or_default()
            .push(run("tmn", ModelKind::Tmn, Strategy::Individual, seed));
        results
            .entry("pr")
            .or_default()
            .push(run("pr", ModelKind::TransformerPr, Strategy::Individual, seed));
        results
            .entry("order")
            .or_default()
            .push(run("order", ModelKind::Tmn, Strategy::Order, seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let val = |k: &str| -> Vec<f64> { results[k].iter().map(|o| o.metrics.val.accuracy()).collect() };
    let test = |k: &str| -> Vec<f64> {
        results[k]
            .iter()
            .map(|o| o.metrics.test.as_ref().unwrap().accuracy())
            .collect()
    };
    let fmt = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{:.1}", 100.0 * x))
            .collect::<Vec<_>>()
            .join("/")
    };
    let min = |xs: &[f64]| xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let within = secs <= 3600.0;

    let (tv, pv, ov) = (val("tmn"), val("pr"), val("order"));
    let (tt, pt, ot) = (test("tmn"), test("pr"), test("order"));
    let gap5 = median(tt.clone()) - median(pt.clone());
    let a5 = min(&tv) >= 0.9 && min(&pv) >= 0.9 && gap5 >= 0.05 && within;
    report(
        "A5",
        a5,
        &format!(
            "in-dist val TMN {} PR {} (each >= 90), held-out median TMN {:.1} vs PR {:.1}, gap {:.1} pts (>= 5), 9 runs in {:.0}s (<= 3600s)",
            fmt(&tv),
            fmt(&pv),
            100.0 * median(tt.clone()),
            100.0 * median(pt.clone()),
            100.0 * gap5,
            secs
        ),
    );

    let probe_samples: Vec<Sample> = data.val.clone();
    let probe = attention_probe(&results["tmn"][0].model, &probe_samples, 100).unwrap();
    let gap6 = median(tt.clone()) - median(ot.clone());
    let a6 =
        min(&tv) >= 0.9 && min(&ov) >= 0.9 && gap6 >= 0.05 && probe.scenes == 100 && probe.fraction() >= 0.7 && within;
    report(
        "A6",
        a6,
        &format!(
            "in-dist val Individual {} Order {} (each >= 90), held-out median {:.1} vs {:.1}, gap {:.1} pts (>= 5), probe {}/{} scenes favour matching cells (>= 70%)",
            fmt(&tv),
            fmt(&ov),
            100.0 * median(tt),
            100.0 * median(ot),
            100.0 * gap6,
            probe.wins,
            probe.scenes
        ),
    );
    assert!(a5 && a6);
}

fn overfit(kind: ModelKind, data: &Dataset) -> f64 {
    let mut cfg = ExperimentConfig::new("overfit", kind, "unused", "unused");
    cfg.lr = 2e-3;
    cfg.batch_size = 8;
    cfg.epochs = 50;
    cfg.max_train = Some(200);
    cfg.eval_test = false;
    cfg.model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut train_only = data.clone();
    train_only.train.truncate(200);
    train_only.val = train_only.train.clone();
    cfg.target_val_accuracy = Some(0.99);
    let out = train_on(&cfg, &train_only, None).unwrap();
    out.metrics.val.accuracy()
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

// A7: calibration, capacity and determinism.
#[test]
fn a7_calibration_and_determinism() {
    let data = closure_dataset(2000, 300, 300, 11);
    let ln_c = (tmn::data::AnswerVocab::default().len() as f64).ln();
    let mut worst_init = 0.0f64;
    for kind in ModelKind::ALL {
        let spec = match kind {
            ModelKind::Tmn => NetworkSpec::tmn(ModelConfig::default(), Strategy::Individual, Structure::Stack),
            k => NetworkSpec::baseline(k, ModelConfig::default()),
        };
        let model = TmnModel::<f32>::new(spec, &catalog(), 0).unwrap();
        let ex = Example::many(&data.train[..64], &model.net).unwrap();
        let refs: Vec<&Example> = ex.iter().collect();
        let mut tape = Tape::with_params(&model.params);
        let (loss, _) = model.net.batch_loss(&mut tape, &refs, &mut Dropout::off()).unwrap();
        worst_init = worst_init.max((tape.data(loss)[0] as f64 - ln_c).abs());
    }
    let calibrated = worst_init <= 0.2;

    let mut overfit_acc = Vec::new();
    for kind in [ModelKind::Tmn, ModelKind::TransformerPr] {
        overfit_acc.push((kind, overfit(kind, &data)));
    }
    let overfits = overfit_acc.iter().all(|(_, a)| *a >= 0.99);

    let opts = SuiteOptions {
        seeds: vec![0, 1],
        n_train: 900,
        n_val: 200,
        n_test: 100,
        epochs: 2,
        batch_size: 32,
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.1,
            ..ModelConfig::default()
        },
        ..SuiteOptions::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_suite("structure", &a, &opts).unwrap();
    run_suite("structure", &b, &opts).unwrap();
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let identical = !fa.is_empty() && fa == fb;

    let ok = calibrated && overfits && identical;
    report(
        "A7",
        ok,
        &format!(
            "initial loss max |L0 - ln 22| = {worst_init:.3} (<= 0.2), 200-sample overfit {} (>= 99%), {} suite CSVs identical on rerun: {identical}",
            overfit_acc
                .iter()
                .map(|(k, a)| format!("{k} {:.1}%", 100.0 * a))
                .collect::<Vec<_>>()
                .join(", "),
            fa.len()
        ),
    );
    assert!(ok);
}
