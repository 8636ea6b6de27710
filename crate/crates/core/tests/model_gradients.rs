use tmn::data::{build_splits, Sample, Split, SplitKind, SplitSpec};
use tmn::library::{Strategy, SubTaskCatalog};
use tmn::model::{Example, ModelKind, NetworkSpec, TmnModel};
use tmn::program::Structure;
use tmn::tensor::grad_check;
use tmn::transformer::{Dropout, ModelConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        n_layers_monolithic: 2,
        dropout: 0.0,
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

fn samples() -> Vec<Sample> {
    let mut spec = SplitSpec::new(SplitKind::Closure, 3, 40, 4, 4);
    spec.height = 3;
    spec.width = 3;
    spec.max_objects = 5;
    let (splits, _) = build_splits(&spec).unwrap();
    splits[&Split::Train].clone()
}

fn check(spec: NetworkSpec, pick: impl Fn(&Sample) -> bool) {
    let model = TmnModel::<f64>::new(spec, &SubTaskCatalog::clevr(), 11).unwrap();
    let all = samples();
    let chosen: Vec<&Sample> = all.iter().filter(|s| pick(s)).take(2).collect();
    assert_eq!(chosen.len(), 2);
    let exs: Vec<Example> = chosen
        .iter()
        .map(|s| Example::from_sample(s, &model.net).unwrap())
        .collect();
    let refs: Vec<&Example> = exs.iter().collect();
    let report = grad_check(
        &model.params,
        |tape| Ok::<_, tmn::model::ModelError>(model.net.batch_loss(tape, &refs, &mut Dropout::off())?.0),
        1e-5,
        1e-4,
    )
    .unwrap();
    let unused = report
        .params
        .iter()
        .filter(|p| p.analytic == 0.0 && p.numeric == 0.0)
        .count();
    assert!(unused < report.params.len());
    assert!(report.passed(), "{:?}", report.failures());
}

#[test]
fn tmn_tree_with_merge_matches_finite_differences() {
    let spec = NetworkSpec {
        height: 3,
        width: 3,
        ..NetworkSpec::tmn(tiny(), Strategy::SemanticGroup, Structure::Tree)
    };
    check(spec, |s| s.program.binary_nodes().len() == 1);
}

#[test]
fn tmn_stack_matches_finite_differences() {
    let spec = NetworkSpec {
        height: 3,
        width: 3,
        ..NetworkSpec::tmn(tiny(), Strategy::Order, Structure::Stack)
    };
    check(spec, |_| true);
}

#[test]
fn baselines_match_finite_differences() {
    for kind in [
        ModelKind::Transformer,
        ModelKind::TransformerPr,
        ModelKind::TransformerPrVl,
        ModelKind::TransformerPrVlSt,
    ] {
        let spec = NetworkSpec {
            height: 3,
            width: 3,
            ..NetworkSpec::baseline(kind, tiny())
        };
        check(spec, |_| true);
    }
}
