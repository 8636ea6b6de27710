use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmn::data::{
    build_splits, exec_program_symbolic, generate_scene, Attribute, Object, Scene, SceneConstraints, SplitKind,
    SplitSpec,
};
use tmn::library::SubTaskCatalog;
use tmn::program::{random_program, Program};

/// Reference interpreter: recursive from the root over object lists, no bit
/// masks. Written from the sub-task definitions, independently of the
/// library executor.
#[derive(Debug, Clone, PartialEq)]
enum V {
    Objs(Vec<(usize, usize)>),
    One((usize, usize)),
    Int(usize),
    Bool(bool),
    Word(&'static str),
}

fn obj_at(scene: &Scene, (r, c): (usize, usize)) -> Object {
    scene.cells[r * scene.width + c].unwrap()
}

fn eval(p: &Program, scene: &Scene, at: usize) -> Option<V> {
    let node = p.node(at);
    let arg = node.arg.as_deref();
    let kid = |k: usize| eval(p, scene, node.inputs[k]);
    let objs = |k: usize| match kid(k)? {
        V::Objs(o) => Some(o),
        _ => None,
    };
    let one = |k: usize| match kid(k)? {
        V::One(o) => Some(o),
        _ => None,
    };
    let int = |k: usize| match kid(k)? {
        V::Int(n) => Some(n),
        _ => None,
    };
    let attr = Attribute::from_suffix(&node.op);
    let v = match node.op.as_str() {
        "scene" => V::Objs(all_objects(scene)),
        "count" => V::Int(objs(0)?.len()),
        "exist" => V::Bool(!objs(0)?.is_empty()),
        "intersect" => {
            let b = objs(1)?;
            V::Objs(objs(0)?.into_iter().filter(|o| b.contains(o)).collect())
        }
        "union" => {
            let mut a = objs(0)?;
            for o in objs(1)? {
                if !a.contains(&o) {
                    a.push(o);
                }
            }
            a.sort();
            V::Objs(a)
        }
        "unique" => match objs(0)?.as_slice() {
            [o] => V::One(*o),
            _ => return None,
        },
        "relate" => {
            let (r, c) = one(0)?;
            V::Objs(
                all_objects(scene)
                    .into_iter()
                    .filter(|&(rr, cc)| match arg.unwrap() {
                        "left" => cc < c,
                        "right" => cc > c,
                        "above" => rr < r,
                        "below" => rr > r,
                        _ => panic!("relation"),
                    })
                    .collect(),
            )
        }
        "greater_than" => V::Bool(int(0)? > int(1)?),
        "less_than" => V::Bool(int(0)? < int(1)?),
        "equal_integer" => V::Bool(int(0)? == int(1)?),
        op if op.starts_with("filter_") => {
            let a = attr.unwrap();
            V::Objs(
                objs(0)?
                    .into_iter()
                    .filter(|&o| obj_at(scene, o).word(a) == arg.unwrap())
                    .collect(),
            )
        }
        op if op.starts_with("query_") => V::Word(obj_at(scene, one(0)?).word(attr.unwrap())),
        op if op.starts_with("same_") => {
            let a = attr.unwrap();
            let o = one(0)?;
            let w = obj_at(scene, o).word(a);
            V::Objs(
                all_objects(scene)
                    .into_iter()
                    .filter(|&x| x != o && obj_at(scene, x).word(a) == w)
                    .collect(),
            )
        }
        op if op.starts_with("equal_") => {
            let a = attr.unwrap();
            V::Bool(obj_at(scene, one(0)?).word(a) == obj_at(scene, one(1)?).word(a))
        }
        other => panic!("unknown op {other}"),
    };
    Some(v)
}

fn all_objects(scene: &Scene) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for r in 0..scene.height {
        for c in 0..scene.width {
            if scene.cells[r * scene.width + c].is_some() {
                all.push((r, c));
            }
        }
    }
    all
}

fn reference_answer(p: &Program, scene: &Scene) -> Option<String> {
    match eval(p, scene, p.root())? {
        V::Int(n) => Some(n.to_string()),
        V::Bool(b) => Some(if b { "yes" } else { "no" }.into()),
        V::Word(w) => Some(w.into()),
        V::Objs(_) | V::One(_) => None,
    }
}

#[test]
fn executor_agrees_with_reference_on_random_programs() {
    let cat = SubTaskCatalog::clevr();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut answered = 0;
    for _ in 0..10_000 {
        let p = random_program(&mut rng, &cat, 5, 1).unwrap();
        let scene = generate_scene(&mut rng, &SceneConstraints::default()).unwrap();
        let got = exec_program_symbolic(&p, &scene).ok();
        assert_eq!(got, reference_answer(&p, &scene), "{}", tmn::program::serialize(&p));
        answered += got.is_some() as usize;
    }
    // Enough programs get past unique() for the comparison to mean something.
    assert!(answered > 500, "{answered}");
}

#[test]
fn generated_labels_agree_with_reference() {
    for kind in [SplitKind::Closure, SplitKind::Cogent, SplitKind::Sgl] {
        let spec = SplitSpec::new(kind, 5, 1800, 300, if kind == SplitKind::Sgl { 0 } else { 300 });
        let (splits, _) = build_splits(&spec).unwrap();
        for s in splits.values().flatten() {
            assert_eq!(
                reference_answer(&s.program, &s.scene).as_deref(),
                Some(s.answer.as_str()),
                "{}",
                s.id
            );
        }
    }
}

#[test]
fn featurize_is_injective() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut seen: HashMap<Vec<u32>, Scene> = HashMap::new();
    for _ in 0..10_000 {
        let scene = generate_scene(&mut rng, &SceneConstraints::default()).unwrap();
        let key: Vec<u32> = scene.featurize::<f32>().data().iter().map(|x| x.to_bits()).collect();
        if let Some(prev) = seen.get(&key) {
            assert_eq!(prev, &scene);
        }
        seen.insert(key, scene);
    }
    assert!(seen.len() > 9_000);
}

#[test]
fn scenes_respect_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let c = SceneConstraints {
        height: 4,
        width: 6,
        min_objects: 3,
        max_objects: 5,
        colors: None,
    };
    for _ in 0..2000 {
        let s = generate_scene(&mut rng, &c).unwrap();
        assert_eq!((s.height, s.width, s.cells.len()), (4, 6, 24));
        assert!((3..=5).contains(&s.num_objects()));
    }
}
