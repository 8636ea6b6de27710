use super::scene::{Attribute, Scene};
use super::DataError;
use crate::program::{Program, SubTaskNode};

/// Value produced by one program node. Sets are bit masks over cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Set(u64),
    Object(usize),
    Integer(u32),
    Boolean(bool),
    Attribute(&'static str),
}

impl Value {
    /// Answer word, for answer-typed values.
    pub fn answer_word(&self) -> Option<String> {
        match *self {
            Value::Integer(n) => Some(n.to_string()),
            Value::Boolean(b) => Some(if b { "yes" } else { "no" }.to_string()),
            Value::Attribute(w) => Some(w.to_string()),
            Value::Set(_) | Value::Object(_) => None,
        }
    }
}

fn set_of(scene: &Scene, pred: impl Fn(usize) -> bool) -> u64 {
    (0..scene.cells.len())
        .filter(|&i| scene.cells[i].is_some() && pred(i))
        .fold(0, |m, i| m | (1 << i))
}

fn arg_index(a: Attribute, arg: &str) -> Result<u8, DataError> {
    a.values()
        .iter()
        .position(|v| *v == arg)
        .map(|i| i as u8)
        .ok_or_else(|| DataError::Exec(format!("{arg} is not a {}", a.name())))
}

/// Value of every node, in post-order.
pub fn exec_values(program: &Program, scene: &Scene) -> Result<Vec<Value>, DataError> {
    let mut vals: Vec<Value> = Vec::with_capacity(program.len());
    for node in program.nodes() {
        let v = exec_node(node, &vals, scene)?;
        vals.push(v);
    }
    Ok(vals)
}

/// Value of one node given the values of all earlier nodes.
pub fn exec_node(node: &SubTaskNode, vals: &[Value], scene: &Scene) -> Result<Value, DataError> {
    let input = |k: usize| -> Result<Value, DataError> {
        node.inputs
            .get(k)
            .and_then(|&i| vals.get(i).copied())
            .ok_or_else(|| DataError::Exec(format!("{} is missing input {k}", node.op)))
    };
    let set = |k| match input(k)? {
        Value::Set(s) => Ok(s),
        v => Err(DataError::Exec(format!("{} expects a set, got {v:?}", node.op))),
    };
    let obj = |k| match input(k)? {
        Value::Object(o) => Ok(o),
        v => Err(DataError::Exec(format!("{} expects an object, got {v:?}", node.op))),
    };
    let int = |k| match input(k)? {
        Value::Integer(n) => Ok(n),
        v => Err(DataError::Exec(format!("{} expects an integer, got {v:?}", node.op))),
    };
    let arg = || {
        node.arg
            .as_deref()
            .ok_or_else(|| DataError::Exec(format!("{} needs an argument", node.op)))
    };
    let attr =
        || Attribute::from_suffix(&node.op).ok_or_else(|| DataError::Exec(format!("no attribute in {}", node.op)));
    let object = |cell: usize| scene.object(cell).expect("object cells come from sets");

    let v = match node.op.as_str() {
        "scene" => Value::Set(scene.occupied()),
        "count" => Value::Integer(set(0)?.count_ones()),
        "exist" => Value::Boolean(set(0)? != 0),
        "intersect" => Value::Set(set(0)? & set(1)?),
        "union" => Value::Set(set(0)? | set(1)?),
        "unique" => {
            let s = set(0)?;
            if s.count_ones() != 1 {
                return Err(DataError::NotUnique(s.count_ones() as usize));
            }
            Value::Object(s.trailing_zeros() as usize)
        }
        "relate" => {
            let o = obj(0)?;
            let (r, c) = scene.coords(o);
            let rel = arg()?;
            let keep: Box<dyn Fn(usize, usize) -> bool> = match rel {
                "left" => Box::new(move |_, cc| cc < c),
                "right" => Box::new(move |_, cc| cc > c),
                "above" => Box::new(move |rr, _| rr < r),
                "below" => Box::new(move |rr, _| rr > r),
                other => return Err(DataError::Exec(format!("unknown relation {other}"))),
            };
            Value::Set(set_of(scene, |i| {
                let (rr, cc) = scene.coords(i);
                keep(rr, cc)
            }))
        }
        "greater_than" => Value::Boolean(int(0)? > int(1)?),
        "less_than" => Value::Boolean(int(0)? < int(1)?),
        "equal_integer" => Value::Boolean(int(0)? == int(1)?),
        op if op.starts_with("filter_") => {
            let a = attr()?;
            let want = arg_index(a, arg()?)?;
            let s = set(0)?;
            Value::Set(s & set_of(scene, |i| object(i).get(a) == want))
        }
        op if op.starts_with("query_") => Value::Attribute(object(obj(0)?).word(attr()?)),
        op if op.starts_with("same_") => {
            let a = attr()?;
            let o = obj(0)?;
            let want = object(o).get(a);
            Value::Set(set_of(scene, |i| i != o && object(i).get(a) == want))
        }
        op if op.starts_with("equal_") => {
            let a = attr()?;
            Value::Boolean(object(obj(0)?).get(a) == object(obj(1)?).get(a))
        }
        other => return Err(DataError::Exec(format!("unknown sub-task {other}"))),
    };
    Ok(v)
}

/// Ground-truth answer word of `program` on `scene`.
pub fn exec_program_symbolic(program: &Program, scene: &Scene) -> Result<String, DataError> {
    let vals = exec_values(program, scene)?;
    let last = vals.last().expect("programs are non-empty");
    last.answer_word()
        .ok_or_else(|| DataError::Exec(format!("program ends in {last:?}, not an answer")))
}
