use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::exec::{exec_node, Value};
use super::scene::{Attribute, Scene};
use crate::library::RELATIONS;
use crate::program::{Program, SubTaskNode};

/// Question template families. The first nine are training families; the
/// rest recombine the same sub-tasks into shapes no training family has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Count,
    Exist,
    QueryAttr,
    CompareAttr,
    CompareCount,
    LogicalAnd,
    LogicalOr,
    SpatialRef,
    MatchingRef,
    // recombined families, held out of training
    AndMatSpa,
    OrMat,
    EmbedSpaMat,
    EmbedMatSpa,
    CompareMat,
    // small recombination set, one per question type
    VerifyMatAnd,
    QuerySpaMat,
    ChooseCountMat,
    LogicalOrSpa,
}

impl Family {
    pub const BASE: [Family; 9] = [
        Family::Count,
        Family::Exist,
        Family::QueryAttr,
        Family::CompareAttr,
        Family::CompareCount,
        Family::LogicalAnd,
        Family::LogicalOr,
        Family::SpatialRef,
        Family::MatchingRef,
    ];

    pub const RECOMBINED: [Family; 5] = [
        Family::AndMatSpa,
        Family::OrMat,
        Family::EmbedSpaMat,
        Family::EmbedMatSpa,
        Family::CompareMat,
    ];

    /// Four question types: verify, query, choose, logical.
    pub const SGL: [Family; 4] = [
        Family::VerifyMatAnd,
        Family::QuerySpaMat,
        Family::ChooseCountMat,
        Family::LogicalOrSpa,
    ];

    pub fn all() -> Vec<Family> {
        Self::BASE
            .iter()
            .chain(&Self::RECOMBINED)
            .chain(&Self::SGL)
            .copied()
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Count => "count",
            Family::Exist => "exist",
            Family::QueryAttr => "query_attr",
            Family::CompareAttr => "compare_attr",
            Family::CompareCount => "compare_count",
            Family::LogicalAnd => "logical_and",
            Family::LogicalOr => "logical_or",
            Family::SpatialRef => "spatial_ref",
            Family::MatchingRef => "matching_ref",
            Family::AndMatSpa => "and_mat_spa",
            Family::OrMat => "or_mat",
            Family::EmbedSpaMat => "embed_spa_mat",
            Family::EmbedMatSpa => "embed_mat_spa",
            Family::CompareMat => "compare_mat",
            Family::VerifyMatAnd => "sgl_verify_mat_and",
            Family::QuerySpaMat => "sgl_query_spa_mat",
            Family::ChooseCountMat => "sgl_choose_count_mat",
            Family::LogicalOrSpa => "sgl_logical_or_spa",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Self::all().into_iter().find(|f| f.name() == name)
    }

    /// Instantiates the template on `scene`. `None` when this attempt does
    /// not fit the scene (no unique referent, empty choice, ...).
    pub fn build<R: Rng + ?Sized>(self, rng: &mut R, scene: &Scene) -> Option<Program> {
        let mut b = Builder::new(scene);
        match self {
            Family::Count => {
                let s = b.scene();
                let k = rng.gen_range(0..=2);
                let s = b.filters(rng, s, k)?;
                b.push("count", None, &[s]);
            }
            Family::Exist => {
                let s = b.scene();
                let k = rng.gen_range(1..=2);
                let s = b.filters(rng, s, k)?;
                b.push("exist", None, &[s]);
            }
            Family::QueryAttr => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 3)?;
                b.query(rng, o, &used)?;
            }
            Family::CompareAttr => {
                let s = b.scene();
                let (o1, u1) = b.refer(rng, s, 2)?;
                let s = b.scene();
                let (o2, u2) = b.refer(rng, s, 2)?;
                if b.value(o1) == b.value(o2) {
                    return None;
                }
                let free: Vec<Attribute> = Attribute::ALL
                    .into_iter()
                    .filter(|a| !u1.contains(a) && !u2.contains(a))
                    .collect();
                let a = *free.choose(rng)?;
                b.push(&format!("equal_{}", a.name()), None, &[o1, o2]);
            }
            Family::CompareCount => {
                let op = *["greater_than", "less_than", "equal_integer"].choose(rng)?;
                let s = b.scene();
                let s = b.filters(rng, s, 1)?;
                let c1 = b.push("count", None, &[s]);
                let s = b.scene();
                let s = b.filters(rng, s, 1)?;
                let c2 = b.push("count", None, &[s]);
                b.push(op, None, &[c1, c2]);
            }
            Family::LogicalAnd | Family::LogicalOr => {
                let s = b.scene();
                let l = b.filters(rng, s, 1)?;
                let s = b.scene();
                let r = b.filters(rng, s, 1)?;
                let op = if self == Family::LogicalAnd {
                    "intersect"
                } else {
                    "union"
                };
                let m = b.push(op, None, &[l, r]);
                b.reduce(rng, m)?;
            }
            Family::SpatialRef => {
                let s = b.scene();
                let (o, _) = b.refer(rng, s, 2)?;
                let rel = b.relate(rng, o)?;
                b.finish_set(rng, rel)?;
            }
            Family::MatchingRef => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                b.finish_set(rng, m)?;
            }
            Family::AndMatSpa => {
                let s = b.scene();
                let (o1, u1) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o1, &u1)?;
                let s = b.scene();
                let (o2, _) = b.refer(rng, s, 2)?;
                let r = b.relate(rng, o2)?;
                let i = b.push("intersect", None, &[m, r]);
                b.reduce(rng, i)?;
            }
            Family::OrMat => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let s = b.scene();
                let f = b.filters(rng, s, 1)?;
                let u = b.push("union", None, &[m, f]);
                b.reduce(rng, u)?;
            }
            Family::EmbedSpaMat => {
                let s = b.scene();
                let (o, _) = b.refer(rng, s, 2)?;
                let r = b.relate(rng, o)?;
                let (o2, used) = b.refer(rng, r, 2)?;
                let m = b.same(rng, o2, &used)?;
                b.finish_set(rng, m)?;
            }
            Family::EmbedMatSpa => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let (o2, _) = b.refer(rng, m, 2)?;
                let r = b.relate(rng, o2)?;
                b.finish_set(rng, r)?;
            }
            Family::CompareMat => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let (o1, u1) = b.refer(rng, m, 2)?;
                let s = b.scene();
                let (o2, u2) = b.refer(rng, s, 2)?;
                if b.value(o1) == b.value(o2) {
                    return None;
                }
                let free: Vec<Attribute> = Attribute::ALL
                    .into_iter()
                    .filter(|a| !u1.contains(a) && !u2.contains(a))
                    .collect();
                let a = *free.choose(rng)?;
                b.push(&format!("equal_{}", a.name()), None, &[o1, o2]);
            }
            Family::VerifyMatAnd => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let s = b.scene();
                let f = b.filters(rng, s, 1)?;
                let i = b.push("intersect", None, &[m, f]);
                b.push("exist", None, &[i]);
            }
            Family::QuerySpaMat => {
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let (o2, _) = b.refer(rng, m, 1)?;
                let r = b.relate(rng, o2)?;
                let (o3, used3) = b.refer(rng, r, 2)?;
                b.query(rng, o3, &used3)?;
            }
            Family::ChooseCountMat => {
                let op = *["greater_than", "less_than"].choose(rng)?;
                let s = b.scene();
                let (o, used) = b.refer(rng, s, 2)?;
                let m = b.same(rng, o, &used)?;
                let c1 = b.push("count", None, &[m]);
                let s = b.scene();
                let f = b.filters(rng, s, 1)?;
                let c2 = b.push("count", None, &[f]);
                b.push(op, None, &[c1, c2]);
            }
            Family::LogicalOrSpa => {
                let s = b.scene();
                let (o, _) = b.refer(rng, s, 2)?;
                let r = b.relate(rng, o)?;
                let s = b.scene();
                let f = b.filters(rng, s, 1)?;
                let u = b.push("union", None, &[r, f]);
                b.push("exist", None, &[u]);
            }
        }
        b.finish()
    }
}

/// Post-order program builder that executes nodes as they are added, so
/// templates can pick arguments that make sense on the scene.
struct Builder<'s> {
    scene: &'s Scene,
    nodes: Vec<SubTaskNode>,
    values: Vec<Value>,
}

impl<'s> Builder<'s> {
    fn new(scene: &'s Scene) -> Self {
        Self {
            scene,
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: &str, arg: Option<&str>, inputs: &[usize]) -> usize {
        self.nodes.push(SubTaskNode::new(op, arg, inputs.to_vec()));
        let node = self.nodes.last().expect("just pushed");
        // a failing node (non-unique referent) poisons the sample
        let v = exec_node(node, &self.values, self.scene).unwrap_or(Value::Set(0));
        self.values.push(v);
        self.nodes.len() - 1
    }

    fn value(&self, i: usize) -> Value {
        self.values[i]
    }

    fn set(&self, i: usize) -> u64 {
        match self.values[i] {
            Value::Set(s) => s,
            _ => 0,
        }
    }

    fn scene(&mut self) -> usize {
        self.push("scene", None, &[])
    }

    fn objects(&self, mask: u64) -> impl Iterator<Item = (usize, &super::scene::Object)> + '_ {
        (0..self.scene.cells.len())
            .filter(move |&i| mask >> i & 1 == 1)
            .map(|i| (i, self.scene.object(i).expect("set cells hold objects")))
    }

    /// `k` filters on distinct attributes. Values are taken from objects in
    /// the set half of the time so counts are not mostly zero.
    fn filters<R: Rng + ?Sized>(&mut self, rng: &mut R, mut s: usize, k: usize) -> Option<usize> {
        let mut attrs = Attribute::ALL.to_vec();
        attrs.shuffle(rng);
        for &a in attrs.iter().take(k) {
            let present: Vec<u8> = self.objects(self.set(s)).map(|(_, o)| o.get(a)).collect();
            let v = if !present.is_empty() && rng.gen_bool(0.5) {
                *present.choose(rng)?
            } else {
                rng.gen_range(0..a.values().len() as u8)
            };
            s = self.push(&format!("filter_{}", a.name()), Some(a.values()[v as usize]), &[s]);
        }
        Some(s)
    }

    /// Filters narrowing set `s` to one object, then `unique`. Returns the
    /// unique node and the attributes used.
    fn refer<R: Rng + ?Sized>(&mut self, rng: &mut R, s: usize, max_filters: usize) -> Option<(usize, Vec<Attribute>)> {
        let members: Vec<usize> = self.objects(self.set(s)).map(|(i, _)| i).collect();
        let target = *members.choose(rng)?;
        let obj = *self.scene.object(target)?;
        let mut attrs = Attribute::ALL.to_vec();
        attrs.shuffle(rng);
        let mut mask = self.set(s);
        let mut chosen = Vec::new();
        for a in attrs {
            if mask.count_ones() == 1 && !chosen.is_empty() {
                break;
            }
            let narrowed = self
                .objects(mask)
                .filter(|(_, o)| o.get(a) == obj.get(a))
                .fold(0u64, |m, (i, _)| m | (1 << i));
            if narrowed != mask {
                mask = narrowed;
                chosen.push(a);
            }
        }
        if mask.count_ones() != 1 || chosen.is_empty() || chosen.len() > max_filters {
            return None;
        }
        let mut cur = s;
        for &a in &chosen {
            cur = self.push(&format!("filter_{}", a.name()), Some(obj.word(a)), &[cur]);
        }
        Some((self.push("unique", None, &[cur]), chosen))
    }

    fn relate<R: Rng + ?Sized>(&mut self, rng: &mut R, o: usize) -> Option<usize> {
        let rel = *RELATIONS.choose(rng)?;
        Some(self.push("relate", Some(rel), &[o]))
    }

    fn same<R: Rng + ?Sized>(&mut self, rng: &mut R, o: usize, used: &[Attribute]) -> Option<usize> {
        let free: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| !used.contains(a)).collect();
        let a = *free.choose(rng)?;
        Some(self.push(&format!("same_{}", a.name()), None, &[o]))
    }

    fn query<R: Rng + ?Sized>(&mut self, rng: &mut R, o: usize, used: &[Attribute]) -> Option<usize> {
        let free: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| !used.contains(a)).collect();
        let a = *free.choose(rng)?;
        Some(self.push(&format!("query_{}", a.name()), None, &[o]))
    }

    /// `count` or `exist` over a set.
    fn reduce<R: Rng + ?Sized>(&mut self, rng: &mut R, s: usize) -> Option<usize> {
        let op = if rng.gen_bool(0.5) { "count" } else { "exist" };
        Some(self.push(op, None, &[s]))
    }

    /// Ends a referring chain: count, exist, or query of a unique member.
    fn finish_set<R: Rng + ?Sized>(&mut self, rng: &mut R, s: usize) -> Option<usize> {
        match rng.gen_range(0..3) {
            0 => {
                let k = rng.gen_range(0..=1);
                let f = self.filters(rng, s, k)?;
                Some(self.push("count", None, &[f]))
            }
            1 => {
                let f = self.filters(rng, s, 1)?;
                Some(self.push("exist", None, &[f]))
            }
            _ => {
                let (o, used) = self.refer(rng, s, 2)?;
                self.query(rng, o, &used)
            }
        }
    }

    fn finish(self) -> Option<Program> {
        Program::from_nodes(self.nodes).ok()
    }
}

/// Structural summary of a family's programs: op multiset per position.
pub fn op_positions(programs: &[&Program]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for p in programs {
        for (i, op) in p.ops().enumerate() {
            let e = out.entry(op.to_string()).or_default();
            if !e.contains(&i) {
                e.push(i);
            }
        }
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}
