use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::exec::exec_program_symbolic;
use super::families::Family;
use super::scene::{generate_scene, ColorConstraint, Scene, SceneConstraints};
use super::text::{question_text, AnswerVocab};
use super::DataError;
use crate::program::Program;

pub const SCHEMA: &str = "tmn-samples";
pub const SCHEMA_VERSION: u32 = 1;

/// Scenes tried per sample before giving up on a family.
const MAX_SCENES: usize = 10_000;
/// Template attempts per scene.
const ATTEMPTS_PER_SCENE: usize = 100;
/// Candidates drawn per kept sample before answer balancing.
const POOL_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestSysgen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::TestSysgen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSysgen => "test_sysgen",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub scene: Scene,
    pub program: Program,
    pub question: String,
    pub answer: String,
    pub family: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Attribute pairs inverted between train and test.
    Cogent,
    /// Held-out recombined families.
    Closure,
    /// Four held-out question types, a fixed number each.
    Sgl,
}

fn default_height() -> usize {
    5
}
fn default_min_objects() -> usize {
    2
}
fn default_max_objects() -> usize {
    8
}
fn default_per_type() -> usize {
    50
}

/// Dataset recipe, read from a key-value file such as
///
/// ```toml
/// kind = "closure"
/// seed = 7
/// n_train = 16000
/// n_val = 2000
/// n_test = 2000
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Ignored for `sgl`, whose test size is `4 * sgl_per_type`.
    #[serde(default)]
    pub n_test: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_height")]
    pub width: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_per_type")]
    pub sgl_per_type: usize,
}

impl SplitSpec {
    pub fn new(kind: SplitKind, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Self {
        Self {
            kind,
            seed,
            n_train,
            n_val,
            n_test,
            height: default_height(),
            width: default_height(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            sgl_per_type: default_per_type(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Invalid(e.to_string()))
    }

    pub fn families(&self, split: Split) -> Vec<Family> {
        match (split, self.kind) {
            (Split::TestSysgen, SplitKind::Closure) => Family::RECOMBINED.to_vec(),
            (Split::TestSysgen, SplitKind::Sgl) => Family::SGL.to_vec(),
            _ => Family::BASE.to_vec(),
        }
    }

    pub fn constraints(&self, split: Split) -> SceneConstraints {
        let colors = match (self.kind, split) {
            (SplitKind::Cogent, Split::TestSysgen) => Some(ColorConstraint::condition_b()),
            (SplitKind::Cogent, _) => Some(ColorConstraint::condition_a()),
            _ => None,
        };
        SceneConstraints {
            height: self.height,
            width: self.width,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            colors,
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::TestSysgen if self.kind == SplitKind::Sgl => Family::SGL.len() * self.sgl_per_type,
            Split::TestSysgen => self.n_test,
        }
    }
}

/// Stable 64-bit seed for one (split, family) stream.
fn derive_seed(seed: u64, split: Split, family: Family) -> u64 {
    let h = Sha256::digest(format!("{seed}/{}/{}", split.name(), family.name()).as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Draws `n` answer-balanced samples of one family.
///
/// A candidate pool `POOL_FACTOR` times larger is drawn, bucketed by
/// answer, and samples are taken round-robin across answers, so frequent
/// answers are rejected in favour of rare ones.
pub fn generate_family(
    family: Family,
    n: usize,
    constraints: &SceneConstraints,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Scene, Program, String)>, DataError> {
    let answers = AnswerVocab::default();
    let mut buckets: BTreeMap<usize, Vec<(Scene, Program, String)>> = BTreeMap::new();
    let target = n * POOL_FACTOR;
    let mut drawn = 0;
    let mut scenes = 0;
    let (yes, no) = (answers.id("yes"), answers.id("no"));
    // Yes/no families keep drawing until both answers can fill half the quota.
    let short = |b: &BTreeMap<usize, Vec<(Scene, Program, String)>>| {
        let yes_no = b.keys().all(|&k| Some(k) == yes || Some(k) == no);
        let have = |k: Option<usize>| k.and_then(|k| b.get(&k)).map_or(0, Vec::len);
        yes_no && have(yes).min(have(no)) < n.div_ceil(2)
    };
    while drawn < target || short(&buckets) {
        scenes += 1;
        if scenes > MAX_SCENES + target * 20 {
            return Err(DataError::Unsatisfiable(format!(
                "family {} produced {drawn} of {target} candidates",
                family.name()
            )));
        }
        let scene = generate_scene(rng, constraints)?;
        for _ in 0..ATTEMPTS_PER_SCENE {
            let Some(p) = family.build(rng, &scene) else { continue };
            let Ok(answer) = exec_program_symbolic(&p, &scene) else {
                continue;
            };
            let id = answers
                .id(&answer)
                .ok_or_else(|| DataError::Invalid(format!("answer {answer} outside the answer set")))?;
            buckets.entry(id).or_default().push((scene, p, answer));
            drawn += 1;
            break;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut iters: Vec<_> = buckets.into_values().map(Vec::into_iter).collect();
    while out.len() < n {
        let before = out.len();
        for it in iters.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(s) = it.next() {
                out.push(s);
            }
        }
        if out.len() == before {
            break;
        }
    }
    Ok(out)
}

/// Generates one split, families sharing `n` as evenly as possible.
pub fn generate_split(spec: &SplitSpec, split: Split) -> Result<Vec<Sample>, DataError> {
    let families = spec.families(split);
    let n = spec.size(split);
    let constraints = spec.constraints(split);
    let mut samples = Vec::with_capacity(n);
    for (k, &family) in families.iter().enumerate() {
        let quota = n / families.len() + usize::from(k < n % families.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split, family));
        for (scene, program, answer) in generate_family(family, quota, &constraints, &mut rng)? {
            samples.push(Sample {
                id: String::new(),
                question: question_text(&program),
                scene,
                program,
                answer,
                family: family.name().to_string(),
                split,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed ^ split as u64);
    samples.shuffle(&mut rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("{}-{i:06}", split.name());
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(AuditCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&AuditCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Number of samples whose stored answer differs from the executor's.
pub fn label_mismatches(samples: &[Sample]) -> usize {
    samples
        .iter()
        .filter(|s| exec_program_symbolic(&s.program, &s.scene).ok().as_deref() != Some(s.answer.as_str()))
        .count()
}

fn shape_color_pairs(samples: &[&Sample]) -> BTreeSet<(u8, u8)> {
    samples
        .iter()
        .flat_map(|s| s.scene.cells.iter().flatten().map(|o| (o.shape, o.color)))
        .collect()
}

/// Largest deviation of P(yes) from 1/2 over families that only answer
/// yes/no, per family.
pub fn yes_no_balance(samples: &[Sample]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (usize, usize, bool)> = BTreeMap::new();
    for s in samples {
        let e = counts.entry(&s.family).or_insert((0, 0, true));
        e.0 += usize::from(s.answer == "yes");
        e.1 += 1;
        e.2 &= s.answer == "yes" || s.answer == "no";
    }
    counts
        .into_iter()
        .filter(|(_, (_, _, yn))| *yn)
        .map(|(f, (y, n, _))| (f.to_string(), (y as f64 / n as f64 - 0.5).abs()))
        .collect()
}

/// Label soundness, split hygiene and answer balance.
pub fn audit(spec: &SplitSpec, splits: &BTreeMap<Split, Vec<Sample>>) -> AuditReport {
    let mut r = AuditReport::default();
    let all: Vec<&Sample> = splits.values().flatten().collect();
    let bad: usize = splits.values().map(|s| label_mismatches(s)).sum();
    r.push(
        "label_soundness",
        bad == 0,
        format!("{bad} of {} labels disagree with the executor", all.len()),
    );

    let empty = Vec::new();
    let train = splits.get(&Split::Train).unwrap_or(&empty);
    let val = splits.get(&Split::Val).unwrap_or(&empty);
    let test = splits.get(&Split::TestSysgen).unwrap_or(&empty);
    let seen: Vec<&Sample> = train.iter().chain(val).collect();
    match spec.kind {
        SplitKind::Cogent => {
            let a = shape_color_pairs(&seen);
            let b = shape_color_pairs(&test.iter().collect::<Vec<_>>());
            let overlap: Vec<_> = a.intersection(&b).collect();
            r.push(
                "attribute_pairs_disjoint",
                overlap.is_empty(),
                format!("{} shared (shape, color) pairs", overlap.len()),
            );
        }
        SplitKind::Closure | SplitKind::Sgl => {
            let train_fam: BTreeSet<&str> = seen.iter().map(|s| s.family.as_str()).collect();
            let test_fam: BTreeSet<&str> = test.iter().map(|s| s.family.as_str()).collect();
            let shared: Vec<_> = train_fam.intersection(&test_fam).collect();
            r.push(
                "families_disjoint",
                shared.is_empty(),
                format!("shared families: {shared:?}"),
            );
            let train_ops: BTreeSet<&str> = train.iter().flat_map(|s| s.program.ops()).collect();
            let missing: BTreeSet<&str> = test
                .iter()
                .flat_map(|s| s.program.ops())
                .filter(|op| !train_ops.contains(op))
                .collect();
            r.push(
                "test_ops_seen_in_train",
                missing.is_empty(),
                format!("ops only in test: {missing:?}"),
            );
        }
    }
    if spec.kind == SplitKind::Sgl {
        let want = Family::SGL.len() * spec.sgl_per_type;
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for s in test {
            *per.entry(&s.family).or_default() += 1;
        }
        let ok = test.len() == want && per.len() == Family::SGL.len() && per.values().all(|&c| c == spec.sgl_per_type);
        r.push("sgl_size", ok, format!("{} test samples, per type {per:?}", test.len()));
    }
    for (split, samples) in splits {
        let worst =
            yes_no_balance(samples).into_iter().fold(
                (String::new(), 0.0f64),
                |acc, (f, d)| if d > acc.1 { (f, d) } else { acc },
            );
        r.push(
            &format!("yes_no_balance_{}", split.name()),
            worst.1 <= 0.05,
            format!("max |P(yes) - 0.5| = {:.4} ({})", worst.1, worst.0),
        );
        let sized = samples.len() == spec.size(*split);
        r.push(
            &format!("size_{}", split.name()),
            sized,
            format!("{} of {} samples", samples.len(), spec.size(*split)),
        );
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema: String,
    pub version: u32,
    pub spec: SplitSpec,
    pub catalog_hash: String,
    pub answers: Vec<String>,
    pub files: BTreeMap<Split, FileEntry>,
    pub audit: AuditReport,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    split: Split,
    count: usize,
}

/// JSON-lines text: one header line, then one sample per line.
pub fn encode_samples(split: Split, samples: &[Sample]) -> String {
    let mut out = serde_json::to_string(&Header {
        schema: SCHEMA.into(),
        version: SCHEMA_VERSION,
        split,
        count: samples.len(),
    })
    .expect("header serializes");
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| DataError::Invalid(format!("{} is empty", path.display())))?
        .map_err(|e| DataError::Io(e.to_string()))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| DataError::Invalid(format!("{}: bad header: {e}", path.display())))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(DataError::Invalid(format!(
            "{}: schema {} v{} is not {SCHEMA} v{SCHEMA_VERSION}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| DataError::Invalid(format!("{} line {}: {e}", path.display(), i + 2)))?;
        out.push(s);
    }
    if out.len() != header.count {
        return Err(DataError::Invalid(format!(
            "{}: header says {} samples, found {}",
            path.display(),
            header.count,
            out.len()
        )));
    }
    Ok(out)
}

/// Generates every split and audits them.
pub fn build_splits(spec: &SplitSpec) -> Result<(BTreeMap<Split, Vec<Sample>>, AuditReport), DataError> {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        splits.insert(split, generate_split(spec, split)?);
    }
    let report = audit(spec, &splits);
    Ok((splits, report))
}

/// Writes the split files and `manifest.json` into `dir`. Fails, after
/// writing, when the audit fails.
pub fn write_dataset(
    dir: &Path,
    spec: &SplitSpec,
    splits: &BTreeMap<Split, Vec<Sample>>,
    report: &AuditReport,
    catalog_hash: &str,
) -> Result<SplitManifest, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io(format!("{}: {e}", dir.display())))?;
    let mut files = BTreeMap::new();
    for (split, samples) in splits {
        let text = encode_samples(*split, samples);
        let name = split.file_name();
        let path = dir.join(&name);
        let mut f = fs::File::create(&path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(text.as_bytes()).map_err(|e| DataError::Io(e.to_string()))?;
        files.insert(
            *split,
            FileEntry {
                path: name,
                count: samples.len(),
                sha256: hex::encode(Sha256::digest(text.as_bytes())),
            },
        );
    }
    let manifest = SplitManifest {
        schema: SCHEMA.into(),
        version: SCHEMA_VERSION,
        spec: spec.clone(),
        catalog_hash: catalog_hash.to_string(),
        answers: AnswerVocab::default().words().to_vec(),
        files,
        audit: report.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text).map_err(|e| DataError::Io(e.to_string()))?;
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(DataError::Audit(names.join(", ")));
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_split_is_hygienic() {
        let spec = SplitSpec::new(SplitKind::Closure, 3, 450, 90, 100);
        let (splits, report) = build_splits(&spec).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert_eq!(splits[&Split::TestSysgen].len(), 100);
        assert!(splits[&Split::TestSysgen]
            .iter()
            .all(|s| Family::RECOMBINED.iter().any(|f| f.name() == s.family)));
    }

    #[test]
    fn spec_parses_from_key_value_text() {
        let spec = SplitSpec::from_toml("kind = \"sgl\"\nseed = 4\nn_train = 10\nn_val = 5\n").unwrap();
        assert_eq!(spec.kind, SplitKind::Sgl);
        assert_eq!(spec.size(Split::TestSysgen), 200);
        assert_eq!(spec.height, 5);
        assert!(SplitSpec::from_toml("kind = \"sgl\"\nseed = 4\nn_train = 1\nn_val = 1\nbogus = 1").is_err());
    }

    #[test]
    fn samples_round_trip_through_jsonl() {
        let spec = SplitSpec::new(SplitKind::Cogent, 1, 30, 10, 10);
        let samples = generate_split(&spec, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.jsonl");
        fs::write(&path, encode_samples(Split::Val, &samples)).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);
    }
}
