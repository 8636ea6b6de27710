use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::library::{COLORS, MATERIALS, SHAPES, SIZES};
use crate::tensor::{Scalar, Tensor};

/// Width of the per-cell feature vector: one-hot shape, color, size and
/// material plus a presence bit.
pub const FEATURE_DIM: usize = SHAPES.len() + COLORS.len() + SIZES.len() + MATERIALS.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Shape,
    Color,
    Size,
    Material,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Shape, Attribute::Color, Attribute::Size, Attribute::Material];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Color => "color",
            Attribute::Size => "size",
            Attribute::Material => "material",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Attribute::Shape => &SHAPES,
            Attribute::Color => &COLORS,
            Attribute::Size => &SIZES,
            Attribute::Material => &MATERIALS,
        }
    }

    /// Attribute named by a sub-task suffix, as in `filter_color`.
    pub fn from_suffix(op: &str) -> Option<Attribute> {
        let suffix = op.rsplit('_').next()?;
        Attribute::ALL.into_iter().find(|a| a.name() == suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
    pub material: u8,
}

impl Object {
    pub fn get(&self, a: Attribute) -> u8 {
        match a {
            Attribute::Shape => self.shape,
            Attribute::Color => self.color,
            Attribute::Size => self.size,
            Attribute::Material => self.material,
        }
    }

    pub fn word(&self, a: Attribute) -> &'static str {
        a.values()[self.get(a) as usize]
    }

    pub fn from_words(shape: &str, color: &str, size: &str, material: &str) -> Result<Self, DataError> {
        let idx = |a: Attribute, w: &str| {
            a.values()
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u8)
                .ok_or_else(|| DataError::Invalid(format!("unknown {} {w}", a.name())))
        };
        Ok(Self {
            shape: idx(Attribute::Shape, shape)?,
            color: idx(Attribute::Color, color)?,
            size: idx(Attribute::Size, size)?,
            material: idx(Attribute::Material, material)?,
        })
    }
}

/// Object as stored in dataset files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ObjectRecord {
    shape: String,
    color: String,
    size: String,
    material: String,
}

/// An `height × width` grid with at most one object per cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<Object>>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    height: usize,
    width: usize,
    cells: Vec<Option<ObjectRecord>>,
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SceneRecord {
            height: self.height,
            width: self.width,
            cells: self
                .cells
                .iter()
                .map(|c| {
                    c.map(|o| ObjectRecord {
                        shape: o.word(Attribute::Shape).into(),
                        color: o.word(Attribute::Color).into(),
                        size: o.word(Attribute::Size).into(),
                        material: o.word(Attribute::Material).into(),
                    })
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = SceneRecord::deserialize(d)?;
        let cells = r
            .cells
            .into_iter()
            .map(|c| {
                c.map(|o| Object::from_words(&o.shape, &o.color, &o.size, &o.material))
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Scene::new(r.height, r.width, cells).map_err(serde::de::Error::custom)
    }
}

impl Scene {
    pub fn new(height: usize, width: usize, cells: Vec<Option<Object>>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(DataError::Invalid(format!(
                "{} cells do not fill a {height}x{width} grid",
                cells.len()
            )));
        }
        if height * width > 64 {
            return Err(DataError::Invalid(format!("grid {height}x{width} exceeds 64 cells")));
        }
        Ok(Self { height, width, cells })
    }

    /// Places `objects` at `(row, col)`.
    pub fn with_objects(height: usize, width: usize, objects: &[((usize, usize), Object)]) -> Result<Self, DataError> {
        let mut cells = vec![None; height * width];
        for &((r, c), o) in objects {
            if r >= height || c >= width {
                return Err(DataError::Invalid(format!("cell ({r}, {c}) outside the grid")));
            }
            let slot = &mut cells[r * width + c];
            if slot.is_some() {
                return Err(DataError::Invalid(format!("cell ({r}, {c}) holds two objects")));
            }
            *slot = Some(o);
        }
        Self::new(height, width, cells)
    }

    pub fn num_objects(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Bit mask of occupied cells.
    pub fn occupied(&self) -> u64 {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_some())
            .fold(0, |m, (i, _)| m | (1 << i))
    }

    pub fn object(&self, cell: usize) -> Option<&Object> {
        self.cells.get(cell).and_then(Option::as_ref)
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    /// `[H, W, FEATURE_DIM]` one-hot encoding; empty cells are all zero.
    pub fn featurize<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.cells.len() * FEATURE_DIM];
        for (i, cell) in self.cells.iter().enumerate() {
            let Some(o) = cell else { continue };
            let f = &mut data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
            let mut offset = 0;
            for a in Attribute::ALL {
                f[offset + o.get(a) as usize] = T::one();
                offset += a.values().len();
            }
            f[offset] = T::one();
        }
        Tensor::new(&[self.height, self.width, FEATURE_DIM], data).expect("feature shape matches")
    }
}

/// Allowed colors per shape, for attribute-combination splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorConstraint {
    /// `allowed[shape]` lists permitted color indices.
    pub allowed: Vec<Vec<u8>>,
}

impl ColorConstraint {
    /// cube → {red, blue}, sphere → {green, yellow}, cylinder → any.
    pub fn condition_a() -> Self {
        Self {
            allowed: vec![vec![0, 1], vec![2, 3], vec![0, 1, 2, 3]],
        }
    }

    /// The inverted pairs: cube → {green, yellow}, sphere → {red, blue}.
    /// Cylinders keep every color in condition A, so none remain here.
    pub fn condition_b() -> Self {
        Self {
            allowed: vec![vec![2, 3], vec![0, 1], vec![]],
        }
    }

    pub fn allows(&self, shape: u8, color: u8) -> bool {
        self.allowed.get(shape as usize).is_some_and(|c| c.contains(&color))
    }

    /// All permitted `(shape, color)` pairs.
    pub fn pairs(&self) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        for (s, colors) in self.allowed.iter().enumerate() {
            for &c in colors {
                out.push((s as u8, c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConstraints {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub colors: Option<ColorConstraint>,
}

impl Default for SceneConstraints {
    fn default() -> Self {
        Self {
            height: 5,
            width: 5,
            min_objects: 2,
            max_objects: 8,
            colors: None,
        }
    }
}

/// Samples the object count uniformly, then distinct cells, then each
/// object uniformly among the allowed objects.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, c: &SceneConstraints) -> Result<Scene, DataError> {
    let cells_total = c.height * c.width;
    if c.min_objects > c.max_objects || c.max_objects > cells_total || c.min_objects == 0 {
        return Err(DataError::Unsatisfiable(format!(
            "{}..{} objects on {} cells",
            c.min_objects, c.max_objects, cells_total
        )));
    }
    let pairs: Vec<(u8, u8)> = match &c.colors {
        Some(cc) => cc.pairs(),
        None => (0..SHAPES.len() as u8)
            .flat_map(|s| (0..COLORS.len() as u8).map(move |col| (s, col)))
            .collect(),
    };
    if pairs.is_empty() {
        return Err(DataError::Unsatisfiable("no allowed (shape, color) pair".into()));
    }
    let n = rng.gen_range(c.min_objects..=c.max_objects);
    let mut cells = vec![None; cells_total];
    for cell in sample(rng, cells_total, n) {
        let (shape, color) = pairs[rng.gen_range(0..pairs.len())];
        cells[cell] = Some(Object {
            shape,
            color,
            size: rng.gen_range(0..SIZES.len() as u8),
            material: rng.gen_range(0..MATERIALS.len() as u8),
        });
    }
    Scene::new(c.height, c.width, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn features_are_one_hot_with_presence() {
        let o = Object::from_words("sphere", "green", "large", "rubber").unwrap();
        let s = Scene::with_objects(2, 2, &[((1, 0), o)]).unwrap();
        let f = s.featurize::<f64>();
        assert_eq!(f.shape(), &[2, 2, 12]);
        let cell = &f.data()[2 * 12..3 * 12];
        let want = [0., 1., 0., 0., 0., 1., 0., 0., 1., 0., 1., 1.];
        assert_eq!(cell, &want);
        assert!(f.data()[..2 * 12].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn condition_a_has_no_green_cubes() {
        let c = SceneConstraints {
            colors: Some(ColorConstraint::condition_a()),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let s = generate_scene(&mut rng, &c).unwrap();
            assert!((2..=8).contains(&s.num_objects()));
            for o in s.cells.iter().flatten() {
                assert!(!(o.shape == 0 && (o.color == 2 || o.color == 3)));
            }
        }
    }

    #[test]
    fn conditions_are_disjoint() {
        let a = ColorConstraint::condition_a().pairs();
        let b = ColorConstraint::condition_b().pairs();
        assert!(a.iter().all(|p| !b.contains(p)));
        assert_eq!(a.len() + b.len(), 12);
    }

    #[test]
    fn unsatisfiable_constraints_error() {
        let c = SceneConstraints {
            colors: Some(ColorConstraint {
                allowed: vec![vec![], vec![], vec![]],
            }),
            ..Default::default()
        };
        assert!(generate_scene(&mut ChaCha8Rng::seed_from_u64(0), &c).is_err());
        let c = SceneConstraints {
            min_objects: 30,
            max_objects: 30,
            ..Default::default()
        };
        assert!(generate_scene(&mut ChaCha8Rng::seed_from_u64(0), &c).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(9), &SceneConstraints::default()).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Scene>(&text).unwrap(), s);
    }
}
