//! The scene universe: attribute catalog, random scene generation, scene-graph
//! JSON ingestion and the spatial relations the oracle reasons over.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum pairwise 3-D distance between generated objects.
pub const MIN_SEPARATION: f64 = 0.8;
/// Coordinate differences at or below this are treated as ties by relations.
pub const TIE_EPS: f64 = 1e-6;
/// Placement rejections tolerated before scene generation gives up.
pub const MAX_PLACEMENT_REJECTIONS: usize = 10_000;
/// Half-width of the square floor objects are placed on.
pub const FLOOR_HALF_WIDTH: f64 = 3.0;

/// The four attribute dimensions of an object.
///
/// The declaration order is the canonical order used when filter chains are
/// emitted (size, color, material, shape), matching CLEVR programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Size,
    Color,
    Material,
    Shape,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Size,
        Dimension::Color,
        Dimension::Material,
        Dimension::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Size => "size",
            Dimension::Color => "color",
            Dimension::Material => "material",
            Dimension::Shape => "shape",
        }
    }

    pub fn from_name(name: &str) -> Option<Dimension> {
        match name {
            "size" => Some(Dimension::Size),
            "color" => Some(Dimension::Color),
            "material" => Some(Dimension::Material),
            "shape" => Some(Dimension::Shape),
            _ => None,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial relations between objects. `right` means larger x, `behind` larger y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Left,
        Relation::Right,
        Relation::Front,
        Relation::Behind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        match name {
            "left" => Some(Relation::Left),
            "right" => Some(Relation::Right),
            "front" => Some(Relation::Front),
            "behind" => Some(Relation::Behind),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("attribute list for {0} is empty")]
    Empty(Dimension),
    #[error("duplicate {dimension} identifier {value:?}")]
    Duplicate { dimension: Dimension, value: String },
    #[error("max_count must be at least 1")]
    MaxCount,
}

/// The closed set of attribute values objects may take.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub shapes: Vec<String>,
    pub materials: Vec<String>,
    pub max_count: usize,
}

impl Default for AttributeCatalog {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        AttributeCatalog {
            colors: owned(&[
                "gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow",
            ]),
            sizes: owned(&["small", "large"]),
            shapes: owned(&["cube", "sphere", "cylinder"]),
            materials: owned(&["rubber", "metal"]),
            max_count: 10,
        }
    }
}

impl AttributeCatalog {
    pub fn values(&self, dim: Dimension) -> &[String] {
        match dim {
            Dimension::Size => &self.sizes,
            Dimension::Color => &self.colors,
            Dimension::Material => &self.materials,
            Dimension::Shape => &self.shapes,
        }
    }

    pub fn contains(&self, dim: Dimension, value: &str) -> bool {
        self.values(dim).iter().any(|v| v == value)
    }

    pub fn index_of(&self, dim: Dimension, value: &str) -> Option<usize> {
        self.values(dim).iter().position(|v| v == value)
    }

    /// Every (dimension, value) pair in canonical dimension order.
    pub fn attribute_pairs(&self) -> impl Iterator<Item = (Dimension, &str)> + '_ {
        Dimension::ALL
            .into_iter()
            .flat_map(move |d| self.values(d).iter().map(move |v| (d, v.as_str())))
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        for dim in Dimension::ALL {
            let values = self.values(dim);
            if values.is_empty() {
                return Err(CatalogError::Empty(dim));
            }
            for (i, v) in values.iter().enumerate() {
                if values[..i].contains(v) {
                    return Err(CatalogError::Duplicate {
                        dimension: dim,
                        value: v.clone(),
                    });
                }
            }
        }
        if self.max_count < 1 {
            return Err(CatalogError::MaxCount);
        }
        Ok(())
    }

    /// Resting height of an object: 0.35 per size step (small 0.35, large 0.7).
    pub fn z_for_size(&self, size: &str) -> f64 {
        let idx = self.index_of(Dimension::Size, size).unwrap_or(0);
        0.35 * (idx + 1) as f64
    }
}

/// A single attributed object in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: String,
    pub size: String,
    pub rotation: f64,
    pub shape: String,
    #[serde(rename = "3d_coords")]
    pub coords_3d: [f64; 3],
    pub material: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_coords: Option<[f64; 3]>,
}

impl ObjectSpec {
    pub fn attribute(&self, dim: Dimension) -> &str {
        match dim {
            Dimension::Size => &self.size,
            Dimension::Color => &self.color,
            Dimension::Material => &self.material,
            Dimension::Shape => &self.shape,
        }
    }
}

/// A scene graph: the world state a question is asked about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<ObjectSpec>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid object count range [{n_min}, {n_max}] for max_count {max_count}")]
    CountRange {
        n_min: usize,
        n_max: usize,
        max_count: usize,
    },
    #[error("could not place {objects} objects after {MAX_PLACEMENT_REJECTIONS} rejections")]
    Placement { objects: usize },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("scene {scene}, object {object}: {dimension} value {value:?} is not in the catalog")]
    NotInCatalog {
        scene: usize,
        object: usize,
        dimension: Dimension,
        value: String,
    },
    #[error("scene {scene}: non-finite coordinates on object {object}")]
    NonFinite { scene: usize, object: usize },
    #[error("scene {scene}: {count} objects exceeds max_count {max_count}")]
    TooManyObjects {
        scene: usize,
        count: usize,
        max_count: usize,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Draws a random scene. A pure function of its arguments.
pub fn generate_scene(
    seed: u64,
    catalog: &AttributeCatalog,
    n_min: usize,
    n_max: usize,
) -> Result<Scene, SceneError> {
    catalog.validate()?;
    if n_min < 1 || n_min > n_max || n_max > catalog.max_count {
        return Err(SceneError::CountRange {
            n_min,
            n_max,
            max_count: catalog.max_count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(n_min..=n_max);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    let mut rejections = 0usize;
    let pick = |rng: &mut ChaCha8Rng, xs: &[String]| xs[rng.gen_range(0..xs.len())].clone();
    for _ in 0..n {
        let color = pick(&mut rng, &catalog.colors);
        let size = pick(&mut rng, &catalog.sizes);
        let shape = pick(&mut rng, &catalog.shapes);
        let material = pick(&mut rng, &catalog.materials);
        let z = catalog.z_for_size(&size);
        let coords = loop {
            let x = rng.gen_range(-FLOOR_HALF_WIDTH..FLOOR_HALF_WIDTH);
            let y = rng.gen_range(-FLOOR_HALF_WIDTH..FLOOR_HALF_WIDTH);
            let c = [x, y, z];
            if objects
                .iter()
                .all(|o| distance(&o.coords_3d, &c) >= MIN_SEPARATION)
            {
                break c;
            }
            rejections += 1;
            if rejections >= MAX_PLACEMENT_REJECTIONS {
                return Err(SceneError::Placement { objects: n });
            }
        };
        let rotation = rng.gen_range(0.0..360.0);
        objects.push(ObjectSpec {
            color,
            size,
            rotation,
            shape,
            coords_3d: coords,
            material,
            pixel_coords: None,
        });
    }
    Ok(Scene {
        id: format!("scene-{seed:016x}"),
        objects,
    })
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SceneFile {
    Clevr { scenes: Vec<SceneEntry> },
    List(Vec<SceneEntry>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SceneEntry {
    Objects(Vec<ObjectSpec>),
    Object(Box<ObjectSpec>),
    Record {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        image_filename: Option<String>,
        #[serde(default)]
        image_index: Option<u64>,
        objects: Vec<ObjectSpec>,
    },
}

#[derive(Serialize)]
struct SceneRecordOut<'a> {
    id: &'a str,
    objects: &'a [ObjectSpec],
}

#[derive(Serialize)]
struct SceneFileOut<'a> {
    scenes: Vec<SceneRecordOut<'a>>,
}

/// Serializes scenes in the CLEVR-style `{"scenes": [...]}` layout that
/// [`parse_scenes`] reads back.
pub fn serialize_scenes(scenes: &[Scene]) -> String {
    let out = SceneFileOut {
        scenes: scenes
            .iter()
            .map(|s| SceneRecordOut {
                id: &s.id,
                objects: &s.objects,
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("scene serialization is infallible")
}

/// Parses scene-graph JSON.
///
/// Accepts a bare object list (one scene), a list of object lists, or a
/// CLEVR-format object with a `"scenes"` key. Scene order is preserved.
pub fn parse_scenes(text: &str, catalog: &AttributeCatalog) -> Result<Vec<Scene>, SceneError> {
    let parsed: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let entries = match parsed {
        SceneFile::Clevr { scenes } => scenes,
        SceneFile::List(entries) => entries,
    };
    let mut scenes = Vec::new();
    if entries.iter().all(|e| matches!(e, SceneEntry::Object(_))) && !entries.is_empty() {
        let objects = entries
            .into_iter()
            .map(|e| match e {
                SceneEntry::Object(o) => *o,
                _ => unreachable!(),
            })
            .collect();
        scenes.push(Scene {
            id: "scene-0".to_string(),
            objects,
        });
    } else {
        for (i, entry) in entries.into_iter().enumerate() {
            let scene = match entry {
                SceneEntry::Objects(objects) => Scene {
                    id: format!("scene-{i}"),
                    objects,
                },
                SceneEntry::Record {
                    id,
                    image_filename,
                    image_index,
                    objects,
                } => Scene {
                    id: id
                        .or(image_filename)
                        .or(image_index.map(|n| format!("image-{n}")))
                        .unwrap_or_else(|| format!("scene-{i}")),
                    objects,
                },
                SceneEntry::Object(_) => {
                    return Err(SceneError::Parse {
                        line: 0,
                        column: 0,
                        message: format!("entry {i}: mixed objects and scenes at top level"),
                    })
                }
            };
            scenes.push(scene);
        }
    }
    for (si, scene) in scenes.iter().enumerate() {
        check_scene(si, scene, catalog)?;
    }
    Ok(scenes)
}

pub fn load_scenes(path: &Path, catalog: &AttributeCatalog) -> Result<Vec<Scene>, SceneError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenes(&text, catalog)
}

fn check_scene(si: usize, scene: &Scene, catalog: &AttributeCatalog) -> Result<(), SceneError> {
    if scene.objects.len() > catalog.max_count {
        return Err(SceneError::TooManyObjects {
            scene: si,
            count: scene.objects.len(),
            max_count: catalog.max_count,
        });
    }
    for (oi, obj) in scene.objects.iter().enumerate() {
        for dim in Dimension::ALL {
            let value = obj.attribute(dim);
            if !catalog.contains(dim, value) {
                return Err(SceneError::NotInCatalog {
                    scene: si,
                    object: oi,
                    dimension: dim,
                    value: value.to_string(),
                });
            }
        }
        if !obj.coords_3d.iter().all(|c| c.is_finite()) || !obj.rotation.is_finite() {
            return Err(SceneError::NonFinite {
                scene: si,
                object: oi,
            });
        }
    }
    Ok(())
}

/// Indices of objects standing in `relation` to the anchor, in ascending order.
///
/// Panics if `anchor` is out of range.
pub fn spatial_relate(scene: &Scene, anchor: usize, relation: Relation) -> Vec<usize> {
    let a = scene.objects[anchor].coords_3d;
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|&(i, o)| i != anchor && related(&a, &o.coords_3d, relation))
        .map(|(i, _)| i)
        .collect()
}

/// Whether an object at `other` stands in `relation` to an anchor at `anchor`.
pub fn related(anchor: &[f64; 3], other: &[f64; 3], relation: Relation) -> bool {
    match relation {
        Relation::Right => other[0] > anchor[0] + TIE_EPS,
        Relation::Left => other[0] < anchor[0] - TIE_EPS,
        Relation::Behind => other[1] > anchor[1] + TIE_EPS,
        Relation::Front => other[1] < anchor[1] - TIE_EPS,
    }
}

/// Per-dimension value counts of a scene.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AttributeHistogram {
    counts: BTreeMap<Dimension, BTreeMap<String, usize>>,
}

impl AttributeHistogram {
    pub fn get(&self, dim: Dimension, value: &str) -> usize {
        self.counts
            .get(&dim)
            .and_then(|m| m.get(value))
            .copied()
            .unwrap_or(0)
    }

    pub fn dimension(&self, dim: Dimension) -> impl Iterator<Item = (&str, usize)> {
        self.counts
            .get(&dim)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    pub fn total(&self, dim: Dimension) -> usize {
        self.dimension(dim).map(|(_, c)| c).sum()
    }
}

pub fn attribute_histogram(scene: &Scene) -> AttributeHistogram {
    let mut hist = AttributeHistogram::default();
    for obj in &scene.objects {
        for dim in Dimension::ALL {
            *hist
                .counts
                .entry(dim)
                .or_default()
                .entry(obj.attribute(dim).to_string())
                .or_default() += 1;
        }
    }
    hist
}
