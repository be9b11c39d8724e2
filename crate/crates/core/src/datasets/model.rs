use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::geometry::Rotation;

/// Object geometry used for scoring: vertex set, diameter and discrete
/// symmetry rotations (always including the identity).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub object_id: u32,
    pub vertices: Vec<Vector3<f64>>,
    pub diameter: f64,
    pub symmetries: Vec<Rotation>,
}

fn max_pairwise_distance(v: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            best = best.max((v[i] - v[j]).norm_squared());
        }
    }
    best.sqrt()
}

fn with_identity(mut symmetries: Vec<Rotation>) -> Vec<Rotation> {
    let has_identity = symmetries
        .iter()
        .any(|s| (s.matrix() - Matrix3::identity()).abs().max() < 1e-9);
    if !has_identity {
        symmetries.insert(0, Rotation::identity());
    }
    symmetries
}

impl ObjectModel {
    /// Builds a model, computing the diameter as the largest vertex distance.
    pub fn new(
        object_id: u32,
        vertices: Vec<Vector3<f64>>,
        symmetries: Vec<Rotation>,
    ) -> Result<Self, DatasetError> {
        if vertices.is_empty() {
            return Err(DatasetError::Data(format!("object {object_id} has no vertices")));
        }
        let diameter = max_pairwise_distance(&vertices);
        if !(diameter > 0.0) {
            return Err(DatasetError::Data(format!(
                "object {object_id} has zero diameter"
            )));
        }
        let symmetries = with_identity(symmetries);
        Ok(Self {
            object_id,
            vertices,
            diameter,
            symmetries,
        })
    }

    /// Builds a model with a known diameter (e.g. from `models_info.json`).
    pub fn with_diameter(
        object_id: u32,
        vertices: Vec<Vector3<f64>>,
        diameter: f64,
        symmetries: Vec<Rotation>,
    ) -> Result<Self, DatasetError> {
        if vertices.is_empty() || !(diameter > 0.0) {
            return Err(DatasetError::Data(format!(
                "object {object_id}: empty vertex set or nonpositive diameter"
            )));
        }
        Ok(Self {
            object_id,
            vertices,
            diameter,
            symmetries: with_identity(symmetries),
        })
    }

    /// Random subset of at most `max` vertices (order preserved). The
    /// diameter is kept from the full model.
    pub fn subsample(&self, max: usize, seed: u64) -> Self {
        if self.vertices.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.object_id as u64);
        let mut picked = index::sample(&mut rng, self.vertices.len(), max).into_vec();
        picked.sort_unstable();
        Self {
            vertices: picked.into_iter().map(|i| self.vertices[i]).collect(),
            ..self.clone()
        }
    }
}

/// Reads vertex positions from an ASCII or binary PLY file.
pub fn read_ply_vertices(path: &Path) -> Result<Vec<Vector3<f64>>, DatasetError> {
    use ply_rs::parser::Parser;
    use ply_rs::ply::{DefaultElement, Property};

    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let parser = Parser::<DefaultElement>::new();
    let ply = parser
        .read_ply(&mut reader)
        .map_err(|e| DatasetError::Parse {
            file: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    let vertices = ply
        .payload
        .get("vertex")
        .ok_or_else(|| DatasetError::MissingField {
            file: path.display().to_string(),
            key: "vertex".into(),
        })?;
    let scalar = |p: &Property| -> Option<f64> {
        Some(match *p {
            Property::Float(v) => v as f64,
            Property::Double(v) => v,
            Property::Int(v) => v as f64,
            Property::UInt(v) => v as f64,
            Property::Short(v) => v as f64,
            Property::UShort(v) => v as f64,
            Property::Char(v) => v as f64,
            Property::UChar(v) => v as f64,
            _ => return None,
        })
    };
    vertices
        .iter()
        .map(|el| {
            let get = |k: &str| {
                el.get(k).and_then(scalar).ok_or_else(|| DatasetError::MissingField {
                    file: path.display().to_string(),
                    key: format!("vertex.{k}"),
                })
            };
            Ok(Vector3::new(get("x")?, get("y")?, get("z")?))
        })
        .collect()
}

/// Writes an ASCII PLY with vertices (and optional triangles).
pub fn write_ply(path: &Path, vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Result<(), DatasetError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if !faces.is_empty() {
        out.push_str(&format!("element face {}\n", faces.len()));
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
    for v in vertices {
        out.push_str(&format!("{} {} {}\n", v.x as f32, v.y as f32, v.z as f32));
    }
    for f in faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    let mut file = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| DatasetError::io(path, e))
}

/// One entry of a BOP-style `models_info.json` (millimetres).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelInfo {
    pub diameter: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symmetries_discrete: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symmetries_continuous: Vec<ContinuousSymmetry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ContinuousSymmetry {
    pub axis: [f64; 3],
    #[serde(default)]
    pub offset: [f64; 3],
}

/// Number of discrete steps used to approximate a continuous symmetry.
const CONTINUOUS_STEPS: usize = 36;

pub(crate) fn symmetries_from_info(info: &ModelInfo) -> Result<Vec<Rotation>, DatasetError> {
    let mut out = Vec::new();
    for s in &info.symmetries_discrete {
        if s.len() != 16 && s.len() != 9 {
            return Err(DatasetError::Data(format!(
                "symmetry transform has {} entries",
                s.len()
            )));
        }
        let stride = if s.len() == 16 { 4 } else { 3 };
        let m = Matrix3::from_fn(|r, c| s[r * stride + c]);
        out.push(Rotation::from_matrix(m)?);
    }
    for c in &info.symmetries_continuous {
        for k in 1..CONTINUOUS_STEPS {
            let angle = std::f64::consts::TAU * k as f64 / CONTINUOUS_STEPS as f64;
            out.push(Rotation::about_axis(Vector3::from(c.axis), angle));
        }
    }
    Ok(out)
}

/// Writes `models_info.json` plus one `obj_XXXXXX.ply` per model. Lengths are
/// written in millimetres, as in BOP.
pub fn write_models(
    dir: &Path,
    models: &[ObjectModel],
    faces: &[Vec<[usize; 3]>],
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let mut info = BTreeMap::new();
    for (i, m) in models.iter().enumerate() {
        let mm: Vec<Vector3<f64>> = m.vertices.iter().map(|v| v * 1000.0).collect();
        let f = faces.get(i).map(|f| f.as_slice()).unwrap_or(&[]);
        write_ply(&dir.join(format!("obj_{:06}.ply", m.object_id)), &mm, f)?;
        let symmetries_discrete = m
            .symmetries
            .iter()
            .filter(|s| (s.matrix() - Matrix3::identity()).abs().max() > 1e-9)
            .map(|s| {
                let r = s.to_row_major();
                vec![
                    r[0], r[1], r[2], 0.0, r[3], r[4], r[5], 0.0, r[6], r[7], r[8], 0.0, 0.0,
                    0.0, 0.0, 1.0,
                ]
            })
            .collect();
        info.insert(
            m.object_id.to_string(),
            ModelInfo {
                diameter: m.diameter * 1000.0,
                symmetries_discrete,
                symmetries_continuous: vec![],
            },
        );
    }
    let path = dir.join("models_info.json");
    let text = serde_json::to_string_pretty(&info).expect("serialisable");
    fs::write(&path, text + "\n").map_err(|e| DatasetError::io(&path, e))
}

/// Loads models written by [`write_models`] or found in a BOP `models/`
/// directory. Vertices are converted from millimetres to metres.
pub fn load_models(dir: &Path) -> Result<Vec<ObjectModel>, DatasetError> {
    let path = dir.join("models_info.json");
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    let info: BTreeMap<String, ModelInfo> =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            file: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
    let mut models = Vec::new();
    for (key, entry) in &info {
        let object_id: u32 = key.parse().map_err(|_| DatasetError::Parse {
            file: path.display().to_string(),
            line: 0,
            msg: format!("object key `{key}` is not an integer"),
        })?;
        let ply = dir.join(format!("obj_{object_id:06}.ply"));
        let vertices: Vec<Vector3<f64>> = read_ply_vertices(&ply)?
            .into_iter()
            .map(|v| v / 1000.0)
            .collect();
        let symmetries = symmetries_from_info(entry)?;
        let model = if vertices.len() <= 5000 {
            ObjectModel::new(object_id, vertices, symmetries)?
        } else {
            // Exact diameter is quadratic in the vertex count; large scans
            // use the listed value.
            ObjectModel::with_diameter(object_id, vertices, entry.diameter / 1000.0, symmetries)?
        };
        models.push(model);
    }
    models.sort_by_key(|m| m.object_id);
    Ok(models)
}
