//! Dataset records, manifests, crop preprocessing, BOP ingestion and the
//! synthetic multi-object scene generator.

mod bop;
mod crop;
mod cropset;
mod model;
mod render;
mod synth;

pub use bop::{load_bop_models, load_bop_scene};
pub use crop::{crop_and_resize, crop_square, crop_with, CROP_SIZE};
pub use cropset::{CropOptions, CropSet, DirSource, LabeledCrop, SceneSource};
pub use model::{read_ply_vertices, write_models, load_models, ObjectModel};
pub use render::{Framebuffer, Mesh, BACKGROUND_ID, OCCLUDER_ID};
pub use synth::{
    generate_synthetic_dataset, ObjectShape, Occluder, Placement, SceneRender, SceneSpec,
    SyntheticConfig, SyntheticDataset,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use crate::nn::Real;

/// Records below this visible fraction are excluded from training and test.
pub const VISIBILITY_THRESHOLD: f64 = 0.10;

/// Fraction of non-test records assigned to training.
pub const TRAIN_FRACTION: f64 = 0.9;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}: missing field `{key}`")]
    MissingField { file: String, key: String },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("crop square does not intersect the image")]
    EmptyCrop,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Data(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Axis-aligned box in pixels: top-left corner plus size. May extend past
/// the image borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DatasetError> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(DatasetError::Data(format!(
                "invalid bounding box [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn centre(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = DatasetError;
    fn try_from(b: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(b[0], b[1], b[2], b[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Class index among `num_classes`, i.e. a one-hot vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    index: usize,
    num_classes: usize,
}

impl ClassLabel {
    pub fn new(index: usize, num_classes: usize) -> Result<Self, DatasetError> {
        if index >= num_classes {
            return Err(DatasetError::Data(format!(
                "class index {index} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { index, num_classes })
    }

    /// Parses a one-hot vector: exactly one entry equal to 1, the rest 0.
    pub fn from_one_hot(v: &[f64]) -> Result<Self, DatasetError> {
        let ones: Vec<usize> = (0..v.len()).filter(|&i| v[i] == 1.0).collect();
        if ones.len() != 1 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(DatasetError::Data("label is not one-hot".into()));
        }
        Self::new(ones[0], v.len())
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn one_hot<T: Real>(&self) -> Vec<T> {
        (0..self.num_classes)
            .map(|i| if i == self.index { T::one() } else { T::zero() })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One annotated object instance in one scene image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub scene_id: u32,
    pub image_id: u32,
    pub object_id: u32,
    /// Box around the visible part of the object; crops are taken from it.
    pub bbox: BoundingBox,
    /// Box around the full (unoccluded) silhouette.
    pub bbox_obj: BoundingBox,
    pub gt_pose: Pose,
    pub visibility: f64,
    pub intrinsics: CameraIntrinsics,
    /// Scene image path, relative to the dataset root unless absolute.
    pub image: String,
    /// Clean render of the object alone on black, same size as the scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
    pub split: Split,
}

impl Record {
    pub fn image_key(&self) -> (u32, u32) {
        (self.scene_id, self.image_id)
    }
}

/// Dataset-level metadata written next to the per-split JSON-lines files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub version: u32,
    pub source: String,
    /// Object ids in class-index order.
    pub object_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub info: DatasetInfo,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.info.object_ids.len()
    }

    pub fn class_of(&self, object_id: u32) -> Result<ClassLabel, DatasetError> {
        let idx = self
            .info
            .object_ids
            .iter()
            .position(|&o| o == object_id)
            .ok_or_else(|| DatasetError::Data(format!("unknown object id {object_id}")))?;
        ClassLabel::new(idx, self.num_classes())
    }

    pub fn split(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }

    /// Per-object record counts.
    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.object_id).or_insert(0) += 1;
        }
        h
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let info_path = dir.join("dataset.json");
        let info = serde_json::to_string_pretty(&self.info).expect("serialisable");
        fs::write(&info_path, info + "\n").map_err(|e| DatasetError::io(&info_path, e))?;
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let file = fs::File::create(&path).map_err(|e| DatasetError::io(&path, e))?;
            let mut out = BufWriter::new(file);
            for r in self.records.iter().filter(|r| r.split == split) {
                let line = serde_json::to_string(r).expect("serialisable");
                writeln!(out, "{line}").map_err(|e| DatasetError::io(&path, e))?;
            }
            out.flush().map_err(|e| DatasetError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let info_path = dir.join("dataset.json");
        let text = fs::read_to_string(&info_path).map_err(|e| DatasetError::io(&info_path, e))?;
        let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            file: info_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut records = Vec::new();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            if !path.exists() {
                continue;
            }
            let file = fs::File::open(&path).map_err(|e| DatasetError::io(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| DatasetError::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                if r.split != split {
                    return Err(DatasetError::Parse {
                        file: path.display().to_string(),
                        line: i + 1,
                        msg: format!("record tagged {:?} in the {:?} file", r.split, split),
                    });
                }
                records.push(r);
            }
        }
        Ok(Self { info, records })
    }

    /// Resolves a record's path field against the dataset root.
    pub fn resolve(dir: &Path, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    }
}

/// Keeps records whose visible fraction is at least `threshold`.
pub fn filter_by_visibility(records: &[Record], threshold: f64) -> Vec<Record> {
    records
        .iter()
        .filter(|r| r.visibility >= threshold)
        .cloned()
        .collect()
}

/// Seeded train/val assignment: `round(0.9·N)` records go to training.
pub fn assign_train_val(records: &mut [Record], seed: u64) {
    let n = records.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_train {
            Split::Train
        } else {
            Split::Val
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, Translation};

    pub(crate) fn record(visibility: f64, split: Split) -> Record {
        let k = CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap();
        Record {
            scene_id: 1,
            image_id: 0,
            object_id: 1,
            bbox: BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap(),
            bbox_obj: BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap(),
            gt_pose: Pose::new(Rotation::identity(), Translation::new(0.1, 0.0, 0.8).unwrap()),
            visibility,
            intrinsics: k,
            image: "images/000000.png".into(),
            clean: None,
            split,
        }
    }

    #[test]
    fn visibility_threshold_is_inclusive() {
        let rs = vec![record(0.09, Split::Train), record(0.10, Split::Train)];
        let kept = filter_by_visibility(&rs, VISIBILITY_THRESHOLD);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].visibility, 0.10);
    }

    #[test]
    fn uniform_visibility_retains_ninety_percent() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs: Vec<Record> = (0..1000)
            .map(|_| record(rng.gen::<f64>(), Split::Train))
            .collect();
        let kept = filter_by_visibility(&rs, VISIBILITY_THRESHOLD).len() as f64;
        let sd = (1000.0f64 * 0.9 * 0.1).sqrt();
        assert!((kept - 900.0).abs() < 3.0 * sd, "kept {kept}");
    }

    #[test]
    fn train_val_split_is_ninety_ten_and_seed_stable() {
        let mut a: Vec<Record> = (0..101)
            .map(|i| {
                let mut r = record(1.0, Split::Train);
                r.image_id = i;
                r
            })
            .collect();
        let mut b = a.clone();
        assign_train_val(&mut a, 9);
        assign_train_val(&mut b, 9);
        assert_eq!(a, b);
        let n_train = a.iter().filter(|r| r.split == Split::Train).count();
        assert!((n_train as i64 - 91).abs() <= 1);
    }

    #[test]
    fn one_hot_validation() {
        let l = ClassLabel::from_one_hot(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!((l.index(), l.num_classes()), (1, 3));
        assert_eq!(l.one_hot::<f32>(), vec![0.0, 1.0, 0.0]);
        assert!(ClassLabel::from_one_hot(&[1.0, 1.0]).is_err());
        assert!(ClassLabel::from_one_hot(&[0.5, 0.0]).is_err());
        assert!(ClassLabel::new(3, 3).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![record(0.5, Split::Train), record(0.7, Split::Val)];
        records.push(record(1.0, Split::Test));
        records[2].clean = Some("clean/x.png".into());
        let m = DatasetManifest {
            info: DatasetInfo {
                version: MANIFEST_VERSION,
                source: "test".into(),
                object_ids: vec![1, 5],
            },
            records,
        };
        m.write(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.class_of(5).unwrap().index(), 1);
    }
}
