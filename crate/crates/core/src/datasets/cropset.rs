//! Cached network inputs: one square crop (and clean target) per record.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{crop_and_resize, BoundingBox, ClassLabel, DatasetError, DatasetManifest, Record};
use crate::eval::bbox_jitter;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::nn::Tensor;
use crate::parallel;

/// Where scene and clean images come from.
pub trait SceneSource: Sync {
    fn scene_image(&self, record: &Record) -> Result<RgbImage, DatasetError>;

    fn clean_image(&self, record: &Record) -> Result<Option<RgbImage>, DatasetError>;

    /// Scene image shared by `records` (all from one image) plus their clean
    /// renders.
    fn scene_with_clean(
        &self,
        records: &[&Record],
    ) -> Result<(RgbImage, Vec<Option<RgbImage>>), DatasetError> {
        let first = records
            .first()
            .ok_or_else(|| DatasetError::Data("empty record group".into()))?;
        let scene = self.scene_image(first)?;
        let clean = records
            .iter()
            .map(|r| self.clean_image(r))
            .collect::<Result<_, _>>()?;
        Ok((scene, clean))
    }
}

/// Images on disk, paths resolved against the dataset root.
pub struct DirSource {
    pub root: PathBuf,
}

impl DirSource {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn open(&self, rel: &str) -> Result<RgbImage, DatasetError> {
        let path = DatasetManifest::resolve(&self.root, rel);
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|e| DatasetError::Image {
                path: path.display().to_string(),
                msg: e.to_string(),
            })
    }
}

impl SceneSource for DirSource {
    fn scene_image(&self, record: &Record) -> Result<RgbImage, DatasetError> {
        self.open(&record.image)
    }

    fn clean_image(&self, record: &Record) -> Result<Option<RgbImage>, DatasetError> {
        record.clean.as_deref().map(|p| self.open(p)).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropOptions {
    /// Box jitter magnitude as a fraction of box size; 0 disables it.
    pub jitter: f64,
    pub seed: u64,
    /// Also crop the clean targets (needed for autoencoder training only).
    pub with_clean: bool,
}

impl Default for CropOptions {
    fn default() -> Self {
        Self {
            jitter: 0.0,
            seed: 0,
            with_clean: false,
        }
    }
}

/// One network input with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrop {
    pub image: Tensor<f32>,
    pub label: ClassLabel,
    pub object_id: u32,
    /// Box the crop was taken from (jittered if requested).
    pub bbox: BoundingBox,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Option<Pose>,
    pub gt_clean_target: Option<Tensor<f32>>,
    pub visibility: f64,
}

const PLANE: usize = 3 * super::CROP_SIZE * super::CROP_SIZE;

/// Crops stored as bytes; expanded to `f32` tensors on access.
pub struct CropSet {
    pub records: Vec<Record>,
    pub labels: Vec<ClassLabel>,
    pub bboxes: Vec<BoundingBox>,
    images: Vec<u8>,
    clean: Option<Vec<u8>>,
}

fn quantize(t: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend(t.data.iter().map(|v| (v * 255.0).round() as u8));
}

fn expand(bytes: &[u8]) -> Tensor<f32> {
    let n = super::CROP_SIZE;
    Tensor::from_vec(3, n, n, bytes.iter().map(|&b| b as f32 / 255.0).collect())
        .expect("crop shape")
}

/// Jitter seed for one record, independent of record order.
fn record_seed(seed: u64, r: &Record) -> u64 {
    seed ^ ((r.scene_id as u64) << 48) ^ ((r.image_id as u64) << 16) ^ r.object_id as u64
}

impl CropSet {
    pub fn build<S: SceneSource + ?Sized>(
        source: &S,
        manifest: &DatasetManifest,
        records: &[Record],
        opts: CropOptions,
    ) -> Result<Self, DatasetError> {
        let labels = records
            .iter()
            .map(|r| manifest.class_of(r.object_id))
            .collect::<Result<Vec<_>, _>>()?;
        let bboxes: Vec<BoundingBox> = records
            .iter()
            .map(|r| {
                if opts.jitter > 0.0 {
                    bbox_jitter(&r.bbox, opts.jitter, record_seed(opts.seed, r))
                } else {
                    r.bbox
                }
            })
            .collect();

        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot: HashMap<(u32, u32), usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let g = *slot.entry(r.image_key()).or_insert_with(|| {
                groups.push(vec![]);
                groups.len() - 1
            });
            groups[g].push(i);
        }

        type Cropped = Vec<(usize, Tensor<f32>, Option<Tensor<f32>>)>;
        let results = parallel::map_slice(&groups, |group| -> Result<Cropped, DatasetError> {
            let refs: Vec<&Record> = group.iter().map(|&i| &records[i]).collect();
            let (scene, clean) = if opts.with_clean {
                source.scene_with_clean(&refs)?
            } else {
                (source.scene_image(refs[0])?, vec![None; refs.len()])
            };
            group
                .iter()
                .zip(clean)
                .map(|(&i, c)| {
                    let crop = crop_and_resize(&scene, &bboxes[i])?;
                    let target = match (opts.with_clean, c) {
                        (false, _) => None,
                        (true, Some(c)) => Some(crop_and_resize(&c, &bboxes[i])?),
                        (true, None) => {
                            return Err(DatasetError::Data(format!(
                                "record {}/{}/{} has no clean target",
                                records[i].scene_id, records[i].image_id, records[i].object_id
                            )))
                        }
                    };
                    Ok((i, crop, target))
                })
                .collect()
        });

        let mut ordered: Vec<Option<(Tensor<f32>, Option<Tensor<f32>>)>> = vec![None; records.len()];
        for group in results {
            for (i, crop, target) in group? {
                ordered[i] = Some((crop, target));
            }
        }
        let mut images = Vec::with_capacity(records.len() * PLANE);
        let mut clean = opts.with_clean.then(|| Vec::with_capacity(records.len() * PLANE));
        for entry in ordered {
            let (crop, target) = entry.expect("every record cropped");
            quantize(&crop, &mut images);
            if let (Some(buf), Some(t)) = (clean.as_mut(), target) {
                quantize(&t, buf);
            }
        }
        Ok(Self {
            records: records.to_vec(),
            labels,
            bboxes,
            images,
            clean,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_clean(&self) -> bool {
        self.clean.is_some()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        expand(&self.images[i * PLANE..(i + 1) * PLANE])
    }

    pub fn clean(&self, i: usize) -> Option<Tensor<f32>> {
        self.clean
            .as_ref()
            .map(|c| expand(&c[i * PLANE..(i + 1) * PLANE]))
    }

    pub fn get(&self, i: usize) -> LabeledCrop {
        let r = &self.records[i];
        LabeledCrop {
            image: self.image(i),
            label: self.labels[i],
            object_id: r.object_id,
            bbox: self.bboxes[i],
            intrinsics: r.intrinsics,
            gt_pose: Some(r.gt_pose),
            gt_clean_target: self.clean(i),
            visibility: r.visibility,
        }
    }

    /// Subset by index, keeping order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |buf: &Vec<u8>| {
            let mut out = Vec::with_capacity(idx.len() * PLANE);
            for &i in idx {
                out.extend_from_slice(&buf[i * PLANE..(i + 1) * PLANE]);
            }
            out
        };
        Self {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            bboxes: idx.iter().map(|&i| self.bboxes[i]).collect(),
            images: pick(&self.images),
            clean: self.clean.as_ref().map(pick),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_dataset, Split, SyntheticConfig};

    #[test]
    fn synthetic_and_disk_sources_agree() {
        let cfg = SyntheticConfig {
            train_images: 3,
            test_images: 1,
            width: 320,
            height: 240,
            fx: 286.0,
            fy: 286.0,
            px: 160.0,
            py: 120.0,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let records = ds.manifest.split(Split::Train);
        let opts = CropOptions {
            with_clean: true,
            jitter: 0.1,
            seed: 3,
        };
        let a = CropSet::build(&ds, &ds.manifest, &records, opts).unwrap();
        let b = CropSet::build(&DirSource::new(dir.path()), &ds.manifest, &records, opts).unwrap();
        assert_eq!(a.len(), records.len());
        for i in 0..a.len() {
            assert_eq!(a.image(i), b.image(i));
            assert_eq!(a.clean(i), b.clean(i));
            assert_ne!(a.bboxes[i], records[i].bbox);
        }
        let sub = a.select(&[1, 0]);
        assert_eq!(sub.image(0), a.image(1));
        assert_eq!(sub.get(1).label, a.labels[0]);
    }
}
