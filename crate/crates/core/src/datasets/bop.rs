//! Reader for BOP-layout scene directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{
    load_models, BoundingBox, DatasetError, DatasetInfo, DatasetManifest, ObjectModel, Record,
    Split, MANIFEST_VERSION,
};
use crate::geometry::{CameraIntrinsics, Pose, Rotation, Translation};

const DEFAULT_SIZE: (u32, u32) = (640, 480);

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

struct Ctx<'a> {
    file: &'a Path,
}

impl Ctx<'_> {
    fn field<'v>(&self, v: &'v Value, key: &str) -> Result<&'v Value, DatasetError> {
        v.get(key).ok_or_else(|| DatasetError::MissingField {
            file: self.file.display().to_string(),
            key: key.to_string(),
        })
    }

    fn bad(&self, msg: String) -> DatasetError {
        DatasetError::Parse {
            file: self.file.display().to_string(),
            line: 0,
            msg,
        }
    }

    fn numbers<const N: usize>(&self, v: &Value, key: &str) -> Result<[f64; N], DatasetError> {
        let arr = self
            .field(v, key)?
            .as_array()
            .filter(|a| a.len() == N)
            .ok_or_else(|| self.bad(format!("`{key}` must be a list of {N} numbers")))?;
        let mut out = [0.0; N];
        for (o, x) in out.iter_mut().zip(arr) {
            *o = x
                .as_f64()
                .ok_or_else(|| self.bad(format!("`{key}` must be a list of {N} numbers")))?;
        }
        Ok(out)
    }

    fn entries<'v>(&self, v: &'v Value, image_key: &str) -> Result<&'v Vec<Value>, DatasetError> {
        self.field(v, image_key)?
            .as_array()
            .ok_or_else(|| self.bad(format!("entry `{image_key}` must be a list")))
    }
}

fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if dir.join("scene_gt.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DatasetError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene_gt.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DatasetError::MissingField {
            file: dir.display().to_string(),
            key: "scene_gt.json".into(),
        });
    }
    Ok(dirs)
}

fn load_one_scene(
    scene_dir: &Path,
    fallback_id: u32,
    prefix: &str,
) -> Result<Vec<Record>, DatasetError> {
    let scene_id = scene_dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .unwrap_or(fallback_id);
    let gt_path = scene_dir.join("scene_gt.json");
    let cam_path = scene_dir.join("scene_camera.json");
    let info_path = scene_dir.join("scene_gt_info.json");
    let gt = read_json(&gt_path)?;
    let cam = read_json(&cam_path)?;
    let info = if info_path.exists() {
        Some(read_json(&info_path)?)
    } else {
        None
    };
    let gt_ctx = Ctx { file: &gt_path };
    let cam_ctx = Ctx { file: &cam_path };
    let info_ctx = Ctx { file: &info_path };

    let images = gt
        .as_object()
        .ok_or_else(|| gt_ctx.bad("top level must be an object keyed by image id".into()))?;
    let mut keyed: Vec<(u32, &String)> = images
        .keys()
        .map(|k| {
            k.parse::<u32>()
                .map(|id| (id, k))
                .map_err(|_| gt_ctx.bad(format!("image key `{k}` is not an integer")))
        })
        .collect::<Result<_, _>>()?;
    keyed.sort();

    let mut records = Vec::new();
    for (image_id, key) in keyed {
        let k = cam_ctx.numbers::<9>(cam_ctx.field(&cam, key)?, "cam_K")?;
        let rel = format!("rgb/{image_id:06}.png");
        let img_path = scene_dir.join(&rel);
        let (width, height) = match image::image_dimensions(&img_path) {
            Ok(d) => d,
            Err(_) => {
                let c = &cam[key.as_str()];
                match (c.get("width").and_then(Value::as_u64), c.get("height").and_then(Value::as_u64)) {
                    (Some(w), Some(h)) => (w as u32, h as u32),
                    _ => DEFAULT_SIZE,
                }
            }
        };
        let intrinsics = CameraIntrinsics::new(k[0], k[4], k[2], k[5], width, height)?;
        let gt_entries = gt_ctx.entries(&gt, key)?;
        let info_entries = match &info {
            Some(v) => Some(info_ctx.entries(v, key)?),
            None => None,
        };
        for (i, e) in gt_entries.iter().enumerate() {
            let r = gt_ctx.numbers::<9>(e, "cam_R_m2c")?;
            let t = gt_ctx.numbers::<3>(e, "cam_t_m2c")?;
            let object_id = gt_ctx
                .field(e, "obj_id")?
                .as_u64()
                .ok_or_else(|| gt_ctx.bad("`obj_id` must be an integer".into()))?
                as u32;
            let rotation = Rotation::from_row_major(&r)?;
            let translation = Translation::new(t[0] / 1000.0, t[1] / 1000.0, t[2] / 1000.0)?;
            let (visibility, bbox, bbox_obj) = match info_entries {
                Some(list) => {
                    let ie = list.get(i).ok_or_else(|| {
                        info_ctx.bad(format!("image `{key}` has fewer entries than scene_gt"))
                    })?;
                    let vis = info_ctx
                        .field(ie, "visib_fract")?
                        .as_f64()
                        .ok_or_else(|| info_ctx.bad("`visib_fract` must be a number".into()))?;
                    let bv = info_ctx.numbers::<4>(ie, "bbox_visib")?;
                    let bo = info_ctx.numbers::<4>(ie, "bbox_obj")?;
                    (vis, bv, bo)
                }
                None => {
                    return Err(DatasetError::MissingField {
                        file: info_path.display().to_string(),
                        key: "visib_fract".into(),
                    })
                }
            };
            let Ok(bbox_obj) = BoundingBox::try_from(bbox_obj) else {
                log::warn!("{}: skipping object {i} of image {image_id} without a box", gt_path.display());
                continue;
            };
            let bbox = BoundingBox::try_from(bbox).unwrap_or(bbox_obj);
            records.push(Record {
                scene_id,
                image_id,
                object_id,
                bbox,
                bbox_obj,
                gt_pose: Pose::new(rotation, translation),
                visibility,
                intrinsics,
                image: format!("{prefix}{rel}"),
                clean: None,
                split: Split::Test,
            });
        }
    }
    Ok(records)
}

/// Loads one BOP scene directory, or every scene directory directly under
/// `dir`. Records are tagged as test; image paths are relative to `dir`.
pub fn load_bop_scene(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let dirs = scene_dirs(dir)?;
    let mut records = Vec::new();
    for (i, scene_dir) in dirs.iter().enumerate() {
        let prefix = if scene_dir == dir {
            String::new()
        } else {
            format!(
                "{}/",
                scene_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default()
            )
        };
        records.extend(load_one_scene(scene_dir, i as u32 + 1, &prefix)?);
    }
    let object_ids: Vec<u32> = records
        .iter()
        .map(|r| r.object_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(DatasetManifest {
        info: DatasetInfo {
            version: MANIFEST_VERSION,
            source: "bop".into(),
            object_ids,
        },
        records,
    })
}

/// Loads `models_info.json` and `obj_XXXXXX.ply` files (millimetres).
pub fn load_bop_models(dir: &Path) -> Result<Vec<ObjectModel>, DatasetError> {
    load_models(dir)
}
