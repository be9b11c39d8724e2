//! Symmetry-aware pose errors, recall curves and report aggregation.
//!
//! The headline number is "AR (no-VSD)": the mean of the MSSD and MSPD
//! average recalls. VSD needs depth rendering and is not computed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{BoundingBox, ObjectModel};
use crate::geometry::{CameraIntrinsics, GeometryError, Pose, ProjectiveCentre, Rotation, Translation};
use crate::parallel;

pub const AR_LABEL: &str = "AR (no-VSD)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("object model has no vertices")]
    EmptyModel,
    #[error("no errors to aggregate")]
    EmptyInput,
    #[error("no model for object {0}")]
    MissingModel(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Threshold grids: MSSD as diameter fractions, MSPD as multiples of
/// `r = width / 640` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub mssd: Vec<f64>,
    pub mspd: Vec<f64>,
    pub mspd_fine: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            mssd: (1..=10).map(|i| 0.05 * i as f64).collect(),
            mspd: (1..=10).map(|i| 5.0 * i as f64).collect(),
            mspd_fine: (1..=50).map(|i| i as f64).collect(),
        }
    }
}

pub fn mspd_scale(image_width: u32) -> f64 {
    image_width as f64 / 640.0
}

/// Maximum symmetry-aware surface distance, metres.
pub fn mssd(est: &Pose, gt: &Pose, model: &ObjectModel) -> Result<f64, EvalError> {
    if model.vertices.is_empty() {
        return Err(EvalError::EmptyModel);
    }
    let est_pts: Vec<Vector3<f64>> = model.vertices.iter().map(|x| est.transform(x)).collect();
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        let sym_gt = Pose::new(gt.rotation.compose(s), gt.translation);
        let mut worst: f64 = 0.0;
        for (x, e) in model.vertices.iter().zip(&est_pts) {
            worst = worst.max((e - sym_gt.transform(x)).norm());
            if worst >= best {
                break;
            }
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Maximum symmetry-aware projection distance, pixels.
pub fn mspd(
    est: &Pose,
    gt: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
) -> Result<f64, EvalError> {
    if model.vertices.is_empty() {
        return Err(EvalError::EmptyModel);
    }
    let est_px = model
        .vertices
        .iter()
        .map(|x| k.project(&est.transform(x)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        let sym_gt = Pose::new(gt.rotation.compose(s), gt.translation);
        let mut worst: f64 = 0.0;
        for (x, e) in model.vertices.iter().zip(&est_px) {
            let g = k.project(&sym_gt.transform(x))?;
            worst = worst.max((e - g).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recalls: Vec<f64>,
    pub average: f64,
}

/// Fraction of errors strictly below each threshold, and their mean.
pub fn recall_curve(errors: &[f64], thresholds: &[f64]) -> Result<RecallCurve, EvalError> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = errors.len() as f64;
    let recalls: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n)
        .collect();
    let average = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(RecallCurve {
        thresholds: thresholds.to_vec(),
        recalls,
        average,
    })
}

/// Perturbs a box's corner and size by uniform noise of up to
/// `magnitude·{w, h}`. `magnitude` is clamped to `[0, 0.5]`.
pub fn bbox_jitter(bbox: &BoundingBox, magnitude: f64, seed: u64) -> BoundingBox {
    let m = magnitude.clamp(0.0, 0.5);
    if m == 0.0 {
        return *bbox;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.gen_range(-m..=m);
    let (dx, dy, dw, dh) = (u(), u(), u(), u());
    BoundingBox {
        x: bbox.x + dx * bbox.w,
        y: bbox.y + dy * bbox.h,
        w: (bbox.w * (1.0 + dw)).max(bbox.w * 1e-3),
        h: (bbox.h * (1.0 + dh)).max(bbox.h * 1e-3),
    }
}

/// One estimate matched with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: u32,
    pub image_id: u32,
    pub object_id: u32,
    /// `None` when the method produced no estimate; scored as a failure.
    pub est_pose: Option<Pose>,
    pub gt_pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub visibility: f64,
}

/// Box-plot summary (Tukey whiskers at 1.5 IQR, clipped to the data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub whisker_lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_hi: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        Some(Self {
            count: v.len(),
            min: v[0],
            whisker_lo: *v.iter().find(|&&x| x >= lo_fence).unwrap_or(&v[0]),
            q1,
            median: quantile(&v, 0.5),
            q3,
            whisker_hi: *v.iter().rev().find(|&&x| x <= hi_fence).unwrap_or(&v[v.len() - 1]),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub object_id: u32,
    pub count: usize,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub ar_no_vsd: f64,
    pub mae_centre_px: f64,
    pub mae_distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Per-record MSPD recall averaged over the fine grid.
    pub mspd_recall: Option<BoxStats>,
    /// Raw MSPD errors, pixels.
    pub mspd_px: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub num_records: usize,
    pub failures: usize,
    /// Pooled over all records.
    pub ar_no_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    /// Mean of the per-object values.
    pub mean_object_ar_no_vsd: f64,
    pub mae_centre_px: f64,
    pub mae_distance_mm: f64,
    pub per_object: Vec<ObjectReport>,
    pub visibility_bins: Vec<VisibilityBin>,
}

/// Scores of one record; failures score as infinite error.
#[derive(Debug, Clone, Copy)]
struct Scored {
    object_id: u32,
    visibility: f64,
    mssd_norm: f64,
    mspd_norm: f64,
    mspd_px: f64,
    centre_px: f64,
    distance_mm: f64,
    failed: bool,
}

/// Bin index for a visibility fraction: `[0.5, 0.6)` is bin 5, and 1.0 falls
/// in the last bin.
pub fn visibility_bin(v: f64) -> usize {
    ((v * 10.0 + 1e-9).floor().max(0.0) as usize).min(9)
}

fn score(r: &EvalRecord, model: &ObjectModel) -> Scored {
    let k = &r.intrinsics;
    let Some(est) = r.est_pose else {
        return Scored {
            object_id: r.object_id,
            visibility: r.visibility,
            mssd_norm: f64::INFINITY,
            mspd_norm: f64::INFINITY,
            mspd_px: f64::INFINITY,
            centre_px: f64::NAN,
            distance_mm: f64::NAN,
            failed: true,
        };
    };
    let centre_px = ProjectiveCentre::of_translation(&est.translation, k)
        .distance_to(&ProjectiveCentre::of_translation(&r.gt_pose.translation, k));
    let distance_mm = (est.translation.z() - r.gt_pose.translation.z()).abs() * 1000.0;
    let scale = mspd_scale(k.width);
    let (mssd_norm, mspd_px, failed) = match (
        mssd(&est, &r.gt_pose, model),
        mspd(&est, &r.gt_pose, model, k),
    ) {
        (Ok(a), Ok(b)) => (a / model.diameter, b, false),
        (Ok(a), Err(_)) => (a / model.diameter, f64::INFINITY, true),
        _ => (f64::INFINITY, f64::INFINITY, true),
    };
    Scored {
        object_id: r.object_id,
        visibility: r.visibility,
        mssd_norm,
        mspd_norm: mspd_px / scale,
        mspd_px,
        centre_px,
        distance_mm,
        failed,
    }
}

/// Mean of the finite values; NaN if there are none.
fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores every record against its model and aggregates per object, pooled,
/// and per visibility bin. The result does not depend on record order.
pub fn aggregate_report(
    records: &[EvalRecord],
    models: &[ObjectModel],
    grid: &ThresholdGrid,
) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let by_id: BTreeMap<u32, &ObjectModel> = models.iter().map(|m| (m.object_id, m)).collect();
    for r in records {
        if !by_id.contains_key(&r.object_id) {
            return Err(EvalError::MissingModel(r.object_id));
        }
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.scene_id, a.image_id, a.object_id)
            .cmp(&(b.scene_id, b.image_id, b.object_id))
            .then(a.visibility.total_cmp(&b.visibility))
    });
    let scored = parallel::map_slice(&sorted, |r| score(r, by_id[&r.object_id]));

    let summarize = |s: &[&Scored]| -> Result<(f64, f64), EvalError> {
        let a = recall_curve(&s.iter().map(|x| x.mssd_norm).collect::<Vec<_>>(), &grid.mssd)?;
        let b = recall_curve(&s.iter().map(|x| x.mspd_norm).collect::<Vec<_>>(), &grid.mspd)?;
        Ok((a.average, b.average))
    };
    let all: Vec<&Scored> = scored.iter().collect();
    let (ar_mssd, ar_mspd) = summarize(&all)?;

    let mut groups: BTreeMap<u32, Vec<&Scored>> = BTreeMap::new();
    for s in &scored {
        groups.entry(s.object_id).or_default().push(s);
    }
    let per_object = groups
        .iter()
        .map(|(&object_id, s)| {
            let (a, b) = summarize(s)?;
            Ok(ObjectReport {
                object_id,
                count: s.len(),
                ar_mssd: a,
                ar_mspd: b,
                ar_no_vsd: (a + b) / 2.0,
                mae_centre_px: mean(s.iter().map(|x| x.centre_px)),
                mae_distance_mm: mean(s.iter().map(|x| x.distance_mm)),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let visibility_bins = (0..10)
        .map(|b| {
            let members: Vec<&Scored> = scored
                .iter()
                .filter(|s| visibility_bin(s.visibility) == b)
                .collect();
            let recall: Vec<f64> = members
                .iter()
                .map(|s| {
                    grid.mspd_fine.iter().filter(|&&t| s.mspd_norm < t).count() as f64
                        / grid.mspd_fine.len() as f64
                })
                .collect();
            let px: Vec<f64> = members.iter().map(|s| s.mspd_px).filter(|v| v.is_finite()).collect();
            VisibilityBin {
                lo: b as f64 / 10.0,
                hi: (b + 1) as f64 / 10.0,
                count: members.len(),
                mspd_recall: BoxStats::of(&recall),
                mspd_px: BoxStats::of(&px),
            }
        })
        .collect();

    Ok(Report {
        metric: format!("{AR_LABEL} = mean of MSSD and MSPD average recalls"),
        num_records: scored.len(),
        failures: scored.iter().filter(|s| s.failed).count(),
        ar_no_vsd: (ar_mssd + ar_mspd) / 2.0,
        ar_mssd,
        ar_mspd,
        mean_object_ar_no_vsd: mean(per_object.iter().map(|o| o.ar_no_vsd)),
        mae_centre_px: mean(scored.iter().map(|s| s.centre_px)),
        mae_distance_mm: mean(scored.iter().map(|s| s.distance_mm)),
        per_object,
        visibility_bins,
    })
}

impl Report {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    /// Box-plot statistics per visibility bin, one row per quantity.
    pub fn write_bins_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from(
            "bin_lo,bin_hi,quantity,count,min,whisker_lo,q1,median,q3,whisker_hi,max\n",
        );
        for b in &self.visibility_bins {
            for (name, stats) in [("mspd_recall", &b.mspd_recall), ("mspd_px", &b.mspd_px)] {
                match stats {
                    Some(s) => out.push_str(&format!(
                        "{},{},{name},{},{},{},{},{},{},{},{}\n",
                        b.lo, b.hi, s.count, s.min, s.whisker_lo, s.q1, s.median, s.q3, s.whisker_hi, s.max
                    )),
                    None => out.push_str(&format!("{},{},{name},0,,,,,,,\n", b.lo, b.hi)),
                }
            }
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }
}

/// One row of a BOP-style results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene_id: u32,
    pub image_id: u32,
    pub object_id: u32,
    pub score: f64,
    pub pose: Pose,
    /// Seconds per image; -1 when not measured.
    pub time: f64,
}

const RESULTS_HEADER: &str = "scene_id,im_id,obj_id,score,R,t,time";

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes rows with `R` row-major and `t` in millimetres, space-separated.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), EvalError> {
    let mut out = Vec::new();
    writeln!(out, "{RESULTS_HEADER}").expect("in-memory write");
    for r in rows {
        let t = r.pose.translation.vector() * 1000.0;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene_id,
            r.image_id,
            r.object_id,
            r.score,
            join_floats(&r.pose.rotation.to_row_major()),
            join_floats(&[t.x, t.y, t.z]),
            r.time
        )
        .expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, msg: String| EvalError::Parse {
        file: path.display().to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("scene_id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, format!("expected 7 fields, got {}", f.len())));
        }
        let int = |s: &str, name: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| bad(n, format!("`{name}` is not an integer")))
        };
        let float = |s: &str, name: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(n, format!("`{name}` is not a number")))
        };
        let floats = |s: &str, name: &str, len: usize| -> Result<Vec<f64>, EvalError> {
            let v = s
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(n, format!("`{name}` has a non-numeric entry")))?;
            if v.len() != len {
                return Err(bad(n, format!("`{name}` needs {len} values")));
            }
            Ok(v)
        };
        let r = floats(f[4], "R", 9)?;
        let t = floats(f[5], "t", 3)?;
        let rotation = Rotation::from_row_major(&r.try_into().expect("nine values"))
            .map_err(|e| bad(n, e.to_string()))?;
        let translation = Translation::new(t[0] / 1000.0, t[1] / 1000.0, t[2] / 1000.0)
            .map_err(|e| bad(n, e.to_string()))?;
        rows.push(ResultRow {
            scene_id: int(f[0], "scene_id")?,
            image_id: int(f[1], "im_id")?,
            object_id: int(f[2], "obj_id")?,
            score: float(f[3], "score")?,
            pose: Pose::new(rotation, translation),
            time: float(f[6], "time")?,
        });
    }
    Ok(rows)
}
