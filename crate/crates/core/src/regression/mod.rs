//! Pose heads on top of the encoder mean, and final pose assembly.

mod mlp;
mod train;

pub use mlp::{HeadKind, Mlp, MlpConfig, HIDDEN_WIDTHS};
pub use train::{train_heads, HeadLog, HeadSample, HeadTrainConfig};

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvae::{Cvae, CvaeError};
use crate::datasets::{BoundingBox, ClassLabel, CropSet};
use crate::geometry::{
    backproject_centre, gram_schmidt_6d, rotation_to_6d, CameraIntrinsics, GeometryError, Pose,
    ProjectiveCentre, Rotation, Rotation6D,
};
use crate::parallel;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged in the {0} head")]
    NonFinite(&'static str),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-instance quantities the heads consume.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    pub mu: Vec<f64>,
    pub label: ClassLabel,
    pub bbox: BoundingBox,
    pub intrinsics: CameraIntrinsics,
}

impl HeadInput {
    /// `μ` followed by the head's box features, normalised by image size:
    /// rotation none, centre `(w, h, x, y)`, distance `(w, h)`.
    pub fn features(&self, head: HeadKind) -> Vec<f64> {
        let (iw, ih) = (
            self.intrinsics.width as f64,
            self.intrinsics.height as f64,
        );
        let b = &self.bbox;
        let boxf = [b.w / iw, b.h / ih, b.x / iw, b.y / ih];
        let mut f = self.mu.clone();
        f.extend_from_slice(&boxf[..head.bbox_features()]);
        f
    }
}

/// Centre in scene-size fractions.
pub fn centre_target(c: &ProjectiveCentre, k: &CameraIntrinsics) -> [f64; 2] {
    [c.cx / k.width as f64, c.cy / k.height as f64]
}

/// Inverse of [`centre_target`].
pub fn centre_from_target(t: [f64; 2], k: &CameraIntrinsics) -> ProjectiveCentre {
    ProjectiveCentre::new(t[0] * k.width as f64, t[1] * k.height as f64)
}

/// Regression target of head `head` for a ground-truth pose.
pub fn head_target(head: HeadKind, pose: &Pose, k: &CameraIntrinsics, tz_scale: f64) -> Vec<f64> {
    match head {
        HeadKind::Rotation => rotation_to_6d(&pose.rotation).0.to_vec(),
        HeadKind::Centre => {
            centre_target(&ProjectiveCentre::of_translation(&pose.translation, k), k).to_vec()
        }
        HeadKind::Distance => vec![pose.translation.z() / tz_scale],
    }
}

/// Smallest distance the distance head may return, in metres.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Builds the pose from its regressed parts.
pub fn assemble_pose(
    rotation: Rotation,
    centre: &ProjectiveCentre,
    tz: f64,
    k: &CameraIntrinsics,
) -> Result<Pose, RegressionError> {
    Ok(Pose::new(rotation, backproject_centre(centre, tz, k)?))
}

const BUNDLE_FORMAT: u32 = 1;

/// The three trained heads plus what is needed to use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadBundle {
    pub format: u32,
    /// Training-set mean `Tz` in metres; the distance head predicts `Tz / tz_scale`.
    pub tz_scale: f64,
    /// Hash of the encoder checkpoint the heads were trained on.
    pub cvae_hash: String,
    pub rotation: Mlp,
    pub centre: Mlp,
    pub distance: Mlp,
}

impl HeadBundle {
    pub fn new(rotation: Mlp, centre: Mlp, distance: Mlp, tz_scale: f64, cvae_hash: String) -> Self {
        Self {
            format: BUNDLE_FORMAT,
            tz_scale,
            cvae_hash,
            rotation,
            centre,
            distance,
        }
    }

    pub fn head(&self, kind: HeadKind) -> &Mlp {
        match kind {
            HeadKind::Rotation => &self.rotation,
            HeadKind::Centre => &self.centre,
            HeadKind::Distance => &self.distance,
        }
    }

    pub fn use_labels(&self) -> bool {
        self.rotation.config.use_labels
    }

    pub fn latent_dim(&self) -> usize {
        self.rotation.config.latent_dim
    }

    fn run(&self, kind: HeadKind, input: &HeadInput) -> Result<Vec<f64>, RegressionError> {
        let head = self.head(kind);
        let labels = if head.config.use_labels {
            input.label.one_hot::<f64>()
        } else {
            Vec::new()
        };
        head.forward(&input.features(kind), &labels, 1)
    }

    pub fn predict_rotation(&self, input: &HeadInput) -> Result<Rotation, RegressionError> {
        let r = self.run(HeadKind::Rotation, input)?;
        let r6 = Rotation6D(r.try_into().expect("rotation head has six outputs"));
        Ok(gram_schmidt_6d(&r6)?)
    }

    pub fn predict_centre(&self, input: &HeadInput) -> Result<ProjectiveCentre, RegressionError> {
        let c = self.run(HeadKind::Centre, input)?;
        Ok(centre_from_target([c[0], c[1]], &input.intrinsics))
    }

    /// Metres, clamped below at [`MIN_DISTANCE`].
    pub fn predict_distance(&self, input: &HeadInput) -> Result<f64, RegressionError> {
        let d = self.run(HeadKind::Distance, input)?;
        Ok((d[0] * self.tz_scale).max(MIN_DISTANCE))
    }

    pub fn predict_pose(&self, input: &HeadInput) -> Result<Pose, RegressionError> {
        let rotation = self.predict_rotation(input)?;
        let centre = self.predict_centre(input)?;
        let tz = self.predict_distance(input)?;
        assemble_pose(rotation, &centre, tz, &input.intrinsics)
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressionError> {
        let s = serde_json::to_vec(self).expect("serialisable");
        fs::write(path, s).map_err(|source| RegressionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RegressionError> {
        let bytes = fs::read(path).map_err(|source| RegressionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |msg: String| RegressionError::Format {
            path: path.display().to_string(),
            msg,
        };
        let b: Self = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        if b.format != BUNDLE_FORMAT {
            return Err(bad(format!("unsupported head bundle format {}", b.format)));
        }
        for kind in HeadKind::ALL {
            let c = b.head(kind).config;
            if c.head != kind || c.latent_dim != b.latent_dim() || c.use_labels != b.use_labels() {
                return Err(bad(format!("inconsistent {} head", kind.name())));
            }
        }
        if !(b.tz_scale > 0.0) {
            return Err(bad("distance scale must be positive".into()));
        }
        Ok(b)
    }

    /// Errors unless these heads were trained on the checkpoint with `hash`.
    pub fn check_compatible(&self, hash: &str) -> Result<(), RegressionError> {
        if self.cvae_hash != hash {
            return Err(RegressionError::Data(format!(
                "heads were trained on encoder {}, not {}",
                short(&self.cvae_hash),
                short(hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Encoder means for every crop of `set`, with the crop boxes.
pub fn encode_crops(cvae: &Cvae<f32>, set: &CropSet) -> Result<Vec<HeadInput>, RegressionError> {
    parallel::map_range(set.len(), |i| {
        let code = cvae.encode(&set.image(i), &set.labels[i])?;
        Ok(HeadInput {
            mu: code.mu,
            label: set.labels[i],
            bbox: set.bboxes[i],
            intrinsics: set.records[i].intrinsics,
        })
    })
    .into_iter()
    .collect()
}

/// Stages executed for one instance at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Encoder,
    Head(HeadKind),
}

/// What one call to [`Estimator::estimate`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub stages: Vec<Stage>,
    pub elapsed: Duration,
}

/// The full single-instance pipeline: one encoder pass, then the heads.
pub struct Estimator {
    pub cvae: Cvae<f32>,
    pub heads: HeadBundle,
}

impl Estimator {
    pub fn new(cvae: Cvae<f32>, heads: HeadBundle) -> Result<Self, RegressionError> {
        if cvae.config.latent_dim != heads.latent_dim() {
            return Err(RegressionError::ShapeMismatch(format!(
                "encoder latent has {} entries, heads expect {}",
                cvae.config.latent_dim,
                heads.latent_dim()
            )));
        }
        Ok(Self { cvae, heads })
    }

    pub fn estimate(
        &self,
        crop: &crate::nn::Tensor<f32>,
        label: &ClassLabel,
        bbox: BoundingBox,
        intrinsics: CameraIntrinsics,
    ) -> Result<(Pose, InferenceTrace), RegressionError> {
        let start = Instant::now();
        let mut stages = Vec::with_capacity(4);
        let code = self.cvae.encode(crop, label)?;
        stages.push(Stage::Encoder);
        let input = HeadInput {
            mu: code.mu,
            label: *label,
            bbox,
            intrinsics,
        };
        let rotation = self.heads.predict_rotation(&input)?;
        stages.push(Stage::Head(HeadKind::Rotation));
        let centre = self.heads.predict_centre(&input)?;
        stages.push(Stage::Head(HeadKind::Centre));
        let tz = self.heads.predict_distance(&input)?;
        stages.push(Stage::Head(HeadKind::Distance));
        let pose = assemble_pose(rotation, &centre, tz, &intrinsics)?;
        Ok((
            pose,
            InferenceTrace {
                stages,
                elapsed: start.elapsed(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, Translation};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_point_at_unit_distance() {
        let c = ProjectiveCentre::new(325.3, 242.0);
        let p = assemble_pose(Rotation::identity(), &c, 1.0, &k()).unwrap();
        assert_eq!(p.translation.vector().as_slice(), &[0.0, 0.0, 1.0]);
        assert!(matches!(
            assemble_pose(Rotation::identity(), &c, 0.0, &k()),
            Err(RegressionError::Geometry(GeometryError::InvalidDistance(_)))
        ));
    }

    #[test]
    fn targets_invert() {
        let pose = Pose::new(random_rotation(4), Translation::new(0.05, -0.1, 0.9).unwrap());
        let c = head_target(HeadKind::Centre, &pose, &k(), 0.9);
        let d = head_target(HeadKind::Distance, &pose, &k(), 0.9);
        let r = head_target(HeadKind::Rotation, &pose, &k(), 0.9);
        let back = assemble_pose(
            gram_schmidt_6d(&Rotation6D(r.try_into().unwrap())).unwrap(),
            &centre_from_target([c[0], c[1]], &k()),
            d[0] * 0.9,
            &k(),
        )
        .unwrap();
        assert!((back.translation.vector() - pose.translation.vector()).norm() < 1e-9);
        assert!((back.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-9);
    }

    #[test]
    fn bundle_round_trip_and_hash_check() {
        let mk = |head| {
            Mlp::new(
                MlpConfig {
                    head,
                    latent_dim: 4,
                    num_classes: 2,
                    use_labels: true,
                },
                head.tag(),
            )
        };
        let b = HeadBundle::new(
            mk(HeadKind::Rotation),
            mk(HeadKind::Centre),
            mk(HeadKind::Distance),
            0.95,
            "ab".repeat(32),
        );
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("heads.json");
        b.save(&p).unwrap();
        let back = HeadBundle::load(&p).unwrap();
        assert_eq!(back, b);
        assert!(back.check_compatible(&"ab".repeat(32)).is_ok());
        assert!(matches!(back.check_compatible("cd"), Err(RegressionError::Data(_))));
        let input = HeadInput {
            mu: vec![0.1, -0.2, 0.3, 0.0],
            label: ClassLabel::new(1, 2).unwrap(),
            bbox: BoundingBox::new(100.0, 120.0, 60.0, 50.0).unwrap(),
            intrinsics: k(),
        };
        let r = back.predict_rotation(&input).unwrap();
        let (o, d) = r.invariant_errors();
        assert!(o < 1e-9 && d < 1e-9);
        assert!(back.predict_distance(&input).unwrap() >= MIN_DISTANCE);
    }
}
