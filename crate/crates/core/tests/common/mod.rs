//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use posevae::cvae::{CvaeConfig, LabelMode};
use posevae::datasets::ObjectModel;
use posevae::geometry::{CameraIntrinsics, Pose, Rotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn lm_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4114, 573.57043, 325.2611, 242.04899, 640, 480).unwrap()
}

/// Twenty vertices in five orbits of the 4-fold turn about z, with that
/// symmetry group.
pub fn four_fold_model() -> ObjectModel {
    let mut r = rng(77);
    let turns: Vec<Rotation> = (0..4)
        .map(|i| Rotation::about_axis(Vector3::z(), i as f64 * std::f64::consts::FRAC_PI_2))
        .collect();
    let mut vertices = Vec::new();
    for _ in 0..5 {
        let v = Vector3::new(
            r.gen_range(-0.05..0.05),
            r.gen_range(-0.05..0.05),
            r.gen_range(-0.04..0.04),
        );
        for t in &turns {
            vertices.push(t.apply(&v));
        }
    }
    ObjectModel::new(1, vertices, turns).unwrap()
}

fn apply(m: &Matrix3<f64>, t: &Vector3<f64>, x: &Vector3<f64>) -> Vector3<f64> {
    m * x + t
}

/// MSSD by the plain double loop: no early exit, no shared buffers.
pub fn brute_mssd(est: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    let re = est.rotation.matrix();
    let te = est.translation.vector();
    let tg = gt.translation.vector();
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        let rs = gt.rotation.matrix() * s.matrix();
        let mut worst = 0.0f64;
        for x in &model.vertices {
            let d = (apply(re, te, x) - apply(&rs, tg, x)).norm();
            if d > worst {
                worst = d;
            }
        }
        if worst < best {
            best = worst;
        }
    }
    best
}

fn pinhole(k: &CameraIntrinsics, p: &Vector3<f64>) -> (f64, f64) {
    (k.fx * p.x / p.z + k.px, k.fy * p.y / p.z + k.py)
}

pub fn brute_mspd(est: &Pose, gt: &Pose, model: &ObjectModel, k: &CameraIntrinsics) -> f64 {
    let re = est.rotation.matrix();
    let te = est.translation.vector();
    let tg = gt.translation.vector();
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        let rs = gt.rotation.matrix() * s.matrix();
        let mut worst = 0.0f64;
        for x in &model.vertices {
            let (ax, ay) = pinhole(k, &apply(re, te, x));
            let (bx, by) = pinhole(k, &apply(&rs, tg, x));
            let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            if d > worst {
                worst = d;
            }
        }
        if worst < best {
            best = worst;
        }
    }
    best
}

/// Relative error of an analytic derivative against a central difference.
/// Components far below the overall gradient scale are compared against
/// `floor`, under which the difference quotient is rounding noise.
pub fn rel_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Fourth-order central difference of `f` at offset zero. Lets the step
/// stay large enough that rounding in a long loss sum does not dominate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|g| g * g).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Smallest autoencoder worth differentiating: 4-dim latent, two classes.
pub fn toy_cvae_config(seed: u64) -> CvaeConfig {
    CvaeConfig {
        latent_dim: 4,
        num_classes: 2,
        alpha: 0.1,
        base_width: 4,
        blocks: [1, 1, 1, 1],
        decoder_width: 8,
        label_mode: LabelMode::Full,
        seed,
    }
}

/// Train and validation crops (with clean targets) from a small two-object
/// synthetic set.
pub fn two_object_crops(train_images: usize) -> (posevae::datasets::CropSet, posevae::datasets::CropSet) {
    use posevae::datasets::{generate_synthetic_dataset, CropOptions, CropSet, ObjectShape, Split, SyntheticConfig};
    let cfg = SyntheticConfig {
        objects: vec![ObjectShape::SquarePrism, ObjectShape::Wedge],
        train_images,
        test_images: 1,
        clutter: 6,
        model_samples: 20,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg).unwrap();
    let opts = CropOptions {
        jitter: 0.0,
        seed: 0,
        with_clean: true,
    };
    let build = |s| CropSet::build(&ds, &ds.manifest, &ds.manifest.split(s), opts).unwrap();
    (build(Split::Train), build(Split::Val))
}
