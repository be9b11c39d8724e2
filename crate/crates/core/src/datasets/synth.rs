//! Parametric multi-object scene generator.
//!
//! Every scene holds one instance of each configured object, placed in its
//! own vertical strip of the image so objects never overlap each other.
//! Occlusion comes from random planar occluders between the camera and the
//! objects; clutter is painted into the background. Each scene is fully
//! determined by the generator seed and its index, so scenes can be rendered
//! lazily and in parallel.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::model::write_models;
use super::render::{Framebuffer, Mesh, OCCLUDER_ID};
use super::{
    assign_train_val, BoundingBox, DatasetError, DatasetInfo, DatasetManifest, ObjectModel,
    Record, SceneSource, Split, MANIFEST_VERSION,
};
use crate::geometry::{
    backproject_centre, random_rotation_within, CameraIntrinsics, Pose, ProjectiveCentre, Rotation,
    Translation,
};
use crate::parallel;

/// Parametric object shapes. `SquarePrism` has a 4-fold symmetry about its
/// z axis (identical side faces); the others are textured asymmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    SquarePrism,
    Wedge,
    Ell,
    Cuboid,
    Tetra,
}

type Rgb = [f32; 3];

const PALETTE: [Rgb; 12] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.80, 0.15],
    [0.80, 0.30, 0.85],
    [0.15, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.35, 0.15],
    [0.95, 0.95, 0.95],
    [0.45, 0.60, 0.15],
    [0.95, 0.50, 0.65],
    [0.35, 0.35, 0.45],
];

/// Extrudes a planar outline (xy, counter-clockwise) to `±half_z`. Caps are
/// drawn from the given convex pieces of the outline.
fn prism(
    outline: &[(f64, f64)],
    caps: &[&[usize]],
    half_z: f64,
    side_colors: &[Rgb],
    top: Rgb,
    bottom: Rgb,
) -> Mesh {
    let mut mesh = Mesh::empty();
    let n = outline.len();
    let at = |i: usize, z: f64| Vector3::new(outline[i].0, outline[i].1, z);
    for i in 0..n {
        let j = (i + 1) % n;
        mesh.push_polygon(
            &[at(i, -half_z), at(j, -half_z), at(j, half_z), at(i, half_z)],
            side_colors[i % side_colors.len()],
        );
    }
    for piece in caps {
        let up: Vec<_> = piece.iter().map(|&i| at(i, half_z)).collect();
        mesh.push_polygon(&up, top);
        let down: Vec<_> = piece.iter().rev().map(|&i| at(i, -half_z)).collect();
        mesh.push_polygon(&down, bottom);
    }
    mesh
}

impl ObjectShape {
    pub fn mesh(self) -> Mesh {
        let p = PALETTE;
        match self {
            ObjectShape::SquarePrism => {
                let h = 0.025;
                prism(
                    &[(-h, -h), (h, -h), (h, h), (-h, h)],
                    &[&[0, 1, 2, 3]],
                    0.04,
                    &[p[5]],
                    p[3],
                    p[4],
                )
            }
            ObjectShape::Wedge => prism(
                &[(-0.06, -0.03), (0.07, -0.03), (-0.06, 0.05)],
                &[&[0, 1, 2]],
                0.03,
                &[p[0], p[1], p[2]],
                p[3],
                p[7],
            ),
            ObjectShape::Ell => prism(
                &[
                    (-0.06, -0.05),
                    (0.09, -0.05),
                    (0.09, -0.01),
                    (-0.02, -0.01),
                    (-0.02, 0.08),
                    (-0.06, 0.08),
                ],
                &[&[0, 1, 2, 3], &[0, 3, 4, 5]],
                0.025,
                &[p[6], p[2], p[9], p[10], p[0], p[11]],
                p[8],
                p[1],
            ),
            ObjectShape::Cuboid => {
                let (a, b, c) = (0.04, 0.025, 0.015);
                let mut m = Mesh::empty();
                let v = |x: f64, y: f64, z: f64| Vector3::new(x * a, y * b, z * c);
                let faces: [([Vector3<f64>; 4], Rgb); 6] = [
                    ([v(1., -1., -1.), v(1., 1., -1.), v(1., 1., 1.), v(1., -1., 1.)], p[0]),
                    ([v(-1., -1., -1.), v(-1., -1., 1.), v(-1., 1., 1.), v(-1., 1., -1.)], p[1]),
                    ([v(-1., 1., -1.), v(-1., 1., 1.), v(1., 1., 1.), v(1., 1., -1.)], p[2]),
                    ([v(-1., -1., -1.), v(1., -1., -1.), v(1., -1., 1.), v(-1., -1., 1.)], p[3]),
                    ([v(-1., -1., 1.), v(1., -1., 1.), v(1., 1., 1.), v(-1., 1., 1.)], p[4]),
                    ([v(-1., -1., -1.), v(-1., 1., -1.), v(1., 1., -1.), v(1., -1., -1.)], p[6]),
                ];
                for (corners, color) in faces {
                    m.push_polygon(&corners, color);
                }
                m
            }
            ObjectShape::Tetra => {
                let a = Vector3::new(0.05, 0.0, -0.02);
                let b = Vector3::new(-0.03, 0.05, -0.02);
                let c = Vector3::new(-0.03, -0.04, -0.02);
                let d = Vector3::new(0.0, 0.0, 0.07);
                let mut m = Mesh::empty();
                m.push_polygon(&[a, c, b], p[2]);
                m.push_polygon(&[a, b, d], p[0]);
                m.push_polygon(&[b, c, d], p[3]);
                m.push_polygon(&[c, a, d], p[9]);
                m
            }
        }
    }

    pub fn symmetries(self) -> Vec<Rotation> {
        match self {
            ObjectShape::SquarePrism => (0..4)
                .map(|k| Rotation::about_axis(Vector3::z(), k as f64 * std::f64::consts::FRAC_PI_2))
                .collect(),
            _ => vec![Rotation::identity()],
        }
    }

    /// The mesh with every vertex multiplied by `scale`.
    pub fn scaled_mesh(self, scale: f64) -> Mesh {
        let mut m = self.mesh();
        for v in &mut m.vertices {
            *v *= scale;
        }
        m
    }

    /// Scoring model: mesh vertices plus area-weighted surface samples.
    pub fn model(self, object_id: u32, surface_samples: usize) -> ObjectModel {
        self.scaled_model(object_id, surface_samples, 1.0)
    }

    pub fn scaled_model(self, object_id: u32, surface_samples: usize, scale: f64) -> ObjectModel {
        let mesh = self.scaled_mesh(scale);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ object_id as u64);
        let areas: Vec<f64> = mesh
            .triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
                (b - a).cross(&(c - a)).norm() / 2.0
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let mut vertices = mesh.vertices.clone();
        for _ in 0..surface_samples {
            let mut pick = rng.gen::<f64>() * total;
            let mut ti = 0;
            while ti + 1 < areas.len() && pick > areas[ti] {
                pick -= areas[ti];
                ti += 1;
            }
            let t = mesh.triangles[ti];
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
            vertices.push(a + (b - a) * u + (c - a) * v);
        }
        ObjectModel::new(object_id, vertices, self.symmetries()).expect("non-degenerate shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub objects: Vec<ObjectShape>,
    /// Scenes (hence instances per object) for the train/val pool.
    pub train_images: usize,
    pub test_images: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    /// Largest rotation angle from the canonical orientation, degrees;
    /// 180 samples the full rotation group.
    pub max_rotation_deg: f64,
    /// Per-object size factors (empty means all 1). An object's distance
    /// range is scaled by the same factor, so a scaled copy of a shape
    /// produces the same crops as the original.
    pub object_scales: Vec<f64>,
    /// Range of the object distance `Tz`, metres.
    pub distance_range: [f64; 2],
    /// Mean number of occluders per object instance (Poisson).
    pub occluder_density: f64,
    /// Number of random background shapes.
    pub clutter: usize,
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
    /// Surface samples added to each scoring model.
    pub model_samples: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: vec![ObjectShape::SquarePrism, ObjectShape::Wedge, ObjectShape::Ell],
            train_images: 2000,
            test_images: 200,
            width: 640,
            height: 480,
            fx: 572.4114,
            fy: 573.57043,
            px: 325.2611,
            py: 242.04899,
            max_rotation_deg: 180.0,
            object_scales: vec![],
            distance_range: [0.7, 1.2],
            occluder_density: 1.0,
            clutter: 30,
            noise: 0.06,
            model_samples: 400,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.objects.len() < 2 {
            return bad(format!("need at least 2 objects, got {}", self.objects.len()));
        }
        if self.train_images == 0 || self.test_images == 0 {
            return bad("image counts must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        let [z0, z1] = self.distance_range;
        if !(z0 > 0.3 && z1 >= z0) {
            return bad(format!("distance range {z0}..{z1} must satisfy 0.3 < min <= max"));
        }
        if !(self.max_rotation_deg > 0.0 && self.max_rotation_deg <= 180.0) {
            return bad(format!(
                "max_rotation_deg must lie in (0, 180], got {}",
                self.max_rotation_deg
            ));
        }
        if !self.object_scales.is_empty() && self.object_scales.len() != self.objects.len() {
            return bad(format!(
                "object_scales has {} entries for {} objects",
                self.object_scales.len(),
                self.objects.len()
            ));
        }
        if self.object_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("object scales must be positive".into());
        }
        if !(self.occluder_density >= 0.0) || !(self.noise >= 0.0) {
            return bad("occluder density and noise must be nonnegative".into());
        }
        self.intrinsics()?;
        Ok(())
    }

    pub fn scale(&self, object_index: usize) -> f64 {
        self.object_scales.get(object_index).copied().unwrap_or(1.0)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, DatasetError> {
        Ok(CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.px,
            self.py,
            self.width,
            self.height,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub object_index: usize,
    pub pose: Pose,
}

/// Planar quad at a fixed depth, corners relative to `(0, 0, depth)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub corners: [Vector3<f64>; 4],
    pub depth: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene_id: u32,
    pub image_id: u32,
    pub placements: Vec<Placement>,
    pub occluders: Vec<Occluder>,
    pub background: Rgb,
    pub clutter_seed: u64,
}

/// A rendered scene: the composite image, its id buffer, and one clean
/// render (object alone on black) per placement.
pub struct SceneRender {
    pub image: RgbImage,
    pub frame: Framebuffer,
    pub clean: Vec<Framebuffer>,
}

pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub manifest: DatasetManifest,
    pub models: Vec<ObjectModel>,
    pub meshes: Vec<Mesh>,
    pub intrinsics: CameraIntrinsics,
    scenes: Vec<SceneSpec>,
    index: HashMap<(u32, u32), usize>,
}

pub const TRAIN_SCENE_ID: u32 = 1;
pub const TEST_SCENE_ID: u32 = 2;

fn scene_seed(seed: u64, scene_id: u32, image_id: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((scene_id as u64) << 40)
        ^ (image_id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn silhouette_extent(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> Option<[f64; 4]> {
    let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for v in &mesh.vertices {
        let p = k.project(&pose.transform(v)).ok()?;
        ext[0] = ext[0].min(p.x);
        ext[1] = ext[1].min(p.y);
        ext[2] = ext[2].max(p.x);
        ext[3] = ext[3].max(p.y);
    }
    Some(ext)
}

impl SyntheticDataset {
    pub fn scenes(&self) -> &[SceneSpec] {
        &self.scenes
    }

    pub fn scene(&self, scene_id: u32, image_id: u32) -> Option<&SceneSpec> {
        self.index.get(&(scene_id, image_id)).map(|&i| &self.scenes[i])
    }

    fn plan_scene(&self, scene_id: u32, image_id: u32) -> SceneSpec {
        let cfg = &self.config;
        let k = &self.intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, scene_id, image_id));
        let n = cfg.objects.len();
        let mut columns: Vec<usize> = (0..n).collect();
        columns.shuffle(&mut rng);
        let col_w = cfg.width as f64 / n as f64;
        let mut placements = Vec::with_capacity(n);
        for (object_index, &col) in columns.iter().enumerate() {
            let mesh = &self.meshes[object_index];
            let (left, right) = (col as f64 * col_w, (col + 1) as f64 * col_w);
            let mut chosen = None;
            for attempt in 0..64 {
                let rotation =
                    random_rotation_within(&mut rng, cfg.max_rotation_deg.to_radians());
                let [z0, z1] = cfg.distance_range.map(|z| z * cfg.scale(object_index));
                let tz = if attempt < 48 { rng.gen_range(z0..=z1) } else { z1 };
                let cx = rng.gen_range(left..right);
                let cy = rng.gen_range(0.25 * cfg.height as f64..0.75 * cfg.height as f64);
                let t = backproject_centre(&ProjectiveCentre::new(cx, cy), tz, k)
                    .expect("positive distance");
                let pose = Pose::new(rotation, t);
                if let Some(ext) = silhouette_extent(mesh, &pose, k) {
                    if ext[0] >= left && ext[2] < right {
                        chosen = Some((pose, ext));
                        break;
                    }
                }
                if attempt == 63 {
                    chosen = silhouette_extent(mesh, &pose, k).map(|e| (pose, e));
                }
            }
            let (pose, ext) = chosen.expect("object in front of the camera");
            placements.push((Placement { object_index, pose }, ext));
        }

        let mut occluders = Vec::new();
        if cfg.occluder_density > 0.0 {
            let poisson = Poisson::new(cfg.occluder_density).expect("positive rate");
            for (p, ext) in &placements {
                let count = poisson.sample(&mut rng) as usize;
                let (hw, hh) = ((ext[2] - ext[0]) / 2.0, (ext[3] - ext[1]) / 2.0);
                let c = ProjectiveCentre::of_translation(&p.pose.translation, k);
                for _ in 0..count {
                    let depth = rng.gen_range(0.35..(p.pose.translation.z() - 0.1).max(0.36));
                    let u = c.cx + rng.gen_range(-0.8..0.8) * hw;
                    let v = c.cy + rng.gen_range(-0.8..0.8) * hh;
                    let sx = rng.gen_range(0.25..0.8) * hw;
                    let sy = rng.gen_range(0.25..0.8) * hh;
                    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                    let (s, co) = theta.sin_cos();
                    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(
                        |(a, b): (f64, f64)| {
                            let du = a * sx * co - b * sy * s;
                            let dv = a * sx * s + b * sy * co;
                            Vector3::new(
                                (u + du - k.px) * depth / k.fx,
                                (v + dv - k.py) * depth / k.fy,
                                0.0,
                            )
                        },
                    );
                    occluders.push(Occluder {
                        corners,
                        depth,
                        color: [rng.gen(), rng.gen(), rng.gen()],
                    });
                }
            }
        }
        SceneSpec {
            scene_id,
            image_id,
            placements: placements.into_iter().map(|(p, _)| p).collect(),
            occluders,
            background: [
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.1..0.6),
            ],
            clutter_seed: rng.gen(),
        }
    }

    fn paint_background(&self, fb: &mut Framebuffer, spec: &SceneSpec) {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.clutter_seed);
        fb.color.fill(spec.background);
        let (w, h) = (fb.width as f64, fb.height as f64);
        for _ in 0..cfg.clutter {
            let color: Rgb = [rng.gen(), rng.gen(), rng.gen()];
            let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let (rx, ry) = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
            let ellipse = rng.gen_bool(0.5);
            let x0 = (cx - rx).max(0.0) as usize;
            let x1 = ((cx + rx).min(w - 1.0)) as usize;
            let y0 = (cy - ry).max(0.0) as usize;
            let y1 = ((cy + ry).min(h - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                    if !ellipse || dx * dx + dy * dy <= 1.0 {
                        fb.color[y * fb.width + x] = color;
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            let a = cfg.noise as f32;
            for c in fb.color.iter_mut() {
                for v in c.iter_mut() {
                    *v += rng.gen_range(-a..a);
                }
            }
        }
    }

    fn occluder_mesh(o: &Occluder) -> (Mesh, Pose) {
        let mut m = Mesh::empty();
        m.push_polygon(&o.corners, o.color);
        let pose = Pose::new(
            Rotation::identity(),
            Translation::new(0.0, 0.0, o.depth).expect("positive depth"),
        );
        (m, pose)
    }

    /// Renders only what is needed for masks (no clutter, no clean images).
    fn render_masks(&self, spec: &SceneSpec) -> (Framebuffer, Vec<Framebuffer>) {
        let (w, h) = (self.config.width as usize, self.config.height as usize);
        let mut frame = Framebuffer::new(w, h);
        let mut alone = Vec::with_capacity(spec.placements.len());
        for p in &spec.placements {
            let id = p.object_index as u16 + 1;
            frame.draw(&self.meshes[p.object_index], &p.pose, &self.intrinsics, id);
            let mut fb = Framebuffer::new(w, h);
            fb.draw(&self.meshes[p.object_index], &p.pose, &self.intrinsics, id);
            alone.push(fb);
        }
        for o in &spec.occluders {
            let (m, pose) = Self::occluder_mesh(o);
            frame.draw(&m, &pose, &self.intrinsics, OCCLUDER_ID);
        }
        (frame, alone)
    }

    pub fn render(&self, spec: &SceneSpec) -> SceneRender {
        let (mut frame, clean) = self.render_masks(spec);
        self.paint_background_under(&mut frame, spec);
        SceneRender {
            image: frame.to_image(),
            frame,
            clean,
        }
    }

    /// Paints clutter into pixels not covered by any surface.
    fn paint_background_under(&self, frame: &mut Framebuffer, spec: &SceneSpec) {
        let mut bg = Framebuffer::new(frame.width, frame.height);
        self.paint_background(&mut bg, spec);
        for i in 0..frame.color.len() {
            if frame.depth[i].is_infinite() {
                frame.color[i] = bg.color[i];
            }
        }
    }

    fn records_for(&self, spec: &SceneSpec, split: Split) -> Vec<Record> {
        let (frame, alone) = self.render_masks(spec);
        let folder = if split == Split::Test { "test" } else { "train" };
        spec.placements
            .iter()
            .zip(&alone)
            .map(|(p, fb)| {
                let id = p.object_index as u16 + 1;
                let object_id = self.manifest.info.object_ids[p.object_index];
                let full = fb.count(id);
                let visible = frame.count(id);
                let bbox_obj = fb.bbox_of(id).unwrap_or([0.0, 0.0, 1.0, 1.0]);
                let bbox = frame.bbox_of(id).unwrap_or(bbox_obj);
                let to_box = |b: [f64; 4]| BoundingBox::new(b[0], b[1], b[2], b[3]).expect("nonempty");
                Record {
                    scene_id: spec.scene_id,
                    image_id: spec.image_id,
                    object_id,
                    bbox: to_box(bbox),
                    bbox_obj: to_box(bbox_obj),
                    gt_pose: p.pose,
                    visibility: if full == 0 { 0.0 } else { visible as f64 / full as f64 },
                    intrinsics: self.intrinsics,
                    image: format!("images/{folder}/{:06}.png", spec.image_id),
                    clean: Some(format!(
                        "clean/{folder}/{:06}_{:06}.png",
                        spec.image_id, object_id
                    )),
                    split,
                }
            })
            .collect()
    }

    /// Writes manifest, models, scene images and clean renders under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        self.manifest.write(dir)?;
        let faces: Vec<Vec<[usize; 3]>> = self.meshes.iter().map(|m| m.triangles.clone()).collect();
        write_models(&dir.join("models"), &self.models, &faces)?;
        for folder in ["images/train", "images/test", "clean/train", "clean/test"] {
            let p = dir.join(folder);
            fs::create_dir_all(&p).map_err(|e| DatasetError::io(&p, e))?;
        }
        let by_scene: HashMap<(u32, u32), Vec<&Record>> =
            self.manifest.records.iter().fold(HashMap::new(), |mut m, r| {
                m.entry(r.image_key()).or_default().push(r);
                m
            });
        let results = parallel::map_slice(&self.scenes, |spec| -> Result<(), DatasetError> {
            let render = self.render(spec);
            let records = &by_scene[&(spec.scene_id, spec.image_id)];
            let save = |img: &RgbImage, rel: &str| {
                let path = dir.join(rel);
                img.save(&path).map_err(|e| DatasetError::Image {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                })
            };
            save(&render.image, &records[0].image)?;
            for (r, fb) in records.iter().zip(&render.clean) {
                if let Some(clean) = &r.clean {
                    save(&fb.to_image(), clean)?;
                }
            }
            Ok(())
        });
        results.into_iter().collect()
    }
}

impl SceneSource for SyntheticDataset {
    fn scene_image(&self, record: &Record) -> Result<RgbImage, DatasetError> {
        let spec = self.scene(record.scene_id, record.image_id).ok_or_else(|| {
            DatasetError::Data(format!(
                "no synthetic scene {}/{}",
                record.scene_id, record.image_id
            ))
        })?;
        Ok(self.render(spec).image)
    }

    fn clean_image(&self, record: &Record) -> Result<Option<RgbImage>, DatasetError> {
        let Some(spec) = self.scene(record.scene_id, record.image_id) else {
            return Ok(None);
        };
        let Some(p) = spec
            .placements
            .iter()
            .find(|p| self.manifest.info.object_ids[p.object_index] == record.object_id)
        else {
            return Ok(None);
        };
        let mut fb = Framebuffer::new(self.config.width as usize, self.config.height as usize);
        fb.draw(
            &self.meshes[p.object_index],
            &p.pose,
            &self.intrinsics,
            p.object_index as u16 + 1,
        );
        Ok(Some(fb.to_image()))
    }

    fn scene_with_clean(
        &self,
        records: &[&Record],
    ) -> Result<(RgbImage, Vec<Option<RgbImage>>), DatasetError> {
        let first = records
            .first()
            .ok_or_else(|| DatasetError::Data("empty record group".into()))?;
        let spec = self
            .scene(first.scene_id, first.image_id)
            .ok_or_else(|| DatasetError::Data("unknown synthetic scene".into()))?;
        let render = self.render(spec);
        let clean = records
            .iter()
            .map(|r| {
                spec.placements
                    .iter()
                    .position(|p| self.manifest.info.object_ids[p.object_index] == r.object_id)
                    .map(|i| render.clean[i].to_image())
            })
            .collect();
        Ok((render.image, clean))
    }
}

/// Plans every scene, computes masks, visibilities and boxes, and returns the
/// manifest (train/val/test) with the scoring models.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset, DatasetError> {
    config.validate()?;
    let intrinsics = config.intrinsics()?;
    let object_ids: Vec<u32> = (1..=config.objects.len() as u32).collect();
    let meshes: Vec<Mesh> = config
        .objects
        .iter()
        .enumerate()
        .map(|(i, s)| s.scaled_mesh(config.scale(i)))
        .collect();
    let models = config
        .objects
        .iter()
        .zip(&object_ids)
        .enumerate()
        .map(|(i, (s, &id))| s.scaled_model(id, config.model_samples, config.scale(i)))
        .collect();
    let mut ds = SyntheticDataset {
        config: config.clone(),
        manifest: DatasetManifest {
            info: DatasetInfo {
                version: MANIFEST_VERSION,
                source: "synthetic".into(),
                object_ids,
            },
            records: vec![],
        },
        models,
        meshes,
        intrinsics,
        scenes: vec![],
        index: HashMap::new(),
    };
    let mut keys: Vec<(u32, u32)> = (0..config.train_images as u32)
        .map(|i| (TRAIN_SCENE_ID, i))
        .collect();
    keys.extend((0..config.test_images as u32).map(|i| (TEST_SCENE_ID, i)));
    ds.scenes = parallel::map_slice(&keys, |&(s, i)| ds.plan_scene(s, i));
    ds.index = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    let per_scene = parallel::map_slice(&ds.scenes, |spec| {
        let split = if spec.scene_id == TEST_SCENE_ID {
            Split::Test
        } else {
            Split::Train
        };
        ds.records_for(spec, split)
    });
    let mut records: Vec<Record> = per_scene.into_iter().flatten().collect();
    let n_pool = records.iter().filter(|r| r.split != Split::Test).count();
    assign_train_val(&mut records[..n_pool], config.seed);
    ds.manifest.records = records;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(occluders: f64) -> SyntheticConfig {
        SyntheticConfig {
            train_images: 6,
            test_images: 3,
            occluder_density: occluders,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(1.0);
        c.objects.truncate(1);
        assert!(matches!(generate_synthetic_dataset(&c), Err(DatasetError::Config(_))));
        let mut c = small(1.0);
        c.train_images = 0;
        assert!(matches!(generate_synthetic_dataset(&c), Err(DatasetError::Config(_))));
    }

    #[test]
    fn deterministic_manifest() {
        let a = generate_synthetic_dataset(&small(1.0)).unwrap();
        let b = generate_synthetic_dataset(&small(1.0)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.manifest.write(da.path()).unwrap();
        b.manifest.write(db.path()).unwrap();
        for f in ["dataset.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
            assert_eq!(
                fs::read(da.path().join(f)).unwrap(),
                fs::read(db.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn no_occluders_means_full_visibility() {
        let ds = generate_synthetic_dataset(&small(0.0)).unwrap();
        assert!(ds.manifest.records.iter().all(|r| r.visibility == 1.0));
    }

    #[test]
    fn histogram_matches_config() {
        let ds = generate_synthetic_dataset(&small(1.0)).unwrap();
        let h = ds.manifest.histogram();
        assert_eq!(h.len(), 3);
        assert!(h.values().all(|&n| n == 9));
        assert_eq!(ds.manifest.split(Split::Test).len(), 9);
        let pool = ds.manifest.split(Split::Train).len() + ds.manifest.split(Split::Val).len();
        assert_eq!(pool, 18);
        assert_eq!(ds.manifest.split(Split::Train).len(), 16);
    }

    #[test]
    fn visible_box_holds_visible_pixels_and_clean_is_occluder_free() {
        let ds = generate_synthetic_dataset(&small(2.0)).unwrap();
        for spec in ds.scenes().iter().take(4) {
            let render = ds.render(spec);
            for (p, clean) in spec.placements.iter().zip(&render.clean) {
                let id = p.object_index as u16 + 1;
                let object_id = ds.manifest.info.object_ids[p.object_index];
                let r = ds
                    .manifest
                    .records
                    .iter()
                    .find(|r| r.image_key() == (spec.scene_id, spec.image_id) && r.object_id == object_id)
                    .unwrap();
                let (x0, y0, side) = super::super::crop_square(&r.bbox);
                let mut inside = 0usize;
                for y in 0..render.frame.height {
                    for x in 0..render.frame.width {
                        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                        if render.frame.ids[y * render.frame.width + x] == id
                            && fx >= x0
                            && fx < x0 + side
                            && fy >= y0
                            && fy < y0 + side
                        {
                            inside += 1;
                        }
                    }
                }
                let full = clean.count(id) as f64;
                assert!(inside as f64 >= r.visibility * full - 1e-9);
                // The clean render has nothing but the object.
                assert!(clean.ids.iter().all(|&v| v == 0 || v == id));
                for (i, c) in clean.color.iter().enumerate() {
                    if clean.ids[i] == 0 {
                        assert_eq!(*c, [0.0; 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_shape_renders_identically_under_symmetry() {
        let k = SyntheticConfig::default().intrinsics().unwrap();
        let mesh = ObjectShape::SquarePrism.mesh();
        let syms = ObjectShape::SquarePrism.symmetries();
        let r = crate::geometry::random_rotation(4);
        let t = Translation::new(0.01, -0.02, 0.8).unwrap();
        let mut a = Framebuffer::new(640, 480);
        a.draw(&mesh, &Pose::new(r, t), &k, 1);
        let mut b = Framebuffer::new(640, 480);
        b.draw(&mesh, &Pose::new(r.compose(&syms[1]), t), &k, 1);
        let diff = a.ids.iter().zip(&b.ids).filter(|(x, y)| x != y).count();
        assert!(diff < 20, "{diff} silhouette pixels differ");
    }

    #[test]
    fn scaled_copy_projects_like_original() {
        let k = SyntheticConfig::default().intrinsics().unwrap();
        let r = crate::geometry::random_rotation(7);
        let t = Translation::new(0.02, 0.01, 0.75).unwrap();
        let t2 = Translation::from_vector(t.vector() * 1.6).unwrap();
        let mut a = Framebuffer::new(640, 480);
        a.draw(&ObjectShape::Wedge.mesh(), &Pose::new(r, t), &k, 1);
        let mut b = Framebuffer::new(640, 480);
        b.draw(&ObjectShape::Wedge.scaled_mesh(1.6), &Pose::new(r, t2), &k, 1);
        let diff = a.ids.iter().zip(&b.ids).filter(|(x, y)| x != y).count();
        assert!(diff < 10, "{diff} pixels differ");
        assert_eq!(a.color, b.color);

        let m = ObjectShape::Wedge.scaled_model(1, 50, 1.6);
        let m1 = ObjectShape::Wedge.model(1, 50);
        assert!((m.diameter / m1.diameter - 1.6).abs() < 1e-9);

        let mut c = small(0.0);
        c.object_scales = vec![1.0, 2.0];
        assert!(matches!(generate_synthetic_dataset(&c), Err(DatasetError::Config(_))));
    }
}
