//! Z-buffered flat-shaded triangle rasteriser for the synthetic generator.

use image::{Rgb, RgbImage};
use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose};

/// Id-buffer value for pixels showing background clutter.
pub const BACKGROUND_ID: u16 = 0;
/// Id-buffer value for pixels covered by an occluder.
pub const OCCLUDER_ID: u16 = u16::MAX;

const NEAR_PLANE: f64 = 1e-2;
const EDGE_EPS: f64 = 1e-9;

/// Triangle mesh with one colour per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<[f32; 3]>,
}

impl Mesh {
    /// Adds a planar convex polygon as a triangle fan.
    pub fn push_polygon(&mut self, corners: &[Vector3<f64>], color: [f32; 3]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(corners);
        for i in 1..corners.len() - 1 {
            self.triangles.push([base, base + i, base + i + 1]);
            self.colors.push(color);
        }
    }

    pub fn empty() -> Self {
        Self {
            vertices: vec![],
            triangles: vec![],
            colors: vec![],
        }
    }
}

/// Colour, depth and instance-id buffers.
#[derive(Debug, Clone)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f64>,
    pub ids: Vec<u16>,
}

impl Framebuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            color: vec![[0.0; 3]; width * height],
            depth: vec![f64::INFINITY; width * height],
            ids: vec![BACKGROUND_ID; width * height],
        }
    }

    /// Draws `mesh` transformed by `pose`. Pixel centres sit at integer
    /// coordinates.
    pub fn draw(&mut self, mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics, id: u16) {
        let light = Vector3::new(-0.3, -0.5, -1.0).normalize();
        let cam: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| pose.transform(v)).collect();
        for (tri, color) in mesh.triangles.iter().zip(&mesh.colors) {
            let p = [cam[tri[0]], cam[tri[1]], cam[tri[2]]];
            if p.iter().any(|v| v.z <= NEAR_PLANE) {
                continue;
            }
            let normal = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let n = normal.norm();
            if n == 0.0 {
                continue;
            }
            let shade = (0.35 + 0.65 * (normal / n).dot(&light).abs()) as f32;
            let shaded = [color[0] * shade, color[1] * shade, color[2] * shade];
            let s: Vec<(f64, f64)> = p
                .iter()
                .map(|v| (k.fx * v.x / v.z + k.px, k.fy * v.y / v.z + k.py))
                .collect();
            self.fill_triangle(&s, [p[0].z, p[1].z, p[2].z], shaded, id);
        }
    }

    fn fill_triangle(&mut self, s: &[(f64, f64)], z: [f64; 3], color: [f32; 3], id: u16) {
        let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[1].1 - s[0].1) * (s[2].0 - s[0].0);
        if area.abs() < 1e-12 {
            return;
        }
        let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_x = s
            .iter()
            .map(|p| p.0)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor()
            .min(self.width as f64 - 1.0);
        let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_y = s
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor()
            .min(self.height as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            return;
        }
        let inv_z = [1.0 / z[0], 1.0 / z[1], 1.0 / z[2]];
        for y in min_y as usize..=max_y as usize {
            let py = y as f64;
            for x in min_x as usize..=max_x as usize {
                let px = x as f64;
                let w0 = ((s[2].0 - s[1].0) * (py - s[1].1) - (s[2].1 - s[1].1) * (px - s[1].0)) / area;
                let w1 = ((s[0].0 - s[2].0) * (py - s[2].1) - (s[0].1 - s[2].1) * (px - s[2].0)) / area;
                let w2 = 1.0 - w0 - w1;
                // Small tolerance keeps pixels on shared edges from being lost
                // to round-off.
                if w0 < -EDGE_EPS || w1 < -EDGE_EPS || w2 < -EDGE_EPS {
                    continue;
                }
                let depth = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let i = y * self.width + x;
                if depth < self.depth[i] {
                    self.depth[i] = depth;
                    self.color[i] = color;
                    self.ids[i] = id;
                }
            }
        }
    }

    /// Number of pixels whose id equals `id`.
    pub fn count(&self, id: u16) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }

    /// Tight pixel box `[x, y, w, h]` around pixels with `id`.
    pub fn bbox_of(&self, id: u16) -> Option<[f64; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.ids[y * self.width + x] == id {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| {
            [
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            ]
        })
    }

    pub fn to_image(&self) -> RgbImage {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.color[y as usize * self.width + x as usize];
            Rgb([q(c[0]), q(c[1]), q(c[2])])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, Translation};

    #[test]
    fn square_covers_expected_pixels() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let mut mesh = Mesh::empty();
        let h = 0.1;
        mesh.push_polygon(
            &[
                Vector3::new(-h, -h, 0.0),
                Vector3::new(h, -h, 0.0),
                Vector3::new(h, h, 0.0),
                Vector3::new(-h, h, 0.0),
            ],
            [1.0, 0.0, 0.0],
        );
        let pose = Pose::new(Rotation::identity(), Translation::new(0.0, 0.0, 1.0).unwrap());
        let mut fb = Framebuffer::new(100, 100);
        fb.draw(&mesh, &pose, &k, 3);
        // Square spans pixels 40..=60 in both axes.
        assert_eq!(fb.count(3), 21 * 21);
        assert_eq!(fb.bbox_of(3), Some([40.0, 40.0, 21.0, 21.0]));
    }

    #[test]
    fn nearer_surface_wins() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let quad = |s: f64| {
            let mut m = Mesh::empty();
            m.push_polygon(
                &[
                    Vector3::new(-s, -s, 0.0),
                    Vector3::new(s, -s, 0.0),
                    Vector3::new(s, s, 0.0),
                    Vector3::new(-s, s, 0.0),
                ],
                [0.5, 0.5, 0.5],
            );
            m
        };
        let mut fb = Framebuffer::new(100, 100);
        let far = Pose::new(Rotation::identity(), Translation::new(0.0, 0.0, 2.0).unwrap());
        let near = Pose::new(Rotation::identity(), Translation::new(0.0, 0.0, 1.0).unwrap());
        fb.draw(&quad(0.1), &near, &k, 2);
        fb.draw(&quad(0.4), &far, &k, 1);
        assert_eq!(fb.ids[50 * 100 + 50], 2);
        assert_eq!(fb.ids[50 * 100 + 32], 1);
    }
}
