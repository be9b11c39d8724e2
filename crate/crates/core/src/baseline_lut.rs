//! Lookup-table baseline: copy rotation and distance from the most similar
//! training latent of the same object, and take the box centre as the
//! projective centre.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::cvae::{Cvae, CvaeError};
use crate::datasets::{BoundingBox, CropSet};
use crate::geometry::{
    backproject_centre, CameraIntrinsics, GeometryError, Pose, ProjectiveCentre, Rotation,
};
use crate::parallel;

const MAGIC: &[u8; 4] = b"LUTC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LutError {
    #[error("codebook has no entries for object {0}")]
    MissingClass(u32),
    #[error("data error: {0}")]
    Data(String),
    #[error("latent of {got} entries, codebook uses {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub mu: Vec<f64>,
    pub object_id: u32,
    pub rotation: Rotation,
    pub tz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub latent_dim: usize,
    /// Hash of the encoder the latents came from; empty if unknown.
    pub cvae_hash: String,
    pub entries: Vec<CodebookEntry>,
    norms: Vec<f64>,
}

/// Cosine similarity, taken as 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    cosine_with_norms(a, na, b, nb)
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Result of one lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutMatch {
    pub index: usize,
    pub similarity: f64,
    pub pose: Pose,
}

impl Codebook {
    pub fn new(latent_dim: usize, cvae_hash: String, entries: Vec<CodebookEntry>) -> Result<Self, LutError> {
        if entries.is_empty() {
            return Err(LutError::Data("codebook needs at least one entry".into()));
        }
        for e in &entries {
            if e.mu.len() != latent_dim {
                return Err(LutError::ShapeMismatch {
                    got: e.mu.len(),
                    expected: latent_dim,
                });
            }
            if !(e.tz > 0.0) {
                return Err(LutError::Data(format!("entry distance {} is not positive", e.tz)));
            }
        }
        let norms = entries
            .iter()
            .map(|e| e.mu.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            latent_dim,
            cvae_hash,
            entries,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, object_id: u32) -> usize {
        self.entries.iter().filter(|e| e.object_id == object_id).count()
    }

    /// Index of the most similar entry of `object_id`; the lowest index wins
    /// ties.
    pub fn nearest(&self, mu: &[f64], object_id: u32) -> Result<(usize, f64), LutError> {
        if mu.len() != self.latent_dim {
            return Err(LutError::ShapeMismatch {
                got: mu.len(),
                expected: self.latent_dim,
            });
        }
        let nq = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.object_id != object_id {
                continue;
            }
            let s = cosine_with_norms(mu, nq, &e.mu, self.norms[i]);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.ok_or(LutError::MissingClass(object_id))
    }

    pub fn estimate(
        &self,
        mu: &[f64],
        object_id: u32,
        bbox: &BoundingBox,
        k: &CameraIntrinsics,
    ) -> Result<LutMatch, LutError> {
        let (index, similarity) = self.nearest(mu, object_id)?;
        let e = &self.entries[index];
        let (cx, cy) = bbox.centre();
        let t = backproject_centre(&ProjectiveCentre::new(cx, cy), e.tz, k)?;
        Ok(LutMatch {
            index,
            similarity,
            pose: Pose::new(e.rotation, t),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("in-memory write");
        out.write_u32::<LittleEndian>(self.latent_dim as u32)
            .expect("in-memory write");
        out.write_u64::<LittleEndian>(self.entries.len() as u64)
            .expect("in-memory write");
        out.write_u32::<LittleEndian>(self.cvae_hash.len() as u32)
            .expect("in-memory write");
        out.extend_from_slice(self.cvae_hash.as_bytes());
        for e in &self.entries {
            out.write_u32::<LittleEndian>(e.object_id).expect("in-memory write");
            for &v in e.mu.iter().chain(&e.rotation.to_row_major()).chain([&e.tz]) {
                out.write_f64::<LittleEndian>(v).expect("in-memory write");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), LutError> {
        fs::write(path, self.to_bytes()).map_err(|source| LutError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LutError> {
        let bytes = fs::read(path).map_err(|source| LutError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |msg: &str| LutError::Format {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        let trunc = |_| bad("truncated codebook");
        let mut r = Cursor::new(&bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(bad("not a codebook file"));
        }
        if r.read_u32::<LittleEndian>().map_err(trunc)? != VERSION {
            return Err(bad("unsupported codebook version"));
        }
        let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let hash_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut hash = vec![0u8; hash_len];
        r.read_exact(&mut hash).map_err(trunc)?;
        let hash = String::from_utf8(hash).map_err(|_| bad("encoder hash is not text"))?;
        let record = 4 + 8 * (n + 10);
        if bytes.len() - r.position() as usize != count * record {
            return Err(bad("entry block has the wrong size"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let object_id = r.read_u32::<LittleEndian>().map_err(trunc)?;
            let mut vals = vec![0f64; n + 10];
            r.read_f64_into::<LittleEndian>(&mut vals).map_err(trunc)?;
            let rot: [f64; 9] = vals[n..n + 9].try_into().expect("nine values");
            entries.push(CodebookEntry {
                mu: vals[..n].to_vec(),
                object_id,
                rotation: Rotation::from_row_major(&rot).map_err(|e| bad(&e.to_string()))?,
                tz: vals[n + 9],
            });
        }
        Self::new(n, hash, entries).map_err(|e| bad(&e.to_string()))
    }
}

/// One codebook entry per crop: its encoder mean plus the ground-truth
/// rotation and distance.
pub fn build_codebook(cvae: &Cvae<f32>, crops: &CropSet, cvae_hash: &str) -> Result<Codebook, LutError> {
    if crops.is_empty() {
        return Err(LutError::Data("no training records for the codebook".into()));
    }
    let entries = parallel::map_range(crops.len(), |i| {
        let code = cvae.encode(&crops.image(i), &crops.labels[i])?;
        let r = &crops.records[i];
        Ok(CodebookEntry {
            mu: code.mu,
            object_id: r.object_id,
            rotation: r.gt_pose.rotation,
            tz: r.gt_pose.translation.z(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, LutError>>()?;
    Codebook::new(cvae.config.latent_dim, cvae_hash.to_string(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;

    fn entry(mu: Vec<f64>, object_id: u32, seed: u64) -> CodebookEntry {
        CodebookEntry {
            mu,
            object_id,
            rotation: random_rotation(seed),
            tz: 0.5 + seed as f64 * 0.1,
        }
    }

    #[test]
    fn orthogonal_pair_follows_dot_sign() {
        let cb = Codebook::new(
            2,
            String::new(),
            vec![entry(vec![1.0, 0.0], 1, 1), entry(vec![0.0, 1.0], 1, 2)],
        )
        .unwrap();
        assert_eq!(cb.nearest(&[0.9, 0.1], 1).unwrap().0, 0);
        assert_eq!(cb.nearest(&[0.1, 0.9], 1).unwrap().0, 1);
        assert_eq!(cb.nearest(&[-0.1, 0.9], 1).unwrap().0, 1);
        assert_eq!(cb.nearest(&[1.0, 1.0], 1).unwrap().0, 0, "tie goes to lowest index");
        assert!(matches!(cb.nearest(&[1.0, 0.0], 2), Err(LutError::MissingClass(2))));
    }

    #[test]
    fn exact_match_copies_entry() {
        let cb = Codebook::new(
            3,
            String::new(),
            vec![entry(vec![1.0, 2.0, 3.0], 1, 3), entry(vec![-1.0, 0.5, 0.0], 1, 4)],
        )
        .unwrap();
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let b = BoundingBox::new(300.0, 200.0, 40.0, 80.0).unwrap();
        let m = cb.estimate(&[-2.0, 1.0, 0.0], 1, &b, &k).unwrap();
        assert_eq!(m.index, 1);
        assert_eq!(m.pose.rotation, cb.entries[1].rotation);
        assert_eq!(m.pose.translation.z(), cb.entries[1].tz);
        assert!(m.pose.translation.x().abs() < 1e-12 && m.pose.translation.y().abs() < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let cb = Codebook::new(
            2,
            "ff".repeat(32),
            vec![entry(vec![1.0, 0.0], 1, 1), entry(vec![0.3, -4.0], 2, 2)],
        )
        .unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("lut.bin");
        cb.save(&p).unwrap();
        assert_eq!(Codebook::load(&p).unwrap(), cb);
        let mut bytes = cb.to_bytes();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Codebook::load(&p), Err(LutError::Format { .. })));
    }
}
