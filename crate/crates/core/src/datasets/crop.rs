use image::RgbImage;

use super::{BoundingBox, DatasetError};
use crate::nn::Tensor;

/// Side length of network input crops.
pub const CROP_SIZE: usize = 128;

/// Square around a box: centred on the box, side equal to its longer edge.
/// Returns `(x0, y0, side)` in pixel-edge coordinates.
pub fn crop_square(bbox: &BoundingBox) -> (f64, f64, f64) {
    let side = bbox.w.max(bbox.h);
    let (cx, cy) = bbox.centre();
    (cx - side / 2.0, cy - side / 2.0, side)
}

/// Keys cubic convolution kernel with `a = -0.75`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source taps and weights for each output coordinate along one axis.
fn taps(origin: f64, side: f64, out: usize) -> Vec<([isize; 4], [f64; 4])> {
    let scale = side / out as f64;
    (0..out)
        .map(|d| {
            let src = origin + (d as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let i = base as isize;
            (
                [i - 1, i, i + 1, i + 2],
                [cubic(t + 1.0), cubic(t), cubic(1.0 - t), cubic(2.0 - t)],
            )
        })
        .collect()
}

/// Square crop of an arbitrary `channels`-plane image given by `sample`
/// (returns the value at `(channel, x, y)` for in-bounds pixels), resized to
/// `CROP_SIZE²` by bicubic interpolation. Out-of-image pixels read as zero.
pub fn crop_with(
    width: usize,
    height: usize,
    channels: usize,
    bbox: &BoundingBox,
    sample: impl Fn(usize, usize, usize) -> f32,
) -> Result<Vec<f32>, DatasetError> {
    let (x0, y0, side) = crop_square(bbox);
    if x0 + side <= 0.0 || y0 + side <= 0.0 || x0 >= width as f64 || y0 >= height as f64 {
        return Err(DatasetError::EmptyCrop);
    }
    let xt = taps(x0, side, CROP_SIZE);
    let yt = taps(y0, side, CROP_SIZE);
    let plane = CROP_SIZE * CROP_SIZE;
    let mut out = vec![0.0f32; channels * plane];
    // Horizontal pass per needed source row is cached per output row.
    let mut row_buf = vec![0.0f64; CROP_SIZE];
    for c in 0..channels {
        for (oy, (ys, wy)) in yt.iter().enumerate() {
            row_buf.fill(0.0);
            for (&iy, &wyv) in ys.iter().zip(wy) {
                if wyv == 0.0 || iy < 0 || iy >= height as isize {
                    continue;
                }
                for (ox, (xs, wx)) in xt.iter().enumerate() {
                    let mut acc = 0.0;
                    for (&ix, &wxv) in xs.iter().zip(wx) {
                        if wxv == 0.0 || ix < 0 || ix >= width as isize {
                            continue;
                        }
                        acc += wxv * sample(c, ix as usize, iy as usize) as f64;
                    }
                    row_buf[ox] += wyv * acc;
                }
            }
            let dst = &mut out[c * plane + oy * CROP_SIZE..c * plane + (oy + 1) * CROP_SIZE];
            for (d, &v) in dst.iter_mut().zip(&row_buf) {
                *d = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Crops the square around `bbox` from an RGB scene and resizes it to a
/// `3×128×128` tensor with values in `[0, 1]`.
pub fn crop_and_resize(image: &RgbImage, bbox: &BoundingBox) -> Result<Tensor<f32>, DatasetError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(DatasetError::EmptyCrop);
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let data = crop_with(w, h, 3, bbox, |c, x, y| raw[(y * w + x) * 3 + c] as f32 / 255.0)?;
    Ok(Tensor::from_vec(3, CROP_SIZE, CROP_SIZE, data).expect("crop shape"))
}
