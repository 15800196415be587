//! Random scaling, cropping and horizontal flipping applied identically to
//! every map of a sample.

use crate::data::rng::DataRng;
use crate::data::synth::RgbdSample;
use crate::error::Result;
use crate::tensor::Tensor;

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.4);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop inside the scaled image.
    pub offset: (usize, usize),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            flip: false,
            offset: (0, 0),
        }
    }
}

fn scaled(extent: usize, scale: f64) -> usize {
    (extent as f64 * scale).round() as usize
}

/// Draws a scale from [`SCALE_RANGE`], redrawing until the scaled image is
/// at least as large as the `h×w` crop, then a flip and a crop offset.
pub fn sample_params(rng: &mut DataRng, h: usize, w: usize) -> AugmentParams {
    let scale = loop {
        let s = rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1);
        if scaled(h, s) >= h && scaled(w, s) >= w {
            break s;
        }
    };
    let flip = rng.coin();
    let oy = rng.between(0, scaled(h, scale) - h);
    let ox = rng.between(0, scaled(w, scale) - w);
    AugmentParams {
        scale,
        flip,
        offset: (oy, ox),
    }
}

/// Source coordinate (half-pixel centres) of output row/column `o` after
/// the crop offset, in the unscaled image.
fn source(o: usize, offset: usize, scale: f64) -> f64 {
    ((o + offset) as f64 + 0.5) / scale - 0.5
}

fn nearest(coord: f64, extent: usize) -> usize {
    (coord.round().max(0.0) as usize).min(extent - 1)
}

/// Bilinear taps `(index, weight)` along one axis with edge clamping.
fn taps(coord: f64, extent: usize) -> [(usize, f64); 2] {
    let c = coord.clamp(0.0, (extent - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    let f = c - lo as f64;
    [(lo, 1.0 - f), (hi, f)]
}

pub fn apply(sample: &RgbdSample, p: &AugmentParams) -> Result<RgbdSample> {
    let (h, w) = (sample.height, sample.width);
    let hw = h * w;
    let col = |j: usize| if p.flip { w - 1 - j } else { j };
    let ys: Vec<f64> = (0..h).map(|i| source(i, p.offset.0, p.scale)).collect();
    let xs: Vec<f64> = (0..w).map(|j| source(j, p.offset.1, p.scale)).collect();

    let bilinear = |plane: &[f32], i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for (y, wy) in taps(ys[i], h) {
            for (x, wx) in taps(xs[j], w) {
                acc += wy * wx * plane[y * w + x] as f64;
            }
        }
        acc
    };

    let mut rgb = vec![0f32; 3 * hw];
    let mut depth = vec![0f32; hw];
    let mut labels = vec![0i32; hw];
    let mut normals = sample.normals.as_ref().map(|_| vec![0f32; 3 * hw]);
    let src_depth = sample.depth.data();
    for i in 0..h {
        for j in 0..w {
            let out = i * w + col(j);
            for c in 0..3 {
                rgb[c * hw + out] = bilinear(&sample.rgb.data()[c * hw..(c + 1) * hw], i, j) as f32;
            }
            // A reading blended with a dropped (zero) neighbour stays invalid.
            let mut acc = 0.0;
            let mut valid = true;
            for (y, wy) in taps(ys[i], h) {
                for (x, wx) in taps(xs[j], w) {
                    let d = src_depth[y * w + x];
                    if wy * wx > 0.0 && d <= 0.0 {
                        valid = false;
                    }
                    acc += wy * wx * d as f64;
                }
            }
            depth[out] = if valid { (acc / p.scale) as f32 } else { 0.0 };
            let (ny, nx) = (nearest(ys[i], h), nearest(xs[j], w));
            labels[out] = sample.labels[ny * w + nx];
            if let (Some(dst), Some(src)) = (normals.as_mut(), sample.normals.as_ref()) {
                for c in 0..3 {
                    let v = src.data()[c * hw + ny * w + nx];
                    dst[c * hw + out] = if c == 0 && p.flip { -v } else { v };
                }
            }
        }
    }
    Ok(RgbdSample {
        height: h,
        width: w,
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth: Tensor::new(vec![1, h, w], depth)?,
        labels,
        normals: normals.map(|n| Tensor::new(vec![3, h, w], n)).transpose()?,
    })
}

pub fn augment(sample: &RgbdSample, rng: &mut DataRng) -> Result<RgbdSample> {
    let p = sample_params(rng, sample.height, sample.width);
    apply(sample, &p)
}
