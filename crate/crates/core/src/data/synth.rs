//! Procedural RGBD scenes with exact labels, depth and normals.
//!
//! A scene is a fronto-parallel background plane with rectangles and disks
//! in front of it. Every object is a tilted planar patch whose depth lies in
//! the band of its class; objects are painted far to near, so the nearest
//! object covering a pixel owns its label, depth and normal. Every third
//! class (3, 6, ...) reuses the colour of the class three below it, the
//! first of them sharing the background colour, so colour alone cannot
//! separate those pairs and depth has to.

use crate::data::rng::DataRng;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Depth of the background plane, metres.
pub const BACKGROUND_DEPTH: f64 = 4.0;
/// Nearest object depth, metres.
pub const NEAREST_DEPTH: f64 = 0.8;
/// Maximum surface slope of an object plane (depth change per lateral metre).
pub const MAX_SLOPE: f64 = 0.4;
/// Half-amplitude of the uniform colour noise.
pub const COLOR_NOISE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStyle {
    pub name: String,
    pub color: [f64; 3],
    /// Range of object centre depths, metres.
    pub band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub classes: Vec<ClassStyle>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Palette {
    /// Default palette for `classes` classes (class 0 is the background).
    pub fn standard(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(config_err!("a segmentation palette needs at least 2 classes, got {classes}"));
        }
        let width = (BACKGROUND_DEPTH - 0.4 - NEAREST_DEPTH) / (classes - 1) as f64;
        let mut styles: Vec<ClassStyle> = vec![ClassStyle {
            name: "background".into(),
            color: [0.55, 0.5, 0.45],
            band: (BACKGROUND_DEPTH, BACKGROUND_DEPTH),
        }];
        for c in 1..classes {
            let lo = NEAREST_DEPTH + (c - 1) as f64 * width;
            let color = if c % 3 == 0 {
                styles[c - 3].color
            } else {
                hsv(((c - 1) as f64 * 0.618_034).fract(), 0.7, 0.85)
            };
            styles.push(ClassStyle {
                name: format!("class{c}"),
                color,
                band: (lo, lo + 0.6 * width),
            });
        }
        Ok(Palette { classes: styles })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Selects an independent random stream, normally the sample index.
    pub stream: u64,
    pub num_objects: usize,
    pub height: usize,
    pub width: usize,
    pub palette: Palette,
    /// Probability that a pixel's depth reading is dropped (stored as 0).
    pub dropout: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, stream: u64, num_objects: usize, size: (usize, usize), classes: usize) -> Result<Self> {
        Ok(SceneSpec {
            seed,
            stream,
            num_objects,
            height: size.0,
            width: size.1,
            palette: Palette::standard(classes)?,
            dropout: 0.01,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outline {
    Rect { half_h: f64, half_w: f64 },
    Disk { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub outline: Outline,
    /// Centre in pixel coordinates `(row, col)`.
    pub center: (f64, f64),
    pub depth: f64,
    /// Depth change per lateral metre along rows and columns.
    pub slope: (f64, f64),
}

impl SceneObject {
    pub fn covers(&self, i: usize, j: usize) -> bool {
        let (dy, dx) = (i as f64 - self.center.0, j as f64 - self.center.1);
        match self.outline {
            Outline::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            Outline::Disk { radius } => dy * dy + dx * dx <= radius * radius,
        }
    }

    pub fn depth_at(&self, i: usize, j: usize, pitch: f64) -> f64 {
        let (dy, dx) = (i as f64 - self.center.0, j as f64 - self.center.1);
        self.depth + pitch * (self.slope.0 * dy + self.slope.1 * dx)
    }

    /// Unit normal of the object plane, `(x, y, z)` with x along columns.
    pub fn normal(&self) -> [f64; 3] {
        let (sy, sx) = self.slope;
        let n = (sx * sx + sy * sy + 1.0).sqrt();
        [-sx / n, -sy / n, 1.0 / n]
    }
}

/// One sample. Images are stored channel-first: `rgb` is `3×H×W`, `depth`
/// `1×H×W`, `normals` `3×H×W`; `labels` is `H×W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub height: usize,
    pub width: usize,
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub labels: Vec<i32>,
    pub normals: Option<Tensor<f32>>,
}

impl RgbdSample {
    pub fn depth_valid(&self) -> Vec<bool> {
        self.depth.data().iter().map(|&d| d > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Objects in painting order (far to near).
    pub objects: Vec<SceneObject>,
    pub sample: RgbdSample,
}

/// Lateral size of one pixel, metres; the scene spans two metres across.
pub fn pixel_pitch(width: usize) -> f64 {
    2.0 / width as f64
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(config_err!("scene size {h}x{w} is empty"));
    }
    if spec.palette.len() < 2 {
        return Err(config_err!("palette needs at least 2 classes"));
    }
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(config_err!("depth dropout {} outside [0, 1)", spec.dropout));
    }
    let mut rng = DataRng::new(spec.seed, spec.stream);
    let side = h.min(w) as f64;
    let classes = spec.palette.len();
    let mut objects: Vec<SceneObject> = (0..spec.num_objects)
        .map(|_| {
            let class = rng.between(1, classes - 1);
            let outline = if rng.coin() {
                Outline::Rect {
                    half_h: rng.uniform(0.08, 0.22) * side,
                    half_w: rng.uniform(0.08, 0.22) * side,
                }
            } else {
                Outline::Disk {
                    radius: rng.uniform(0.08, 0.2) * side,
                }
            };
            let center = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64));
            let band = spec.palette.classes[class].band;
            let depth = rng.uniform(band.0, band.1);
            let slope = (rng.uniform(-MAX_SLOPE, MAX_SLOPE), rng.uniform(-MAX_SLOPE, MAX_SLOPE));
            SceneObject {
                class,
                outline,
                center,
                depth,
                slope,
            }
        })
        .collect();
    // Far to near; ties keep generation order.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let pitch = pixel_pitch(w);
    let hw = h * w;
    let mut rgb = vec![0f32; 3 * hw];
    let mut depth = vec![0f32; hw];
    let mut normals = vec![0f32; 3 * hw];
    let mut labels = vec![0i32; hw];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let front = objects.iter().rev().find(|o| o.covers(i, j));
            let (class, d, n) = match front {
                Some(o) => (o.class, o.depth_at(i, j, pitch), o.normal()),
                None => (0, BACKGROUND_DEPTH, [0.0, 0.0, 1.0]),
            };
            labels[p] = class as i32;
            let color = spec.palette.classes[class].color;
            for c in 0..3 {
                let noisy = color[c] + rng.uniform(-COLOR_NOISE, COLOR_NOISE);
                rgb[c * hw + p] = noisy.clamp(0.0, 1.0) as f32;
                normals[c * hw + p] = n[c] as f32;
            }
            depth[p] = if rng.unit() < spec.dropout { 0.0 } else { d as f32 };
        }
    }
    if !labels.contains(&0) {
        return Err(config_err!(
            "{} objects cover the whole {h}x{w} image; no background pixels remain",
            spec.num_objects
        ));
    }
    Ok(Scene {
        objects,
        sample: RgbdSample {
            height: h,
            width: w,
            rgb: Tensor::new(vec![3, h, w], rgb)?,
            depth: Tensor::new(vec![1, h, w], depth)?,
            labels,
            normals: Some(Tensor::new(vec![3, h, w], normals)?),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_classes_share_colour() {
        let p = Palette::standard(7).unwrap();
        assert_eq!(p.classes[3].color, p.classes[0].color);
        assert_eq!(p.classes[6].color, p.classes[3].color);
        assert_ne!(p.classes[1].color, p.classes[2].color);
        for c in 1..7 {
            assert!(p.classes[c].band.1 < BACKGROUND_DEPTH - 0.3);
            if c > 1 {
                assert!(p.classes[c].band.0 > p.classes[c - 1].band.1);
            }
        }
        assert!(Palette::standard(1).is_err());
    }

    #[test]
    fn normals_are_unit() {
        let o = SceneObject {
            class: 1,
            outline: Outline::Disk { radius: 3.0 },
            center: (0.0, 0.0),
            depth: 1.0,
            slope: (0.3, -0.2),
        };
        let n = o.normal();
        assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
    }
}
