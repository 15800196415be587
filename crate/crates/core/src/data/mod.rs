//! Synthetic data, augmentation, on-disk datasets and batching.

pub mod augment;
pub mod rng;
pub mod synth;
pub mod tensor_file;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{config_err, data_err, Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::tensor::{Element, Tensor};

pub use augment::{augment, AugmentParams};
pub use rng::DataRng;
pub use synth::{generate_scene, Palette, RgbdSample, Scene, SceneSpec};
pub use tensor_file::{read_tensor, write_tensor, StoredTensor, TensorData};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "adsd-manifest 1";

/// Relative file paths of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub rgb: String,
    pub depth: String,
    pub labels: String,
    pub normals: Option<String>,
}

/// Dataset index: image size, class names with pixel counts, and one
/// record per sample.
///
/// ```text
/// adsd-manifest 1
/// size 64 64
/// class 0 background 10342
/// class 1 class1 2211
/// samples 2
/// sample samples/00000.rgb.tnsr samples/00000.depth.tnsr samples/00000.labels.tnsr samples/00000.normals.tnsr
/// sample ...
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    /// Labelled pixels per class over all samples (ignore index excluded).
    pub histogram: Vec<u64>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\nsize {} {}\n", self.height, self.width);
        for (i, (name, count)) in self.class_names.iter().zip(&self.histogram).enumerate() {
            let _ = writeln!(s, "class {i} {name} {count}");
        }
        let _ = writeln!(s, "samples {}", self.samples.len());
        for r in &self.samples {
            let _ = write!(s, "sample {} {} {}", r.rgb, r.depth, r.labels);
            if let Some(n) = &r.normals {
                let _ = write!(s, " {n}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Format {
            field: "manifest",
            detail: format!("line {}: {detail}", line + 1),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            other => return Err(bad(0, format!("expected `{MANIFEST_HEADER}`, found {:?}", other.map(|l| l.1)))),
        }
        let mut size = None;
        let mut class_names = Vec::new();
        let mut histogram = Vec::new();
        let mut declared = None;
        let mut samples = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n, format!("`{s}` is not a count")));
            match f.as_slice() {
                [] => {}
                ["size", h, w] => size = Some((num(h)? as usize, num(w)? as usize)),
                ["class", i, name, count] => {
                    if num(i)? as usize != class_names.len() {
                        return Err(bad(n, format!("class index {i} out of order")));
                    }
                    class_names.push(name.to_string());
                    histogram.push(num(count)?);
                }
                ["samples", k] => declared = Some(num(k)? as usize),
                ["sample", rgb, depth, labels, rest @ ..] if rest.len() <= 1 => samples.push(SampleRecord {
                    rgb: rgb.to_string(),
                    depth: depth.to_string(),
                    labels: labels.to_string(),
                    normals: rest.first().map(|s| s.to_string()),
                }),
                _ => return Err(bad(n, format!("unrecognised record `{line}`"))),
            }
        }
        let (height, width) = size.ok_or_else(|| bad(0, "missing `size` record".into()))?;
        if declared != Some(samples.len()) {
            return Err(bad(0, format!("declared {declared:?} samples, listed {}", samples.len())));
        }
        Ok(Manifest {
            height,
            width,
            class_names,
            histogram,
            samples,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

/// Counts labelled pixels per class.
pub fn label_histogram(labels: &[i32], classes: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; classes];
    for &l in labels {
        if l == IGNORE_INDEX {
            continue;
        }
        let slot = usize::try_from(l)
            .ok()
            .and_then(|i| hist.get_mut(i))
            .ok_or_else(|| data_err!("label {l} outside [0, {classes})"))?;
        *slot += 1;
    }
    Ok(hist)
}

/// Writes samples under `dir/samples/` and the manifest at `dir/manifest.txt`.
pub fn write_dataset(dir: &Path, size: (usize, usize), class_names: &[String], samples: &[RgbdSample]) -> Result<Manifest> {
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut histogram = vec![0u64; class_names.len()];
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if (s.height, s.width) != size {
            return Err(data_err!("sample {i} is {}x{}, dataset is {}x{}", s.height, s.width, size.0, size.1));
        }
        let rel = |kind: &str| format!("samples/{i:05}.{kind}.tnsr");
        let record = SampleRecord {
            rgb: rel("rgb"),
            depth: rel("depth"),
            labels: rel("labels"),
            normals: s.normals.as_ref().map(|_| rel("normals")),
        };
        write_tensor(&dir.join(&record.rgb), &StoredTensor::from(&s.rgb))?;
        write_tensor(&dir.join(&record.depth), &StoredTensor::from(&s.depth))?;
        write_tensor(
            &dir.join(&record.labels),
            &StoredTensor::labels(vec![s.height, s.width], s.labels.clone())?,
        )?;
        if let (Some(n), Some(path)) = (&s.normals, &record.normals) {
            write_tensor(&dir.join(path), &StoredTensor::from(n))?;
        }
        for (h, c) in histogram.iter_mut().zip(label_histogram(&s.labels, class_names.len())?) {
            *h += c;
        }
        records.push(record);
    }
    let manifest = Manifest {
        height: size.0,
        width: size.1,
        class_names: class_names.to_vec(),
        histogram,
        samples: records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Objects per generated scene, drawn uniformly from this inclusive range.
pub const OBJECTS_PER_SCENE: (usize, usize) = (2, 5);
const OBJECT_COUNT_SALT: u64 = 0x4f42_4a53;

/// Generates `count` seeded scenes and writes them as a dataset. Sample `i`
/// uses random stream `i`, so a dataset is a prefix of any larger one made
/// with the same seed. A scene whose objects leave no background pixel is
/// regenerated with one object fewer.
pub fn generate_dataset(dir: &Path, seed: u64, count: usize, size: (usize, usize), classes: usize) -> Result<Manifest> {
    let palette = Palette::standard(classes)?;
    if size.0 == 0 || size.1 == 0 {
        return Err(config_err!("image size {}x{} is empty", size.0, size.1));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (lo, hi) = OBJECTS_PER_SCENE;
        let mut objects = DataRng::new(seed ^ OBJECT_COUNT_SALT, i).between(lo, hi);
        let scene = loop {
            let spec = SceneSpec::new(seed, i, objects, size, classes)?;
            match generate_scene(&spec) {
                Err(Error::Config(_)) if objects > 0 => objects -= 1,
                other => break other?,
            }
        };
        samples.push(scene.sample);
    }
    write_dataset(dir, size, &palette.names(), &samples)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<RgbdSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let (h, w) = (manifest.height, manifest.width);
        let check = |what: &str, t: &StoredTensor, want: &[usize]| {
            if t.shape != want {
                Err(data_err!("{what} has shape {:?}, expected {want:?}", t.shape))
            } else {
                Ok(())
            }
        };
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let rgb = read_tensor(&dir.join(&r.rgb))?;
            check(&r.rgb, &rgb, &[3, h, w])?;
            let depth = read_tensor(&dir.join(&r.depth))?;
            check(&r.depth, &depth, &[1, h, w])?;
            let labels = read_tensor(&dir.join(&r.labels))?;
            check(&r.labels, &labels, &[h, w])?;
            let normals = match &r.normals {
                Some(p) => {
                    let t = read_tensor(&dir.join(p))?;
                    check(p, &t, &[3, h, w])?;
                    Some(t.into_float()?)
                }
                None => None,
            };
            let (_, labels) = labels.into_labels()?;
            label_histogram(&labels, manifest.num_classes())?;
            samples.push(RgbdSample {
                height: h,
                width: w,
                rgb: rgb.into_float()?,
                depth: depth.into_float()?,
                labels,
                normals,
            });
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Network-ready batch in NCHW layout.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    /// `N×H×W` labels.
    pub labels: Vec<i32>,
    pub normals: Option<Tensor<T>>,
    /// `N×H×W`; true where the depth reading is present.
    pub depth_valid: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl<T: Element> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_samples(samples: &[&RgbdSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| config_err!("empty batch"))?;
        let (h, w) = (first.height, first.width);
        if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(data_err!("batch mixes image sizes"));
        }
        let n = samples.len();
        let stack = |get: &dyn Fn(&RgbdSample) -> &Tensor<f32>, c: usize| {
            let data = samples.iter().flat_map(|s| get(s).data().iter().map(|&v| T::of(v as f64))).collect();
            Tensor::new(vec![n, c, h, w], data)
        };
        let normals = if samples.iter().all(|s| s.normals.is_some()) {
            Some(stack(&|s| s.normals.as_ref().expect("checked"), 3)?)
        } else {
            None
        };
        Ok(Batch {
            rgb: stack(&|s| &s.rgb, 3)?,
            depth: stack(&|s| &s.depth, 1)?,
            labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
            normals,
            depth_valid: samples.iter().flat_map(|s| s.depth_valid()).collect(),
            height: h,
            width: w,
        })
    }
}
