//! Synthetic segmentation data: flat-colored shapes on a noisy gray field.
//!
//! Every class has a fixed hue family (circle: red, square: green, triangle:
//! blue) with per-instance brightness and tint jitter. Each class appears in a
//! sample with probability 0.9 (at least one shape is always drawn), in a
//! random drawing order; later shapes overwrite earlier ones in both the image
//! and the mask. Geometry is defined on a 64-pixel canvas and scaled with the
//! requested size. Images are quantized to 8 bits at generation time so the
//! in-memory dataset equals what is written to disk.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::pnm;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

const CLASS_PRESENCE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Dataset("count must be >= 1".into()));
        }
        if self.size < 8 {
            return Err(Error::Dataset("size must be >= 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { x0: f64, y0: f64, side: f64 },
    /// Upright isosceles triangle: apex at `(ax, ay)`, base `height` below it.
    Triangle { ax: f64, ay: f64, base: f64, height: f64 },
}

impl Geometry {
    pub fn class_id(&self) -> u8 {
        match self {
            Geometry::Circle { .. } => 1,
            Geometry::Square { .. } => 2,
            Geometry::Triangle { .. } => 3,
        }
    }

    /// Whether the center of pixel `(row, col)` is inside the shape.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        match *self {
            Geometry::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Square { x0, y0, side } => {
                x >= x0 && x <= x0 + side && y >= y0 && y <= y0 + side
            }
            Geometry::Triangle {
                ax,
                ay,
                base,
                height,
            } => {
                if y < ay || y > ay + height {
                    return false;
                }
                let half = 0.5 * base * (y - ay) / height;
                (x - ax).abs() <= half
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub geometry: Geometry,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: ClassMask,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Shapes of sample `index`, in drawing order.
pub fn layout(spec: &DatasetSpec, index: usize) -> Vec<ShapeInstance> {
    let mut rng = rng::generator(spec.seed, Purpose::Data, index as u64);
    layout_with(&mut rng, spec.size)
}

fn layout_with(rng: &mut rng::Generator, size: usize) -> Vec<ShapeInstance> {
    let s = size as f64 / 64.0;
    let size_f = size as f64;
    let mut classes: Vec<u8> = (1..=3).filter(|_| rng.random_bool(CLASS_PRESENCE)).collect();
    if classes.is_empty() {
        classes.push(rng.random_range(1..=3));
    }
    classes.shuffle(rng);
    classes
        .into_iter()
        .map(|class| {
            let geometry = match class {
                1 => {
                    let r = rng.random_range(5.0..12.0) * s;
                    Geometry::Circle {
                        cx: rng.random_range(r..size_f - r),
                        cy: rng.random_range(r..size_f - r),
                        r,
                    }
                }
                2 => {
                    let side = rng.random_range(10.0..22.0) * s;
                    Geometry::Square {
                        x0: rng.random_range(0.0..size_f - side),
                        y0: rng.random_range(0.0..size_f - side),
                        side,
                    }
                }
                _ => {
                    let base = rng.random_range(12.0..26.0) * s;
                    let height = rng.random_range(12.0..24.0) * s;
                    Geometry::Triangle {
                        ax: rng.random_range(base / 2.0..size_f - base / 2.0),
                        ay: rng.random_range(0.0..size_f - height),
                        base,
                        height,
                    }
                }
            };
            let v: f32 = rng.random_range(0.75..1.0);
            let mut color = [0.0f32; 3];
            for c in color.iter_mut() {
                *c = rng.random_range(0.0..0.25) * v;
            }
            color[class as usize - 1] = v;
            ShapeInstance { geometry, color }
        })
        .collect()
}

fn quantized(v: f32) -> f32 {
    pnm::quantize(v) as f32 / 255.0
}

pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let size = spec.size;
    let plane = size * size;
    let mut rng = rng::generator(spec.seed, Purpose::Data, index as u64);
    let shapes = layout_with(&mut rng, size);
    let mut image = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let g: f32 = rng.random_range(0.35..0.65);
        for ch in 0..3 {
            image[ch * plane + p] = g;
        }
    }
    let mut ids = vec![0u8; plane];
    for shape in &shapes {
        for row in 0..size {
            for col in 0..size {
                if shape.geometry.covers(row, col) {
                    let p = row * size + col;
                    ids[p] = shape.geometry.class_id();
                    for ch in 0..3 {
                        image[ch * plane + p] = shape.color[ch];
                    }
                }
            }
        }
    }
    image.iter_mut().for_each(|v| *v = quantized(*v));
    Ok(Sample {
        id: sample_id(index),
        image: Tensor::new(&[1, 3, size, size], image)?,
        mask: ClassMask::new(size, size, ids)?,
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_sample(spec, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub size: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.pgm"))
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.json` under `dir`;
/// returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        std::fs::write(image_path(dir, &s.id), pnm::write_ppm(&s.image)?)?;
        std::fs::write(mask_path(dir, &s.id), pnm::write_pgm(&s.mask))?;
    }
    let manifest = Manifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        size: spec.size,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: spec.seed,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = pnm::read_ppm(&std::fs::read(image_path(dir, id))?)?;
    let mask = pnm::read_pgm(&std::fs::read(mask_path(dir, id))?)?;
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .ids
        .iter()
        .map(|id| read_sample(dir, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, count: usize, size: usize) -> DatasetSpec {
        DatasetSpec { seed, count, size }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec(3, 4, 32)).unwrap(), generate(&spec(3, 4, 32)).unwrap());
        assert_ne!(generate(&spec(3, 4, 32)).unwrap(), generate(&spec(4, 4, 32)).unwrap());
    }

    #[test]
    fn circle_pixels_lie_in_some_disk() {
        let sp = spec(21, 30, 64);
        for (i, s) in generate(&sp).unwrap().iter().enumerate() {
            let disks: Vec<(f64, f64, f64)> = layout(&sp, i)
                .into_iter()
                .filter_map(|sh| match sh.geometry {
                    Geometry::Circle { cx, cy, r } => Some((cx, cy, r)),
                    _ => None,
                })
                .collect();
            for row in 0..64 {
                for col in 0..64 {
                    if s.mask.get(row, col) == 1 {
                        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                        assert!(
                            disks.iter().any(|&(cx, cy, r)| (x - cx).hypot(y - cy) <= r + 1e-9),
                            "sample {i} pixel ({row},{col})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn image_values_quantized_and_in_range() {
        let s = generate_sample(&spec(1, 1, 16), 0).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(quantized(v), v);
        }
        assert!(s.mask.ids().iter().all(|&c| (c as usize) < NUM_CLASSES));
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = spec(5, 3, 16);
        let samples = generate(&sp).unwrap();
        let manifest_path = write_dataset(dir.path(), &sp, &samples).unwrap();
        assert!(manifest_path.ends_with(MANIFEST_FILE));
        let (manifest, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest.ids, vec!["s00000", "s00001", "s00002"]);
        assert_eq!(manifest.size, 16);
        assert_eq!(back, samples);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Dataset(_))));
    }
}
