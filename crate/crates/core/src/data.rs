//! Labeled image collections: CSV-manifest ingestion and a synthetic
//! lesion-like dataset for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_codes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_codes: self.class_codes.clone(),
        }
    }

    /// Seeded shuffle, then the first `train_fraction` goes to training.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Every image resized to `res x res` (area averaging for integer factors).
    pub fn resized(&self, res: usize) -> Dataset {
        Dataset {
            images: self.images.iter().map(|i| i.downscale(res, res)).collect(),
            labels: self.labels.clone(),
            class_codes: self.class_codes.clone(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(self.class_codes[l].clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Mean pairwise root-mean-square pixel distance over the first
    /// `limit` images.
    pub fn mean_pairwise_distance(&self, limit: usize) -> f64 {
        mean_pairwise_distance(&self.images[..self.len().min(limit)])
    }
}

pub fn mean_pairwise_distance(images: &[Image]) -> f64 {
    let n = images.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += images[i].rms_distance(&images[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Loads a directory of PNG/JPEG files described by a CSV manifest.
///
/// The first column is the file name relative to `dir`. Either a single
/// `label` column holds the class code, or one numeric column per class
/// holds a one-hot encoding (the header row names the classes). Images are
/// resized to `resize` when given.
pub fn load_manifest(dir: &Path, manifest: &Path, resize: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(manifest)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(Error::Invalid("manifest needs a file column and label column(s)".into()));
    }
    let categorical = headers.len() == 2;
    let mut class_codes: Vec<String> = if categorical { Vec::new() } else { headers[1..].to_vec() };
    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record?;
        let file = record.get(0).unwrap_or_default().to_string();
        let label = if categorical {
            let code = record.get(1).unwrap_or_default().trim().to_string();
            match class_codes.iter().position(|c| *c == code) {
                Some(i) => i,
                None => {
                    class_codes.push(code);
                    class_codes.len() - 1
                }
            }
        } else {
            let values: Vec<f64> = record.iter().skip(1).map(|v| v.trim().parse::<f64>().unwrap_or(0.0)).collect();
            values
                .iter()
                .position(|&v| v >= 0.5)
                .ok_or_else(|| Error::Invalid(format!("row for {file} has no positive class")))?
        };
        raw.push((file, label));
    }
    if categorical {
        // Sort codes for a stable class order independent of row order.
        let mut sorted = class_codes.clone();
        sorted.sort();
        let remap: Vec<usize> =
            class_codes.iter().map(|c| sorted.iter().position(|s| s == c).expect("code present")).collect();
        for (_, l) in &mut raw {
            *l = remap[*l];
        }
        class_codes = sorted;
    }
    let mut ds = Dataset { class_codes, ..Dataset::default() };
    for (file, label) in raw {
        let mut img = Image::open(&dir.join(&file))?;
        if let Some(r) = resize {
            img = img.resize(r, r);
        }
        ds.images.push(img);
        ds.labels.push(label);
    }
    Ok(ds)
}

/// Codes of the synthetic classes, loosely named after lesion appearance.
pub const SYNTHETIC_CODES: [&str; 4] = ["DOT", "PATCH", "STREAK", "RING"];

/// Generates `count` RGB images of a soft-edged blob on a skin-toned
/// background, balanced over four classes that differ in blob size, shape
/// and color. Seeded and deterministic.
pub fn synthetic_blobs(count: usize, res: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let mut ds = Dataset { class_codes: SYNTHETIC_CODES.iter().map(|s| s.to_string()).collect(), ..Dataset::default() };
    let s = res as f64 / 28.0;
    for i in 0..count {
        let class = i % 4;
        let skin =
            [0.85 + rng.gen_range(-0.06..0.06), 0.68 + rng.gen_range(-0.06..0.06), 0.58 + rng.gen_range(-0.06..0.06)];
        let cy = res as f64 / 2.0 + rng.gen_range(-3.0..3.0) * s;
        let cx = res as f64 / 2.0 + rng.gen_range(-3.0..3.0) * s;
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let shade = rng.gen_range(-0.05..0.05);
        // (semi-axis a, semi-axis b, color, inner ring radius fraction)
        let (a, b, color, ring) = match class {
            0 => {
                let r = rng.gen_range(4.0..6.0) * s;
                (r, r, [0.30 + shade, 0.18 + shade, 0.12 + shade], None)
            }
            1 => {
                let r = rng.gen_range(9.0..11.0) * s;
                (r, r * rng.gen_range(0.85..1.0), [0.62 + shade, 0.45 + shade, 0.33 + shade], None)
            }
            2 => {
                let a = rng.gen_range(10.0..12.0) * s;
                (a, a * rng.gen_range(0.25..0.35), [0.70 + shade, 0.25 + shade, 0.25 + shade], None)
            }
            _ => {
                let r = rng.gen_range(7.5..9.5) * s;
                (r, r, [0.40 + shade, 0.28 + shade, 0.22 + shade], Some(0.5))
            }
        };
        let (sin, cos) = angle.sin_cos();
        let mut px = Vec::with_capacity(res * res * 3);
        for y in 0..res {
            for x in 0..res {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let r = (u * u + v * v).sqrt();
                // Soft boundary over roughly one pixel.
                let mut alpha = 1.0 / (1.0 + ((r - 1.0) * a.min(b) * 1.5).exp());
                if let Some(inner) = ring {
                    alpha *= 1.0 - 0.8 / (1.0 + ((inner - r) * a * 1.5).exp());
                }
                for ch in 0..3 {
                    let v = skin[ch] * (1.0 - alpha) + color[ch] * alpha + noise.sample(&mut rng);
                    px.push(v);
                }
            }
        }
        ds.images.push(Image::from_clamped(res, res, 3, px).expect("synthetic image"));
        ds.labels.push(class);
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_blobs(40, 28, 3);
        let b = synthetic_blobs(40, 28, 3);
        assert_eq!(a.images, b.images);
        assert!(a.class_counts().values().all(|&n| n == 10));
        assert_eq!(a.images[0].dims(), (28, 28, 3));
    }

    #[test]
    fn split_partitions() {
        let ds = synthetic_blobs(20, 8, 1);
        let (tr, va) = ds.split(0.8, 9);
        assert_eq!((tr.len(), va.len()), (16, 4));
    }

    #[test]
    fn manifest_categorical_and_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_blobs(4, 16, 2);
        for (i, img) in ds.images.iter().enumerate() {
            std::fs::write(dir.path().join(format!("{i}.png")), img.to_png_bytes().unwrap()).unwrap();
        }
        let cat = dir.path().join("cat.csv");
        std::fs::write(&cat, "file,label\n0.png,NV\n1.png,MEL\n2.png,NV\n3.png,BCC\n").unwrap();
        let loaded = load_manifest(dir.path(), &cat, Some(8)).unwrap();
        assert_eq!(loaded.class_codes, vec!["BCC", "MEL", "NV"]);
        assert_eq!(loaded.labels, vec![2, 1, 2, 0]);
        assert_eq!(loaded.images[0].dims(), (8, 8, 3));

        let hot = dir.path().join("hot.csv");
        std::fs::write(&hot, "image,MEL,NV\n0.png,0,1\n1.png,1.0,0.0\n").unwrap();
        let loaded = load_manifest(dir.path(), &hot, None).unwrap();
        assert_eq!(loaded.class_codes, vec!["MEL", "NV"]);
        assert_eq!(loaded.labels, vec![1, 0]);
    }
}
