//! Procedural toy image set: small grayscale pattern classes.
//!
//! Twelve pattern families; a generated dataset uses the first
//! `id_classes` as in-distribution classes and the next `ood_classes` as the
//! held-out OOD pool. Every sample gets a seeded phase shift, brightness
//! jitter, and pixel noise, so crops of one class vary while staying
//! recognizable.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::stream_rng;
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const MAX_PATTERN_CLASSES: usize = 12;

const STREAM_SAMPLE: u64 = 0x60;
const NOISE_STD: f64 = 0.05;
// keep shifts under a quarter of the shortest pattern period, so samples of
// one class stay positively correlated
const MAX_PHASE_SHIFT: f64 = 2.0;

fn pattern_value(class: usize, x: f64, y: f64) -> f64 {
    let s = IMAGE_SIZE as f64;
    match class {
        0 => if (y / 4.0).floor() as i64 % 2 == 0 { 0.85 } else { 0.15 },
        1 => if (x / 4.0).floor() as i64 % 2 == 0 { 0.85 } else { 0.15 },
        2 => if ((x + y) / 6.0).floor() as i64 % 2 == 0 { 0.8 } else { 0.2 },
        3 => {
            let cx = (x / 4.0).floor() as i64;
            let cy = (y / 4.0).floor() as i64;
            if (cx + cy) % 2 == 0 { 0.9 } else { 0.1 }
        }
        4 => {
            let cx = (x / 8.0).floor() as i64;
            let cy = (y / 8.0).floor() as i64;
            if (cx + cy) % 2 == 0 { 0.9 } else { 0.1 }
        }
        5 => {
            let r = ((x - s / 2.0).powi(2) + (y - s / 2.0).powi(2)).sqrt();
            if (r / 4.0).floor() as i64 % 2 == 0 { 0.85 } else { 0.15 }
        }
        6 => x / s,
        7 => y / s,
        8 => {
            let dx = x.rem_euclid(8.0) - 4.0;
            let dy = y.rem_euclid(8.0) - 4.0;
            if dx * dx + dy * dy < 4.0 { 0.95 } else { 0.1 }
        }
        9 => {
            let near_v = (x - s / 2.0).abs() < 3.0;
            let near_h = (y - s / 2.0).abs() < 3.0;
            if near_v || near_h { 0.9 } else { 0.15 }
        }
        10 => {
            let d = (x - s / 2.0).abs().max((y - s / 2.0).abs());
            if (d / 4.0).floor() as i64 % 2 == 0 { 0.8 } else { 0.2 }
        }
        11 => if ((x - y) / 6.0).floor() as i64 % 2 == 0 { 0.75 } else { 0.25 },
        _ => unreachable!("pattern class out of range"),
    }
}

/// Render one sample of `class` as grayscale bytes.
pub fn render_sample(class: usize, dataset_seed: u64, sample: usize) -> Vec<u8> {
    let mut rng = stream_rng(
        dataset_seed,
        STREAM_SAMPLE,
        (class * 100_000 + sample) as u64,
    );
    let dx: f64 = rng.gen_range(0.0..MAX_PHASE_SHIFT);
    let dy: f64 = rng.gen_range(0.0..MAX_PHASE_SHIFT);
    let brightness: f64 = rng.gen_range(-0.08..0.08);
    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
            let v = pattern_value(class, x as f64 + dx, y as f64 + dy) + brightness + noise;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    pixels
}

/// Paths produced by [`generate_toy_dataset`].
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub id_train: PathBuf,
    pub id_test: PathBuf,
    pub ood_test: PathBuf,
    pub id_class_names: Vec<String>,
}

/// Write a toy dataset under `root`: PNG images plus the three manifests.
///
/// ID classes are `pattern0..patternN`; OOD test images come from the next
/// `ood_classes` pattern families and carry no labels.
pub fn generate_toy_dataset(
    root: &Path,
    seed: u64,
    id_classes: usize,
    ood_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<ToyDataset> {
    if id_classes == 0 || train_per_class == 0 || test_per_class == 0 {
        return Err(Error::InvalidConfig(
            "toy dataset needs at least one class and one sample per split".into(),
        ));
    }
    if id_classes + ood_classes > MAX_PATTERN_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "at most {MAX_PATTERN_CLASSES} pattern classes exist, asked for {}",
            id_classes + ood_classes
        )));
    }
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;

    let save = |class: usize, sample: usize| -> Result<String> {
        let pixels = render_sample(class, seed, sample);
        let img = image::GrayImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, pixels)
            .expect("buffer matches dimensions");
        let name = format!("images/pattern{class}_{sample:03}.png");
        img.save(root.join(&name))
            .map_err(|e| Error::ImageDecode(e.to_string()))?;
        Ok(name)
    };

    let mut id_train_lines = Vec::new();
    let mut id_test_lines = Vec::new();
    for class in 0..id_classes {
        for sample in 0..train_per_class {
            let name = save(class, sample)?;
            id_train_lines.push(format!("{name}\tpattern{class}"));
        }
        for t in 0..test_per_class {
            let name = save(class, train_per_class + t)?;
            id_test_lines.push(format!("{name}\tpattern{class}"));
        }
    }
    let mut ood_lines = Vec::new();
    for ood in 0..ood_classes {
        let class = id_classes + ood;
        for t in 0..test_per_class {
            let name = save(class, t)?;
            ood_lines.push(name);
        }
    }

    let id_train = root.join("id_train.tsv");
    let id_test = root.join("id_test.tsv");
    let ood_test = root.join("ood_test.tsv");
    std::fs::write(&id_train, id_train_lines.join("\n") + "\n")?;
    std::fs::write(&id_test, id_test_lines.join("\n") + "\n")?;
    std::fs::write(&ood_test, ood_lines.join("\n") + "\n")?;

    Ok(ToyDataset {
        root: root.to_path_buf(),
        id_train,
        id_test,
        ood_test,
        id_class_names: (0..id_classes).map(|c| format!("pattern{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_class_sensitive() {
        let a = render_sample(0, 7, 3);
        let b = render_sample(0, 7, 3);
        let c = render_sample(1, 7, 3);
        let d = render_sample(0, 8, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toy_dataset(dir.path(), 1, 3, 2, 4, 2).unwrap();
        let train = std::fs::read_to_string(&ds.id_train).unwrap();
        assert_eq!(train.lines().count(), 12);
        assert!(train.lines().all(|l| l.contains('\t')));
        let ood = std::fs::read_to_string(&ds.ood_test).unwrap();
        assert_eq!(ood.lines().count(), 4);
        assert!(ood.lines().all(|l| !l.contains('\t')));
        let m = crate::harness::manifest::ingest_dataset(&ds.id_train).unwrap();
        assert_eq!(m.class_names.len(), 3);
    }

    #[test]
    fn too_many_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_toy_dataset(dir.path(), 1, 10, 6, 1, 1).is_err());
    }
}
