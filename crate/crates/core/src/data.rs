//! Labeled image sets: a synthetic blob generator, image directories with a
//! label file, and the CIFAR binary archives.
//!
//! Pixels are `f64` in `[0, 1]`, stored per image as `[c][h][w]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::nn::{Dims, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub num_classes: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: Dims, num_classes: usize, images: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some((i, _)) = images.iter().enumerate().find(|(_, im)| im.len() != dims.numel()) {
            return Err(Error::ShapeMismatch(format!("image {i} does not have shape {dims}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self {
            dims,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<&[f64]> = indices.iter().map(|&i| self.images[i].as_slice()).collect();
        let x = Tensor::from_samples(self.dims, &imgs)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Mean number of samples per class.
    pub fn per_class_count(&self) -> usize {
        (self.len() / self.num_classes.max(1)).max(1)
    }
}

/// Settings of the synthetic blob benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    /// Extra clusters generated like the classes but reserved as OOD.
    pub ood_clusters: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Gaussian bumps forming each class prototype.
    pub bumps: usize,
    pub noise_std: f64,
    /// Maximum random translation in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            ood_clusters: 1,
            channels: 1,
            height: 16,
            width: 16,
            train_per_class: 500,
            test_per_class: 100,
            bumps: 3,
            noise_std: 0.15,
            max_shift: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlobsData {
    pub train: Dataset,
    pub test: Dataset,
    /// Held-out clusters, labeled from 0 within the OOD set.
    pub ood: Dataset,
}

fn prototype<R: Rng>(cfg: &BlobsConfig, rng: &mut R) -> Vec<f64> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut img = vec![0.5; cfg.channels * cfg.height * cfg.width];
    for _ in 0..cfg.bumps {
        let cy = rng.gen_range(0.15..0.85) * h;
        let cx = rng.gen_range(0.15..0.85) * w;
        let sigma = rng.gen_range(0.1..0.2) * h.min(w);
        let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.25..0.45);
        for c in 0..cfg.channels {
            let ch_amp = amp * rng.gen_range(0.6..1.0);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(c * cfg.height + y) * cfg.width + x] += ch_amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img
}

fn jitter<R: Rng>(cfg: &BlobsConfig, proto: &[f64], noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    let s = cfg.max_shift as i64;
    let dy = rng.gen_range(-s..=s);
    let dx = rng.gen_range(-s..=s);
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let mut out = vec![0.0; proto.len()];
    for c in 0..cfg.channels {
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).clamp(0, h - 1);
                let sx = (x - dx).clamp(0, w - 1);
                let v = proto[(c * cfg.height + sy as usize) * cfg.width + sx as usize] + noise.sample(rng);
                out[(c * cfg.height + y as usize) * cfg.width + x as usize] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Deterministic blob benchmark: every class (and OOD cluster) is a random
/// smooth prototype; samples are shifted noisy copies.
pub fn gaussian_blobs(cfg: &BlobsConfig) -> Result<BlobsData> {
    if cfg.classes == 0 || cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(invalid("blob benchmark needs classes and a non-empty image shape"));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(invalid("blob benchmark needs samples in both splits"));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(invalid("noise_std must be finite and non-negative"));
    }
    let dims = Dims::new(cfg.channels, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| invalid(e.to_string()))?;
    let protos: Vec<Vec<f64>> = (0..cfg.classes + cfg.ood_clusters)
        .map(|_| prototype(cfg, &mut rng))
        .collect();
    let mut make = |classes: std::ops::Range<usize>, per: usize, offset: usize| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in classes {
            for _ in 0..per {
                images.push(jitter(cfg, &protos[c], &noise, &mut rng));
                labels.push(c - offset);
            }
        }
        (images, labels)
    };
    let (tr_x, tr_y) = make(0..cfg.classes, cfg.train_per_class, 0);
    let (te_x, te_y) = make(0..cfg.classes, cfg.test_per_class, 0);
    let total = cfg.classes + cfg.ood_clusters;
    let (od_x, od_y) = make(cfg.classes..total, cfg.test_per_class, cfg.classes);
    Ok(BlobsData {
        train: Dataset::new(dims, cfg.classes, tr_x, tr_y)?,
        test: Dataset::new(dims, cfg.classes, te_x, te_y)?,
        ood: Dataset::new(dims, cfg.ood_clusters.max(1), od_x, od_y)?,
    })
}

/// Random split into `(rest, held_out)` with `fraction` of the samples held out.
pub fn holdout(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (fraction * data.len() as f64).round() as usize;
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Dataset::new(
            data.dims,
            data.num_classes,
            ids.iter().map(|&i| data.images[i].clone()).collect(),
            ids.iter().map(|&i| data.labels[i]).collect(),
        )
    };
    Ok((pick(&idx[n_hold..])?, pick(&idx[..n_hold])?))
}

/// Reads `labels.csv` (`file,label` rows, optional header) next to the images.
/// Images are converted to grayscale when `channels` is 1, to RGB when 3.
pub fn load_image_dir(dir: &Path, channels: usize, num_classes: Option<usize>) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(invalid(format!("image directories support 1 or 3 channels, not {channels}")));
    }
    let label_path = dir.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(&label_path)
        .map_err(|e| Error::Parse {
            path: label_path.clone(),
            message: e.to_string(),
        })?;
    let mut dims = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: label_path.clone(),
            message: e.to_string(),
        })?;
        let parse_err = |message: String| Error::Parse {
            path: label_path.clone(),
            message,
        };
        if rec.len() != 2 {
            return Err(parse_err(format!("row {} needs `file,label`", row + 1)));
        }
        let label: usize = match rec[1].parse() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(parse_err(format!("row {}: bad label {:?}", row + 1, &rec[1]))),
        };
        let path = dir.join(&rec[0]);
        let img = image::open(&path).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let d = Dims::new(channels, h, w);
        if *dims.get_or_insert(d) != d {
            return Err(Error::ShapeMismatch(format!("{} is {d}, expected {}", path.display(), dims.unwrap())));
        }
        let raw: Vec<u8> = if channels == 1 {
            img.to_luma8().into_raw()
        } else {
            img.to_rgb8().into_raw()
        };
        let hw = h * w;
        let mut px = vec![0.0; channels * hw];
        for (i, &v) in raw.iter().enumerate() {
            px[(i % channels) * hw + i / channels] = f64::from(v) / 255.0;
        }
        images.push(px);
        labels.push(label);
    }
    let dims = dims.ok_or_else(|| invalid(format!("{} lists no images", label_path.display())))?;
    let n = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(dims, n, images, labels)
}

/// Writes images as PNG files plus `labels.csv`, readable by [`load_image_dir`].
pub fn save_image_dir(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let d = data.dims;
    if d.channels != 1 && d.channels != 3 {
        return Err(invalid("only 1- or 3-channel images can be written as PNG"));
    }
    let mut csv_text = String::from("file,label\n");
    let hw = d.spatial();
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("{i:06}.png");
        let mut raw = vec![0u8; d.numel()];
        for (j, r) in raw.iter_mut().enumerate() {
            let v = img[(j % d.channels) * hw + j / d.channels];
            *r = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        let color = if d.channels == 1 {
            image::ColorType::L8
        } else {
            image::ColorType::Rgb8
        };
        let path = dir.join(&name);
        image::save_buffer(&path, &raw, d.width as u32, d.height as u32, color).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        csv_text.push_str(&format!("{name},{label}\n"));
    }
    let label_path = dir.join("labels.csv");
    fs::write(&label_path, csv_text).map_err(io_err(label_path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarFormat {
    Cifar10,
    /// Fine labels.
    Cifar100,
}

/// Reads one or more CIFAR binary batch files (32x32 RGB).
pub fn load_cifar_bin(paths: &[&Path], format: CifarFormat) -> Result<Dataset> {
    let (label_bytes, classes) = match format {
        CifarFormat::Cifar10 => (1, 10),
        CifarFormat::Cifar100 => (2, 100),
    };
    let pixels = 3 * 32 * 32;
    let record = label_bytes + pixels;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(io_err(*path))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(usize::from(rec[label_bytes - 1]));
            images.push(rec[label_bytes..].iter().map(|&v| f64::from(v) / 255.0).collect());
        }
    }
    Dataset::new(Dims::new(3, 32, 32), classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BlobsConfig {
        BlobsConfig {
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            height: 8,
            width: 8,
            ..BlobsConfig::default()
        }
    }

    #[test]
    fn blobs_are_deterministic_and_shaped() {
        let a = gaussian_blobs(&small()).unwrap();
        let b = gaussian_blobs(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 6);
        assert_eq!(a.ood.len(), 2);
        assert!(a.ood.labels.iter().all(|&l| l == 0));
        assert!(a.train.images.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let c = gaussian_blobs(&BlobsConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn dataset_rejects_bad_labels_and_shapes() {
        let d = Dims::new(1, 2, 2);
        assert!(Dataset::new(d, 2, vec![vec![0.0; 4]], vec![2]).is_err());
        assert!(Dataset::new(d, 2, vec![vec![0.0; 3]], vec![0]).is_err());
        assert!(Dataset::new(d, 2, vec![vec![0.0; 4]], vec![]).is_err());
    }

    #[test]
    fn image_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let data = gaussian_blobs(&small()).unwrap().test;
        save_image_dir(&data, tmp.path()).unwrap();
        let back = load_image_dir(tmp.path(), 1, Some(3)).unwrap();
        assert_eq!(back.labels, data.labels);
        for (a, b) in back.images.iter().zip(&data.images) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cifar_records_parse() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("batch.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..3072).map(|i| (i % 256) as u8));
        }
        fs::write(&path, &bytes).unwrap();
        let d = load_cifar_bin(&[&path], CifarFormat::Cifar10).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.images[0][255], 1.0);
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(load_cifar_bin(&[&path], CifarFormat::Cifar10).is_err());
    }

    #[test]
    fn holdout_partitions_samples() {
        let data = gaussian_blobs(&small()).unwrap().train;
        let (rest, held) = holdout(&data, 0.25, 3).unwrap();
        assert_eq!(held.len(), 3);
        assert_eq!(rest.len() + held.len(), data.len());
    }
}
