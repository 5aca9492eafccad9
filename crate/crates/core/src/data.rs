//! Dataset ingestion: IDX-format files (the MNIST distribution format) and
//! a synthetic blob dataset so the full pipeline runs with zero downloads.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::rng::{derive_seed, Xoshiro256StarStar};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {path}: need {needed} bytes, have {have}")]
    Truncated {
        path: String,
        needed: usize,
        have: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty dataset")]
    Empty,
}

/// An in-memory labeled image set; pixels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    /// Flat `[n, C, H, W]` buffer.
    images: Vec<S>,
    labels: Vec<usize>,
    pub class_count: usize,
    /// (C, H, W)
    pub image_shape: (usize, usize, usize),
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        images: Vec<S>,
        labels: Vec<usize>,
        class_count: usize,
        image_shape: (usize, usize, usize),
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let (c, h, w) = image_shape;
        assert_eq!(images.len(), labels.len() * c * h * w, "buffer size");
        assert!(labels.iter().all(|&l| l < class_count), "label range");
        Ok(Self {
            images,
            labels,
            class_count,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    pub fn image(&self, idx: usize) -> &[S] {
        let size = self.image_len();
        &self.images[idx * size..(idx + 1) * size]
    }

    /// Gathers `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Batch<S> {
        let (c, h, w) = self.image_shape;
        let size = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * size);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Batch {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], data).expect("batch shape"),
            labels: Some(labels),
        }
    }

    /// First `n` samples as a separate dataset (for held-out splits).
    pub fn take(&self, n: usize) -> Dataset<S> {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            image_shape: self.image_shape,
        }
    }
}

/// A set of images with optional held-back labels. Labels feed metrics
/// only; adapters never read them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub labels: Option<Vec<usize>>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    if at + 4 > buf.len() {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            needed: at + 4,
            have: buf.len(),
        });
    }
    Ok(u32::from_be_bytes(buf[at..at + 4].try_into().unwrap()))
}

/// Parses big-endian IDX image/label pairs: image magic 0x00000803 with
/// dimensions `[n, rows, cols]`, label magic 0x00000801 with `[n]`.
/// Pixel bytes are scaled by 1/255 into `[0,1]`.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>, DataError> {
    let ibuf = read_file(images_path)?;
    let imagic = be_u32(&ibuf, 0, images_path)?;
    if imagic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IMAGE_MAGIC,
            found: imagic,
        });
    }
    let n = be_u32(&ibuf, 4, images_path)? as usize;
    let rows = be_u32(&ibuf, 8, images_path)? as usize;
    let cols = be_u32(&ibuf, 12, images_path)? as usize;
    let pixel_bytes = n * rows * cols;
    if ibuf.len() < 16 + pixel_bytes {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            needed: 16 + pixel_bytes,
            have: ibuf.len(),
        });
    }

    let lbuf = read_file(labels_path)?;
    let lmagic = be_u32(&lbuf, 0, labels_path)?;
    if lmagic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: LABEL_MAGIC,
            found: lmagic,
        });
    }
    let ln = be_u32(&lbuf, 4, labels_path)? as usize;
    if ln != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    if lbuf.len() < 8 + ln {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            needed: 8 + ln,
            have: lbuf.len(),
        });
    }

    let scale = 1.0 / 255.0;
    let images: Vec<S> = ibuf[16..16 + pixel_bytes]
        .iter()
        .map(|&b| S::from_f64(b as f64 * scale))
        .collect();
    let labels: Vec<usize> = lbuf[8..8 + ln].iter().map(|&b| b as usize).collect();
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let class_count = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(images, labels, class_count, (1, rows, cols))
}

/// Synthetic blob dataset: each class is a Gaussian bump at a
/// class-specific spot on a ring around the image center, plus amplitude
/// and position jitter and low-level pixel noise, clipped to `[0,1]`.
/// Classes are balanced within one sample and the construction is a pure
/// function of the seed.
pub fn synth_blobs<S: Scalar>(
    n: usize,
    class_count: usize,
    image_shape: (usize, usize, usize),
    seed: u64,
) -> Dataset<S> {
    assert!(n >= class_count, "need at least one sample per class");
    let (c, h, w) = image_shape;
    let size = c * h * w;
    let mut images = vec![S::zero(); n * size];
    let mut labels = vec![0usize; n];

    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let ring = 0.30 * h.min(w) as f64;

    for (i, label_slot) in labels.iter_mut().enumerate() {
        let label = i % class_count;
        *label_slot = label;
        let mut rng = Xoshiro256StarStar::seeded(derive_seed(seed, &[i as u64]));
        let angle = std::f64::consts::TAU * label as f64 / class_count as f64;
        let (jy, jx) = rng.next_gaussian_pair();
        let by = cy + ring * angle.sin() + 0.8 * jy;
        let bx = cx + ring * angle.cos() + 0.8 * jx;
        let amp = 0.7 + 0.3 * rng.next_f64();
        let sigma = 1.6 + 0.8 * rng.next_f64();
        let inv = 1.0 / (2.0 * sigma * sigma);

        let base = i * size;
        let mut noise = vec![0.0f64; h * w];
        rng.fill_gaussian(&mut noise, 0.05);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                let v = (amp * (-d2 * inv).exp() + noise[y * w + x]).clamp(0.0, 1.0);
                for ch in 0..c {
                    images[base + ch * h * w + y * w + x] = S::from_f64(v);
                }
            }
        }
    }
    Dataset::new(images, labels, class_count, image_shape).expect("nonempty by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    /// Hand-built IDX pair: two 2x2 images with pixel bytes 0..=7 and two
    /// label bytes.
    fn write_fixture(dir: &Path, pixels: &[u8], image_count: u32, label_count: u32) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&image_count.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(pixels);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&label_count.to_be_bytes());
        lbl.extend_from_slice(&[3u8, 7u8][..label_count as usize]);
        let ipath = dir.join("images.idx");
        let lpath = dir.join("labels.idx");
        fs::write(&ipath, img).unwrap();
        fs::write(&lpath, lbl).unwrap();
        (ipath, lpath)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_fixture(dir.path(), &[0, 51, 102, 153, 204, 255, 10, 20], 2, 2);
        let ds: Dataset<f64> = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape, (1, 2, 2));
        assert_eq!(ds.labels(), &[3, 7]);
        assert!((ds.image(0)[0] - 0.0).abs() < 1e-12);
        assert!((ds.image(0)[1] - 51.0 / 255.0).abs() < 1e-12);
        assert!((ds.image(1)[1] - 255.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn label_magic_on_images_file_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("bad.idx");
        let mut buf = Vec::new();
        buf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        buf.extend_from_slice(&0u32.to_be_bytes());
        fs::write(&ipath, buf).unwrap();
        let lpath = dir.path().join("labels.idx");
        fs::write(&lpath, []).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ipath, &lpath),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn empty_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("empty.idx");
        fs::write(&ipath, []).unwrap();
        let lpath = dir.path().join("labels.idx");
        fs::write(&lpath, []).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ipath, &lpath),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_fixture(dir.path(), &[0; 8], 2, 1);
        assert!(matches!(
            load_idx::<f64>(&ipath, &lpath),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 1
            })
        ));
    }

    #[test]
    fn idx_rereads_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_fixture(dir.path(), &[9, 8, 7, 6, 5, 4, 3, 2], 2, 2);
        let a: Dataset<f64> = load_idx(&ipath, &lpath).unwrap();
        let b: Dataset<f64> = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        let a: Dataset<f64> = synth_blobs(64, 10, (1, 28, 28), 5);
        let b: Dataset<f64> = synth_blobs(64, 10, (1, 28, 28), 5);
        assert_eq!(a, b);
        let c: Dataset<f64> = synth_blobs(64, 10, (1, 28, 28), 6);
        assert_ne!(a, c);
    }

    #[test]
    fn blob_labels_balanced_within_one() {
        let ds: Dataset<f64> = synth_blobs(103, 10, (1, 16, 16), 1);
        let mut counts = vec![0usize; 10];
        for &l in ds.labels() {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn blob_pixels_stay_in_unit_range() {
        let ds: Dataset<f64> = synth_blobs(50, 5, (1, 12, 12), 9);
        for i in 0..ds.len() {
            assert!(ds.image(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
