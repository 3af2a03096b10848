//! Toy image-classification data: a synthetic two-Gaussian set and a small
//! binary file format.
//!
//! Binary layout, little endian: the 4 magic bytes `IABN`, then `u32`
//! count, height and width, then `count * height * width` pixel bytes
//! (scaled to `[0, 1]` on load), then `count` label bytes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"IABN";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `count * h * w` single-channel pixels, sample-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Splits off the last `fraction` of samples.
    pub fn split(self, fraction: f64) -> (Dataset, Dataset) {
        let n_test = ((self.len() as f64) * fraction).round() as usize;
        let n_train = self.len() - n_test;
        let p = self.pixels();
        let (h, w) = (self.h, self.w);
        let mut images = self.images;
        let mut labels = self.labels;
        let test = Dataset {
            images: images.split_off(n_train * p),
            labels: labels.split_off(n_train),
            h,
            w,
        };
        (
            Dataset {
                images,
                labels,
                h,
                w,
            },
            test,
        )
    }
}

/// Two classes of 8x8 images: every pixel is N(-0.5, 1) for class 0 and
/// N(+0.5, 1) for class 1, labels balanced at random.
pub fn two_gaussians(count: usize, seed: u64) -> Dataset {
    let (h, w) = (8, 8);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = usize::from(r.random_bool(0.5));
        let mean = if label == 1 { 0.5 } else { -0.5 };
        for _ in 0..h * w {
            let z: f64 = r.sample(StandardNormal);
            images.push(mean + z);
        }
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        h,
        w,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn parse_binary(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(malformed(path, "missing IABN header"));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (count, h, w) = (word(0), word(1), word(2));
    if count == 0 || h == 0 || w == 0 {
        return Err(malformed(path, format!("empty dimensions {count}x{h}x{w}")));
    }
    let pixels = count
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| malformed(path, "dimensions overflow"))?;
    let expected = 16 + pixels + count;
    if bytes.len() != expected {
        return Err(malformed(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let images = bytes[16..16 + pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels = bytes[16 + pixels..]
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    Ok(Dataset {
        images,
        labels,
        h,
        w,
    })
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_binary(&bytes, path)
}

/// Encodes `pixels` (already in bytes) and `labels` in the binary format.
pub fn encode_binary(h: usize, w: usize, pixels: &[u8], labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() + labels.len());
    out.extend_from_slice(MAGIC);
    for v in [labels.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(pixels);
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = two_gaussians(400, 3);
        assert_eq!(a, two_gaussians(400, 3));
        assert_ne!(a, two_gaussians(400, 4));
        let ones = a.labels.iter().filter(|&&l| l == 1).count();
        assert!((150..250).contains(&ones), "{ones}");
        assert_eq!(a.images.len(), 400 * 64);
        assert_eq!(a.classes(), 2);
    }

    #[test]
    fn class_means_are_separated() {
        let d = two_gaussians(2000, 1);
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for i in 0..d.len() {
            sums[d.labels[i]] += d.image(i).iter().sum::<f64>();
            counts[d.labels[i]] += 64;
        }
        assert!((sums[0] / counts[0] as f64 + 0.5).abs() < 0.02);
        assert!((sums[1] / counts[1] as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn binary_round_trip() {
        let bytes = encode_binary(2, 3, &[0, 255, 10, 20, 30, 40, 1, 2, 3, 4, 5, 6], &[0, 1]);
        let d = parse_binary(&bytes, Path::new("mem")).unwrap();
        assert_eq!((d.len(), d.h, d.w), (2, 2, 3));
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.image(0)[1], 1.0);
    }

    #[test]
    fn binary_rejects_bad_input() {
        let p = Path::new("mem");
        assert!(parse_binary(b"NOPE............", p).is_err());
        let mut bytes = encode_binary(1, 1, &[7], &[1]);
        bytes.pop();
        assert!(matches!(
            parse_binary(&bytes, p),
            Err(CliError::Dataset { .. })
        ));
        assert!(parse_binary(&encode_binary(0, 1, &[], &[]), p).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let d = two_gaussians(10, 0);
        let labels = d.labels.clone();
        let (train, test) = d.split(0.2);
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.labels, labels[8..]);
        assert_eq!(train.images.len(), 8 * 64);
    }
}
